#include "subpool/pool.hpp"

#include "subpool/corpus.hpp"

namespace subpool {

std::string_view pooling_name(PoolingMethod method) {
  switch (method) {
    case PoolingMethod::First: return "first";
    case PoolingMethod::Last: return "last";
    case PoolingMethod::Last2: return "last2";
    case PoolingMethod::FirstPlusLast: return "f+l";
    case PoolingMethod::Sum: return "sum";
    case PoolingMethod::Max: return "max";
    case PoolingMethod::Avg: return "avg";
    case PoolingMethod::Attn: return "attn";
    case PoolingMethod::Lstm: return "lstm";
  }
  return "?";
}

PoolingMethod parse_pooling(std::string_view name) {
  const auto lowered = lowercase_utf8(name);
  if (lowered == "fplusl") return PoolingMethod::FirstPlusLast;
  for (auto method : kAllPoolings) {
    if (pooling_name(method) == lowered) return method;
  }
  throw Error("unknown pooling '" + std::string(name) +
              "' (expected first, last, last2, f+l, sum, max, avg, attn or lstm)");
}

bool is_trainable(PoolingMethod method) {
  return method == PoolingMethod::FirstPlusLast || method == PoolingMethod::Attn ||
         method == PoolingMethod::Lstm;
}

std::size_t PoolingSpec::output_dim() const {
  switch (method) {
    case PoolingMethod::Last2: return 2 * input_dim;
    case PoolingMethod::Lstm: return 2 * lstm_hidden;
    default: return input_dim;
  }
}

ParamCount param_count(const PoolingSpec& spec, std::size_t num_classes, std::size_t mlp_hidden) {
  ParamCount count;
  const std::size_t in = spec.input_dim;
  switch (spec.method) {
    case PoolingMethod::FirstPlusLast:
      count.pooler = 1;
      break;
    case PoolingMethod::Attn:
      count.pooler = in * spec.attn_hidden + spec.attn_hidden + spec.attn_hidden + 1;
      break;
    case PoolingMethod::Lstm: {
      const std::size_t h = spec.lstm_hidden;
      count.pooler = 2 * 4 * (in * h + h * h + h);
      break;
    }
    default:
      break;
  }
  const std::size_t pooled = spec.output_dim();
  count.classifier = pooled * mlp_hidden + mlp_hidden + mlp_hidden * num_classes + num_classes;
  return count;
}

}  // namespace subpool
