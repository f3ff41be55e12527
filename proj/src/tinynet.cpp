#include "subpool/tinynet.hpp"

#include <vector>

namespace subpool::nn {

GradCheckReport grad_check(const std::function<double(std::span<const double>)>& f,
                           std::span<const double> params, std::span<const double> analytic,
                           double step, double tolerance, double floor) {
  if (params.size() != analytic.size()) throw ShapeError("grad_check: gradient size mismatch");
  GradCheckReport report;
  std::vector<double> probe(params.begin(), params.end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + step;
    const double up = f(probe);
    probe[i] = saved - step;
    const double down = f(probe);
    probe[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
    const double rel = std::abs(numeric - analytic[i]) / denom;
    if (i == 0 || rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
      report.analytic_at_worst = analytic[i];
      report.numeric_at_worst = numeric;
    }
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace subpool::nn
