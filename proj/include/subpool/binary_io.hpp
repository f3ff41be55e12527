#pragma once

#include <bit>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace subpool::binio {

// Little-endian encoding helpers shared by the embedding store and the probe
// checkpoint envelope.

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline void put_f32s(std::string& out, std::span<const float> values) {
  out.reserve(out.size() + 4 * values.size());
  for (float v : values) put_f32(out, v);
}

inline void put_bytes(std::string& out, std::string_view bytes) { out.append(bytes); }

/// Cursor over an in-memory buffer. `ok()` turns false on the first read past
/// the end; callers check it once per record.
class Reader {
 public:
  explicit Reader(std::string_view buffer) : buffer_(buffer) {}

  bool ok() const noexcept { return ok_; }
  std::size_t remaining() const noexcept { return buffer_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }

  std::uint32_t u32() {
    if (remaining() < 4) {
      ok_ = false;
      pos_ = buffer_.size();
      return 0;
    }
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buffer_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  void f32s(std::span<float> out) {
    if (remaining() < 4 * out.size()) {
      ok_ = false;
      pos_ = buffer_.size();
      return;
    }
    for (float& v : out) v = f32();
  }

  std::string_view bytes(std::size_t n) {
    if (remaining() < n) {
      ok_ = false;
      pos_ = buffer_.size();
      return {};
    }
    auto view = buffer_.substr(pos_, n);
    pos_ += n;
    return view;
  }

 private:
  std::string_view buffer_;
  std::size_t pos_ = 0;
  bool ok_ = true;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

}  // namespace subpool::binio
