// SPDX-License-Identifier: Apache-2.0
//
// Little-endian primitives shared by the KITTI readers and the checkpoint
// format.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "elite/errors.hpp"
#include "elite/tensor.hpp"

namespace elite::binio {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + 4);
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + 8);
}

/// Sequential reader over a byte buffer; throws FormatError on overrun.
class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint32_t u32() { return take<std::uint32_t>(); }
  double f64() { return take<double>(); }
  float f32() { return take<float>(); }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  template <typename T>
  T take() {
    if (pos_ + sizeof(T) > bytes_.size()) throw FormatError("unexpected end of binary payload");
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

/// Tensor record: rows, cols (u32) then row-major f64 payload.
void put_tensor(std::vector<std::uint8_t>& out, const Tensor& t);
Tensor get_tensor(Reader& in);

}  // namespace elite::binio
