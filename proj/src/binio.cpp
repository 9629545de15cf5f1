// SPDX-License-Identifier: Apache-2.0
#include "elite/binio.hpp"

#include <fstream>
#include <iterator>

namespace elite::binio {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void put_tensor(std::vector<std::uint8_t>& out, const Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(t.rows()));
  put_u32(out, static_cast<std::uint32_t>(t.cols()));
  for (double v : t.data()) put_f64(out, v);
}

Tensor get_tensor(Reader& in) {
  const std::size_t rows = in.u32();
  const std::size_t cols = in.u32();
  if (in.remaining() < rows * cols * 8) throw FormatError("tensor payload truncated");
  std::vector<double> data(rows * cols);
  for (double& v : data) v = in.f64();
  return Tensor(rows, cols, std::move(data));
}

}  // namespace elite::binio
