// SPDX-License-Identifier: Apache-2.0
#include "cwamsn/ndt_io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>

#include "cwamsn/error.hpp"

namespace cwamsn::nd {
namespace {

constexpr std::array<char, 4> kMagic{'N', 'D', 'T', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw IoError("ndt: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_ndt(std::ostream& out, const Tensor& tensor) {
  out.write(kMagic.data(), kMagic.size());
  put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
  for (auto d : tensor.shape()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw IoError("ndt: dimension exceeds u32");
    put_u32(out, static_cast<std::uint32_t>(d));
  }
  const auto data = tensor.data();
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  } else {
    for (float v : data) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  if (!out) throw IoError("ndt: write failed");
}

Shape read_ndt_header(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kMagic) throw IoError("ndt: bad magic (expected NDT1)");
  const std::uint32_t rank = get_u32(in);
  if (rank > 16) throw IoError("ndt: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_u32(in);
  return shape;
}

Tensor read_ndt(std::istream& in) {
  Shape shape = read_ndt_header(in);
  std::vector<float> values(numel_of(shape));
  if constexpr (std::endian::native == std::endian::little) {
    if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)))) {
      throw IoError("ndt: truncated payload");
    }
  } else {
    for (auto& v : values) v = std::bit_cast<float>(get_u32(in));
  }
  return Tensor::from_data(std::move(shape), std::move(values));
}

void save_ndt(const std::filesystem::path& path, const Tensor& tensor) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  write_ndt(out, tensor);
}

Tensor load_ndt(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  try {
    return read_ndt(in);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace cwamsn::nd
