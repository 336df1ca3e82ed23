// SPDX-License-Identifier: Apache-2.0
//
// NDT1 tensor files: magic "NDT1", rank (u32 LE), dims (u32 LE each), then the
// row-major payload as little-endian f32.
#pragma once

#include <filesystem>
#include <iosfwd>

#include "cwamsn/tensor.hpp"

namespace cwamsn::nd {

void write_ndt(std::ostream& out, const Tensor& tensor);
/// Reads one tensor; throws IoError on bad magic or truncation.
Tensor read_ndt(std::istream& in);
/// Reads only the header, leaving the stream positioned at the payload.
Shape read_ndt_header(std::istream& in);

void save_ndt(const std::filesystem::path& path, const Tensor& tensor);
Tensor load_ndt(const std::filesystem::path& path);

}  // namespace cwamsn::nd
