#pragma once

#include <iosfwd>
#include <string>

#include "vitsig/tensor.hpp"

namespace vitsig::vtf {

// Tensor container: magic "VTF1", u32 rank, u32 extents, float64 payload,
// everything little-endian, payload row-major.

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save(const std::string& path, const Tensor& t);
Tensor load(const std::string& path);

}  // namespace vitsig::vtf
