#pragma once

#include <map>
#include <string>

#include "hydramix/tensor.hpp"

namespace hydramix {

// Binary weight archive. Layout (little-endian):
//   magic "HMXW", version u32, tensor count u32, then per tensor:
//   name length u16, name bytes, rank u8, extents u32[rank], f32 data.
// std::map keeps serialization order independent of insertion order.
using TensorMap = std::map<std::string, Tensor>;

void save_checkpoint(const std::string& path, const TensorMap& tensors);
TensorMap load_checkpoint(const std::string& path);

}  // namespace hydramix
