#pragma once

#include <string>
#include <utility>
#include <vector>

#include "warpnorm/tensor.hpp"

namespace warpnorm {

// Flat binary blob with a plain-text header: version line, endianness tag,
// shape table, then raw little-endian doubles in table order.
void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, const Tensor4*>>& tensors);
std::vector<std::pair<std::string, Tensor4>> load_tensors(const std::string& path);

} // namespace warpnorm
