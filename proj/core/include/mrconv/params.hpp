#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mrconv {

/// Optimisation group. Kernel parameters train with their own learning rate
/// and no weight decay; buffers (running statistics) are state, not trained.
enum class ParamGroup { kernel, other, buffer };

std::string_view to_string(ParamGroup g) noexcept;
ParamGroup parse_param_group(std::string_view name);

/// Named view of a parameter or buffer living inside a layer.
struct ParamRef {
  std::string name;
  std::vector<std::size_t> shape;
  ParamGroup group;
  std::span<double> value;
};

inline std::size_t shape_size(const std::vector<std::size_t>& shape) noexcept {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

}  // namespace mrconv
