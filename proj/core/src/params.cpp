#include "mrconv/params.hpp"

#include "mrconv/error.hpp"

namespace mrconv {

std::string_view to_string(ParamGroup g) noexcept {
  switch (g) {
    case ParamGroup::kernel: return "kernel";
    case ParamGroup::other: return "other";
    case ParamGroup::buffer: return "buffer";
  }
  return "unknown";
}

ParamGroup parse_param_group(std::string_view name) {
  if (name == "kernel") return ParamGroup::kernel;
  if (name == "other") return ParamGroup::other;
  if (name == "buffer") return ParamGroup::buffer;
  throw Error(Errc::format_error, "unknown parameter group '" + std::string(name) + "'");
}

}  // namespace mrconv
