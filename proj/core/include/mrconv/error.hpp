#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mrconv {

enum class Errc {
  invalid_length,
  invalid_spectrum,
  invalid_sparsity,
  invalid_resolution,
  shape_error,
  kernel_too_long,
  degenerate_batch,
  invalid_mode,
  stale_merge,
  empty_tape,
  non_finite,
  integration_unstable,
  invalid_band_limit,
  format_error,
  config_error,
  checkpoint_error,
};

std::string_view to_string(Errc code) noexcept;

/// Exception carrying a machine-checkable error kind.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace mrconv
