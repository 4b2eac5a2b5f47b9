#include "mrconv/error.hpp"

namespace mrconv {

std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::invalid_length: return "InvalidLength";
    case Errc::invalid_spectrum: return "InvalidSpectrum";
    case Errc::invalid_sparsity: return "InvalidSparsity";
    case Errc::invalid_resolution: return "InvalidResolution";
    case Errc::shape_error: return "ShapeError";
    case Errc::kernel_too_long: return "KernelTooLong";
    case Errc::degenerate_batch: return "DegenerateBatch";
    case Errc::invalid_mode: return "InvalidMode";
    case Errc::stale_merge: return "StaleMerge";
    case Errc::empty_tape: return "EmptyTape";
    case Errc::non_finite: return "NonFinite";
    case Errc::integration_unstable: return "IntegrationUnstable";
    case Errc::invalid_band_limit: return "InvalidBandLimit";
    case Errc::format_error: return "FormatError";
    case Errc::config_error: return "ConfigError";
    case Errc::checkpoint_error: return "CheckpointError";
  }
  return "Unknown";
}

}  // namespace mrconv
