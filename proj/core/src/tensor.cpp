#include "mrconv/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "mrconv/error.hpp"

namespace mrconv {

SeqTensor::SeqTensor(std::size_t batch, std::size_t channels, std::size_t length,
                     std::vector<double> data)
    : batch_(batch), channels_(channels), length_(length), data_(std::move(data)) {
  if (data_.size() != batch * channels * length) {
    throw Error(Errc::shape_error, "SeqTensor data size " + std::to_string(data_.size()) +
                                       " does not match " + shape_string());
  }
}

bool SeqTensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string SeqTensor::shape_string() const {
  return "(" + std::to_string(batch_) + ", " + std::to_string(channels_) + ", " +
         std::to_string(length_) + ")";
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw Error(Errc::shape_error, "Matrix data size mismatch");
  }
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(Errc::shape_error, "max_abs_diff size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_abs(std::span<const double> a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

void require_finite(const SeqTensor& x, const char* where) {
  if (!x.all_finite()) throw Error(Errc::non_finite, std::string("non-finite values in ") + where);
}

}  // namespace mrconv
