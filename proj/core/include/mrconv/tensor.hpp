#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace mrconv {

/// Dense (batch, channels, length) activation, row-major and contiguous.
class SeqTensor {
 public:
  SeqTensor() = default;
  SeqTensor(std::size_t batch, std::size_t channels, std::size_t length, double fill = 0.0)
      : batch_(batch), channels_(channels), length_(length), data_(batch * channels * length, fill) {}
  SeqTensor(std::size_t batch, std::size_t channels, std::size_t length, std::vector<double> data);

  std::size_t batch() const noexcept { return batch_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t length() const noexcept { return length_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t b, std::size_t d, std::size_t t) noexcept {
    return data_[(b * channels_ + d) * length_ + t];
  }
  double operator()(std::size_t b, std::size_t d, std::size_t t) const noexcept {
    return data_[(b * channels_ + d) * length_ + t];
  }

  /// The contiguous time series of one (batch, channel) lane.
  std::span<double> lane(std::size_t b, std::size_t d) noexcept {
    return {data_.data() + (b * channels_ + d) * length_, length_};
  }
  std::span<const double> lane(std::size_t b, std::size_t d) const noexcept {
    return {data_.data() + (b * channels_ + d) * length_, length_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }

  bool same_shape(const SeqTensor& other) const noexcept {
    return batch_ == other.batch_ && channels_ == other.channels_ && length_ == other.length_;
  }
  bool all_finite() const noexcept;
  std::string shape_string() const;

 private:
  std::size_t batch_ = 0;
  std::size_t channels_ = 0;
  std::size_t length_ = 0;
  std::vector<double> data_;
};

/// Row-major real matrix; per-channel kernels are stored one row per channel.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Largest |a - b| over two equally sized ranges.
double max_abs_diff(std::span<const double> a, std::span<const double> b);
double max_abs(std::span<const double> a);

/// Throws Errc::non_finite naming `where` when any entry is NaN or infinite.
void require_finite(const SeqTensor& x, const char* where);

}  // namespace mrconv
