#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "frieren/errors.hpp"

namespace frieren {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

/**
 * Dense row-major array of doubles.
 *
 * Holds per-pixel posteriors, features, images and parameters alike. Extents
 * are strictly positive; the flat buffer length always equals the product of
 * the extents.
 */
class NdArray {
 public:
  NdArray() = default;

  explicit NdArray(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    for (auto e : shape_)
      if (e == 0) throw ShapeError("NdArray: zero extent in " + shape_str(shape_));
    data_.assign(shape_numel(shape_), fill);
  }

  NdArray(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto e : shape_)
      if (e == 0) throw ShapeError("NdArray: zero extent in " + shape_str(shape_));
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("NdArray: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  /// Rank-2 convenience constructor from nested rows.
  static NdArray matrix(std::initializer_list<std::initializer_list<double>> rows) {
    if (rows.size() == 0) throw ShapeError("empty tensor");
    const std::size_t cols = rows.begin()->size();
    std::vector<double> flat;
    for (const auto& r : rows) {
      if (r.size() != cols) throw ShapeError("ragged matrix rows");
      flat.insert(flat.end(), r.begin(), r.end());
    }
    return NdArray({rows.size(), cols}, std::move(flat));
  }

  static NdArray vector(std::initializer_list<double> v) {
    return NdArray({v.size()}, std::vector<double>(v));
  }

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] std::size_t dim(std::size_t i) const { return shape_.at(i); }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  [[nodiscard]] std::span<double> data() noexcept { return data_; }
  [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
  [[nodiscard]] std::vector<double>& vec() noexcept { return data_; }
  [[nodiscard]] const std::vector<double>& vec() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  [[nodiscard]] double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  [[nodiscard]] std::span<double> row(std::size_t r) {
    const std::size_t w = data_.size() / shape_[0];
    return std::span<double>(data_).subspan(r * w, w);
  }
  [[nodiscard]] std::span<const double> row(std::size_t r) const {
    const std::size_t w = data_.size() / shape_[0];
    return std::span<const double>(data_).subspan(r * w, w);
  }

  [[nodiscard]] bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  /// Same data viewed under a different shape with equal element count.
  [[nodiscard]] NdArray reshaped(Shape s) const { return NdArray(std::move(s), data_); }

  friend bool operator==(const NdArray&, const NdArray&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline void require_rank2(const NdArray& a, const char* what) {
  if (a.empty()) throw ShapeError("empty tensor");
  if (a.rank() != 2) throw ShapeError(std::string(what) + ": expected rank-2, got " + shape_str(a.shape()));
}

/// Row-wise softmax with max subtraction.
inline NdArray softmax_rows(const NdArray& logits) {
  require_rank2(logits, "softmax_rows");
  NdArray out(logits.shape());
  const std::size_t rows = logits.dim(0);
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = logits.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] - mx);
      sum += o[c];
    }
    for (auto& v : o) v /= sum;
  }
  return out;
}

inline constexpr double kNormEpsilon = 1e-12;

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// v / max(||v||, 1e-12). The zero vector maps to itself.
inline NdArray l2_normalize(const NdArray& v) {
  NdArray out = v;
  const double n = std::max(l2_norm(v.data()), kNormEpsilon);
  for (auto& x : out.data()) x /= n;
  return out;
}

struct ArgmaxResult {
  std::vector<int> labels;
  std::vector<double> conf;
};

/// Per-row argmax, ties broken toward the lowest class index.
inline ArgmaxResult argmax_with_conf(const NdArray& probs) {
  require_rank2(probs, "argmax_with_conf");
  ArgmaxResult res;
  const std::size_t rows = probs.dim(0);
  res.labels.resize(rows);
  res.conf.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto p = probs.row(r);
    std::size_t best = 0;
    for (std::size_t c = 1; c < p.size(); ++c)
      if (p[c] > p[best]) best = c;
    res.labels[r] = static_cast<int>(best);
    res.conf[r] = p[best];
  }
  return res;
}

}  // namespace frieren
