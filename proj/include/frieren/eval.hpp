#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "frieren/errors.hpp"

namespace frieren {

/// counts[g * C + p] = pixels with ground truth g predicted as p.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

  [[nodiscard]] std::size_t classes() const noexcept { return classes_; }
  [[nodiscard]] std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * classes_ + pred]; }
  [[nodiscard]] std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  void add(std::size_t truth, std::size_t pred, std::uint64_t n = 1) {
    if (truth >= classes_ || pred >= classes_) throw std::out_of_range("confusion matrix: class index out of range");
    counts_[truth * classes_ + pred] += n;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.classes_ != classes_) throw ShapeError("confusion matrix: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix accumulate(ConfusionMatrix cm, std::span<const int> labels, std::span<const int> preds) {
  if (labels.size() != preds.size()) throw ShapeError("accumulate: label/prediction length mismatch");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || preds[i] < 0) throw std::out_of_range("accumulate: negative class index");
    cm.add(static_cast<std::size_t>(labels[i]), static_cast<std::size_t>(preds[i]));
  }
  return cm;
}

struct IoUReport {
  std::vector<double> per_class;     // NaN for classes absent from both truth and prediction
  std::vector<std::uint8_t> present; // 1 where the IoU denominator is nonzero
  double mean = 0.0;
};

/// IoU_c = tp / (row + col - tp); classes with zero denominator are left out of the mean.
inline IoUReport miou(const ConfusionMatrix& cm) {
  const std::size_t C = cm.classes();
  IoUReport r{std::vector<double>(C, 0.0), std::vector<std::uint8_t>(C, 0), 0.0};
  std::size_t used = 0;
  double sum = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t k = 0; k < C; ++k) {
      row += cm.at(c, k);
      col += cm.at(k, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t denom = row + col - tp;
    if (denom == 0) {
      r.per_class[c] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    r.per_class[c] = static_cast<double>(tp) / static_cast<double>(denom);
    r.present[c] = 1;
    sum += r.per_class[c];
    ++used;
  }
  if (used == 0) throw std::domain_error("no classes present");
  r.mean = sum / static_cast<double>(used);
  return r;
}

}  // namespace frieren
