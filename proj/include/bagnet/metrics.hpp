#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "bagnet/tensor.hpp"

namespace bagnet {

/// Index of the largest logit; ties go to the lowest index.
template <class T>
std::size_t argmax(const Tensor<T>& logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

/// Fraction of exact matches.
inline double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels) {
  if (predictions.empty()) throw ShapeError("accuracy: empty input");
  if (predictions.size() != labels.size())
    throw ShapeError("accuracy: " + std::to_string(predictions.size()) + " predictions vs " +
                     std::to_string(labels.size()) + " labels");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

struct MeanStd {
  double mean = 0;
  double std = 0;  // sample standard deviation (n-1); 0 when n < 2
  std::size_t n = 0;
};

/// Two-pass mean and sample standard deviation.
inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd r;
  r.n = xs.size();
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return r;
  double ss = 0;
  for (double x : xs) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  return r;
}

}  // namespace bagnet
