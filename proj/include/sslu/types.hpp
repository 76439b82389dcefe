// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "sslu/tensor.hpp"

namespace sslu {

// Ordered intent (or character) ids; never contains the blank symbol.
using LabelSequence = std::vector<int>;

// T x D frames at a fixed hop.
struct FeatureSequence {
  Tensor2 frames;
  double frame_ms = 10.0;

  std::size_t length() const { return frames.rows(); }
  std::size_t dim() const { return frames.cols(); }
};

// Per-dimension normalisation statistics estimated on a training split.
struct CmvnStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  bool empty() const { return mean.empty(); }
  friend bool operator==(const CmvnStats&, const CmvnStats&) = default;
};

}  // namespace sslu
