// Independent reference implementations and random generators shared by the tests.
#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "sslu/tensor.hpp"
#include "sslu/types.hpp"

namespace oracle {

inline sslu::Tensor2 random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  sslu::Tensor2 t(r, c);
  for (double& v : t.values()) v = n(rng);
  return t;
}

// Rows are normalised with long double sums so they share no code with log_softmax.
inline sslu::Tensor2 random_lattice(std::mt19937_64& rng, std::size_t T, std::size_t K, double spread = 2.0) {
  sslu::Tensor2 lat = random_tensor(rng, T, K, spread);
  for (std::size_t t = 0; t < T; ++t) {
    long double z = 0;
    for (double v : lat.row(t)) z += std::exp(static_cast<long double>(v));
    const double lz = static_cast<double>(std::log(z));
    for (double& v : lat.row(t)) v -= lz;
  }
  return lat;
}

inline sslu::LabelSequence random_labels(std::mt19937_64& rng, std::size_t max_len, int vocab) {
  std::uniform_int_distribution<std::size_t> len(0, max_len);
  std::uniform_int_distribution<int> sym(0, vocab - 1);
  sslu::LabelSequence l(len(rng));
  for (int& x : l) x = sym(rng);
  return l;
}

inline sslu::Tensor2 naive_matmul(const sslu::Tensor2& a, const sslu::Tensor2& b) {
  sslu::Tensor2 c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<double>(s);
    }
  }
  return c;
}

// CTC collapse written as an explicit state machine over (previous symbol).
inline sslu::LabelSequence collapse_ref(const std::vector<int>& path, int blank) {
  sslu::LabelSequence out;
  for (std::size_t t = 0; t < path.size(); ++t) {
    if (path[t] == blank) continue;
    if (t > 0 && path[t - 1] == path[t]) continue;
    out.push_back(path[t]);
  }
  return out;
}

}  // namespace oracle
