#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "sslu/ctc.hpp"

using namespace sslu;

namespace {

constexpr double ninf = -std::numeric_limits<double>::infinity();

// Independent enumeration over every frame path, summing probabilities of the
// paths that collapse to `labels`.
double enumerate_nll(const Tensor2& lat, const LabelSequence& labels, int blank) {
  const std::size_t T = lat.rows(), K = lat.cols();
  std::vector<int> path(T, 0);
  long double total = 0;
  while (true) {
    if (oracle::collapse_ref(path, blank) == labels) {
      long double lp = 0;
      for (std::size_t t = 0; t < T; ++t) lp += lat(t, static_cast<std::size_t>(path[t]));
      total += std::exp(lp);
    }
    std::size_t t = 0;
    while (t < T && ++path[t] == static_cast<int>(K)) path[t++] = 0;
    if (t == T) break;
  }
  return static_cast<double>(-std::log(total));
}

}  // namespace

TEST(ExpandWithBlanks, Examples) {
  const int A = 0, blank = 1;
  EXPECT_EQ(expand_with_blanks(std::vector<int>{A}, blank).symbols, (std::vector<int>{blank, A, blank}));
  EXPECT_EQ(expand_with_blanks(std::vector<int>{}, blank).symbols, (std::vector<int>{blank}));
  EXPECT_EQ(expand_with_blanks(std::vector<int>{A, A}, blank).symbols, (std::vector<int>{blank, A, blank, A, blank}));
  EXPECT_THROW(expand_with_blanks(std::vector<int>{blank}, blank), DataError);
}

TEST(CtcLoss, TwoFrameUniformExample) {
  // V=1: symbols {A=0, blank=1}, p=0.5 everywhere. Paths A-, -A, AA collapse to [A].
  const Tensor2 lat(2, 2, std::log(0.5));
  const CtcResult r = ctc_loss(lat, std::vector<int>{0}, 1);
  EXPECT_NEAR(r.loss, -std::log(0.75), 1e-15);
  EXPECT_NEAR(r.loss, 0.2877, 1e-4);
}

TEST(CtcLoss, CertainSingleFrame) {
  const Tensor2 lat{{0.0, ninf}};
  EXPECT_EQ(ctc_loss(lat, std::vector<int>{0}, 1).loss, 0.0);
}

TEST(CtcLoss, RepeatNeedsSeparatingBlank) {
  const Tensor2 lat(2, 2, std::log(0.5));
  EXPECT_THROW(ctc_loss(lat, std::vector<int>{0, 0}, 1), InfeasibleError);
  EXPECT_NO_THROW(ctc_loss(Tensor2(3, 2, std::log(0.5)), std::vector<int>{0, 0}, 1));
}

TEST(CtcLoss, ZeroProbabilityIsInfeasible) {
  const Tensor2 lat{{ninf, 0.0}, {ninf, 0.0}};  // blank only
  EXPECT_THROW(ctc_loss(lat, std::vector<int>{0}, 1), InfeasibleError);
}

TEST(CtcLoss, InvalidLabelsRejected) {
  const Tensor2 lat(3, 3, std::log(1.0 / 3));
  EXPECT_THROW(ctc_loss(lat, std::vector<int>{5}, 2), DataError);
  EXPECT_THROW(ctc_loss(lat, std::vector<int>{0}, 7), DimensionError);
}

TEST(CtcBruteforce, EmptyLabelsIsAllBlank) {
  std::mt19937_64 rng(1);
  const Tensor2 lat = oracle::random_lattice(rng, 5, 3);
  double lp = 0;
  for (std::size_t t = 0; t < 5; ++t) lp += lat(t, 2);
  EXPECT_NEAR(ctc_loss_bruteforce(lat, std::vector<int>{}, 2), -lp, 1e-12);
  EXPECT_NEAR(ctc_loss(lat, std::vector<int>{}, 2).loss, -lp, 1e-12);
}

TEST(CtcBruteforce, DeterministicPath) {
  const Tensor2 lat{{ninf, 0.0}, {0.0, ninf}, {ninf, 0.0}};
  EXPECT_EQ(ctc_loss_bruteforce(lat, std::vector<int>{0}, 1), 0.0);
  EXPECT_EQ(ctc_loss(lat, std::vector<int>{0}, 1).loss, 0.0);
}

TEST(CtcBruteforce, GuardsEnumerationSize) {
  EXPECT_THROW(ctc_loss_bruteforce(Tensor2(30, 5), std::vector<int>{0}, 4), ContractViolation);
}

TEST(CtcBruteforce, LibraryOracleMatchesTestEnumeration) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 50; ++i) {
    const Tensor2 lat = oracle::random_lattice(rng, 4, 3);
    const LabelSequence l = oracle::random_labels(rng, 2, 2);
    if (ctc_min_frames(l) > 4) continue;
    EXPECT_NEAR(ctc_loss_bruteforce(lat, l, 2), enumerate_nll(lat, l, 2), 1e-12);
  }
}

TEST(CtcProperty, MatchesEnumerationOnRandomInstances) {
  std::mt19937_64 rng(11);
  std::size_t checked = 0;
  while (checked < 500) {
    const std::size_t T = std::uniform_int_distribution<std::size_t>(1, 7)(rng);
    const int V = std::uniform_int_distribution<int>(1, 4)(rng);
    const int blank = V;
    const LabelSequence l = oracle::random_labels(rng, 3, V);
    const Tensor2 lat = oracle::random_lattice(rng, T, static_cast<std::size_t>(V) + 1);
    if (ctc_min_frames(l) > T) {
      EXPECT_THROW(ctc_loss(lat, l, blank), InfeasibleError);
      continue;
    }
    const double want = enumerate_nll(lat, l, blank);
    EXPECT_NEAR(ctc_loss(lat, l, blank).loss, want, 1e-9) << "T=" << T << " V=" << V;
    ++checked;
  }
}

TEST(CtcProperty, SliceInvariantHoldsEveryFrame) {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 100; ++i) {
    const std::size_t T = std::uniform_int_distribution<std::size_t>(3, 20)(rng);
    const LabelSequence l = oracle::random_labels(rng, 3, 4);
    if (ctc_min_frames(l) > T) continue;
    const Tensor2 lat = oracle::random_lattice(rng, T, 5);
    const ExtendedLabels ext = expand_with_blanks(l, 4);
    const AlphaBeta ab = ctc_alpha_beta(lat, ext);
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> occ;
      for (std::size_t s = 0; s < ext.size(); ++s) occ.push_back(ctc_state_occupancy(ab, lat, ext, t, s));
      EXPECT_NEAR(logsumexp(occ), ab.log_likelihood, 1e-10);
    }
  }
}

TEST(CtcProperty, GradientRowsOfLogitsSumToZero) {
  std::mt19937_64 rng(13);
  const Tensor2 logits = oracle::random_tensor(rng, 6, 4);
  const CtcResult r = ctc_loss_from_logits(logits, std::vector<int>{0, 2}, 3);
  for (std::size_t t = 0; t < 6; ++t) {
    double s = 0;
    for (double g : r.gradient.row(t)) s += g;
    EXPECT_NEAR(s, 0.0, 1e-12);
  }
}

TEST(CtcProperty, GradientMatchesCentralDifferences) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    Parameter logits{"logits", oracle::random_tensor(rng, 6, 4)};
    LabelSequence l = oracle::random_labels(rng, 3, 3);
    if (ctc_min_frames(l) > 6) continue;
    std::vector<Parameter*> ps{&logits};
    const double err = grad_check([&](Tape& t) { return ctc_loss(t.param(logits), l, 3); }, ps);
    EXPECT_LT(err, 1e-4);
  }
}

TEST(CtcProperty, RelabelingCovariance) {
  std::mt19937_64 rng(15);
  for (int i = 0; i < 50; ++i) {
    const std::size_t T = 6;
    const int V = 4;
    const LabelSequence l = oracle::random_labels(rng, 3, V);
    if (ctc_min_frames(l) > T) continue;
    const Tensor2 lat = oracle::random_lattice(rng, T, V + 1);
    std::vector<int> perm(V);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor2 permuted(T, V + 1);
    for (std::size_t t = 0; t < T; ++t) {
      for (int k = 0; k < V; ++k) permuted(t, static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])) = lat(t, static_cast<std::size_t>(k));
      permuted(t, V) = lat(t, V);
    }
    LabelSequence pl;
    for (int x : l) pl.push_back(perm[static_cast<std::size_t>(x)]);
    EXPECT_NEAR(ctc_loss(lat, l, V).loss, ctc_loss(permuted, pl, V).loss, 1e-12);
  }
}

TEST(CtcProperty, AppendingFramesKeepsFeasibility) {
  std::mt19937_64 rng(16);
  for (int i = 0; i < 100; ++i) {
    const LabelSequence l = oracle::random_labels(rng, 4, 3);
    Tensor2 lat = oracle::random_lattice(rng, std::max<std::size_t>(1, ctc_min_frames(l)), 4);
    for (int extra = 0; extra < 4; ++extra) {
      EXPECT_NO_THROW(ctc_loss(lat, l, 3));
      lat.append_row(oracle::random_lattice(rng, 1, 4).row(0));
    }
  }
}

TEST(CtcTape, LossNodeFeedsUpstreamGradient) {
  std::mt19937_64 rng(17);
  Parameter logits{"logits", oracle::random_tensor(rng, 5, 3)};
  Tape t;
  Var loss = ctc_loss(t.param(logits), std::vector<int>{1}, 2);
  GradientMap g = t.backward(ad::scale(loss, 2.0));
  const CtcResult ref = ctc_loss_from_logits(logits.value, std::vector<int>{1}, 2);
  EXPECT_NEAR(loss.value()[0], ref.loss, 1e-15);
  for (std::size_t i = 0; i < ref.gradient.size(); ++i) EXPECT_NEAR(g.at(logits)[i], 2.0 * ref.gradient[i], 1e-15);
}
