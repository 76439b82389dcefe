#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "sslu/ctc.hpp"
#include "sslu/encoder.hpp"

using namespace sslu;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.feature_dim = 3;
  c.stack_left = 2;
  c.frame_skip = 2;
  c.reductions = {2, 3};
  c.hidden_dim = 4;
  c.proj_dim = 3;
  c.head_dim = 5;
  c.vocab_size = 3;
  c.blank_index = 3;
  return c;
}

Tensor2 column(std::size_t T) {
  Tensor2 t(T, 1);
  for (std::size_t i = 0; i < T; ++i) t(i, 0) = static_cast<double>(i);
  return t;
}

LogProbLattice stream(const Tensor2& x, const EncoderModel& m, std::mt19937_64& rng, std::size_t max_chunk) {
  EncoderState st = EncoderState::start(m);
  LogProbLattice out(0, m.config.output_dim());
  std::size_t pos = 0;
  while (pos < x.rows()) {
    const std::size_t n = std::min(x.rows() - pos, std::uniform_int_distribution<std::size_t>(0, max_chunk)(rng));
    Tensor2 chunk(0, x.cols());
    for (std::size_t i = 0; i < n; ++i) chunk.append_row(x.row(pos + i));
    pos += n;
    const auto rows = encoder_stream_push(chunk, st, m);
    for (std::size_t r = 0; r < rows.rows(); ++r) out.append_row(rows.row(r));
  }
  const auto rows = encoder_stream_close(st, m);
  for (std::size_t r = 0; r < rows.rows(); ++r) out.append_row(rows.row(r));
  return out;
}

}  // namespace

TEST(StackFrames, NineFramesLeftSevenSkipThree) {
  const Tensor2 s = stack_frames(column(9), 7, 3);
  EXPECT_EQ(s.rows(), 3u);
  EXPECT_EQ(s.cols(), 8u);
  // Output row o stacks frames 3o-7 .. 3o, clamped at frame 0.
  for (std::size_t o = 0; o < 3; ++o) {
    for (std::size_t k = 0; k < 8; ++k) {
      const long src = static_cast<long>(3 * o + k) - 7;
      EXPECT_EQ(s(o, k), static_cast<double>(std::max(0L, src)));
    }
  }
}

TEST(StackFrames, IdentityAndSingleFrame) {
  std::mt19937_64 rng(1);
  const Tensor2 x = oracle::random_tensor(rng, 5, 2);
  EXPECT_EQ(stack_frames(x, 0, 1), x);
  const Tensor2 one{{4.0, 5.0}};
  const Tensor2 s = stack_frames(one, 7, 3);
  ASSERT_EQ(s.rows(), 1u);
  for (std::size_t k = 0; k < 8; ++k) {
    EXPECT_EQ(s(0, 2 * k), 4.0);
    EXPECT_EQ(s(0, 2 * k + 1), 5.0);
  }
}

TEST(TimeReduce, Examples) {
  const Tensor2 r = time_reduce(column(10), 4);
  EXPECT_EQ(r.rows(), 3u);
  EXPECT_EQ(r.cols(), 4u);
  EXPECT_EQ(std::vector<double>(r.row(2).begin(), r.row(2).end()), (std::vector<double>{8, 9, 9, 9}));
  std::mt19937_64 rng(2);
  const Tensor2 x = oracle::random_tensor(rng, 8, 2);
  EXPECT_EQ(time_reduce(x, 1), x);
  const Tensor2 r2 = time_reduce(x, 4);
  EXPECT_EQ(r2.rows(), 2u);
  EXPECT_EQ(r2.cols(), 8u);
  EXPECT_THROW(time_reduce(x, 0), DimensionError);
}

TEST(Geometry, OutputLengthAndTiming) {
  const EncoderConfig c;
  EXPECT_EQ(encoder_output_length(96, c), 2u);
  EXPECT_EQ(encoder_output_length(0, c), 0u);
  EXPECT_EQ(encoder_output_length(1, c), 1u);
  EXPECT_EQ(frames_per_output_step(c), 48u);
  EXPECT_DOUBLE_EQ(ms_per_output_step(c), 480.0);
  std::mt19937_64 rng(3);
  const EncoderModel m = make_encoder(c, 1);
  for (std::size_t T : {1u, 47u, 48u, 49u, 96u, 150u}) {
    EXPECT_EQ(encoder_forward(oracle::random_tensor(rng, T, c.feature_dim), m).rows(), encoder_output_length(T, c));
  }
}

TEST(Config, ValidateRejectsBadBlank) {
  EncoderConfig c;
  c.blank_index = 0;
  EXPECT_THROW(c.validate(), DataError);
}

TEST(Lstmp, ZeroWeightsGiveZeroOutput) {
  std::mt19937_64 rng(4);
  LstmpLayer l = make_lstmp_layer("l", 3, 4, 2, rng);
  for (Parameter* p : {&l.w_input, &l.w_recur, &l.bias, &l.w_proj}) p->value.fill(0.0);
  const LstmpState s = lstmp_step(std::vector<double>{1, 2, 3}, l, LstmpState::zeros(l));
  for (double v : s.proj) EXPECT_EQ(v, 0.0);
}

TEST(Lstmp, RecurrenceIsLive) {
  std::mt19937_64 rng(5);
  const LstmpLayer l = make_lstmp_layer("l", 3, 4, 2, rng);
  const std::vector<double> x{0.5, -1.0, 2.0}, zero(3, 0.0);
  const LstmpState a = lstmp_step(zero, l, LstmpState::zeros(l));
  const LstmpState b = lstmp_step(zero, l, lstmp_step(x, l, LstmpState::zeros(l)));
  EXPECT_NE(a.proj, b.proj);
  EXPECT_THROW(lstmp_step(std::vector<double>{1.0}, l, LstmpState::zeros(l)), DimensionError);
}

TEST(Lstmp, InitialisationRanges) {
  std::mt19937_64 rng(6);
  const LstmpLayer l = make_lstmp_layer("l", 10, 8, 6, rng);
  const double r = 1.0 / std::sqrt(16.0);
  for (double v : l.w_input.value.values()) EXPECT_LE(std::abs(v), r);
  for (double v : l.w_recur.value.values()) EXPECT_LE(std::abs(v), r);
  for (std::size_t j = 0; j < 32; ++j) EXPECT_EQ(l.bias.value[j], (j >= 8 && j < 16) ? 1.0 : 0.0);
  EXPECT_FALSE(l.bias.decays);
}

TEST(Lstmp, TapeMatchesPlainForward) {
  std::mt19937_64 rng(7);
  const LstmpLayer l = make_lstmp_layer("l", 3, 4, 2, rng);
  const Tensor2 x = oracle::random_tensor(rng, 6, 3);
  Tape t;
  EXPECT_LT(max_abs_diff(lstmp_sequence(t, t.constant(x), l).value(), lstmp_forward(x, l)), 1e-14);
}

TEST(Lstmp, GradCheckOnSumOfOutputs) {
  std::mt19937_64 rng(8);
  LstmpLayer l = make_lstmp_layer("l", 3, 4, 2, rng);
  const Tensor2 x = oracle::random_tensor(rng, 5, 3);
  std::vector<Parameter*> ps{&l.w_input, &l.w_recur, &l.bias, &l.w_proj};
  EXPECT_LT(grad_check([&](Tape& t) { return ad::sum(lstmp_sequence(t, t.constant(x), l)); }, ps), 1e-4);
}

TEST(Lstmp, SingleStepGradCheck) {
  std::mt19937_64 rng(9);
  LstmpLayer l = make_lstmp_layer("l", 4, 3, 2, rng);
  const Tensor2 x = oracle::random_tensor(rng, 1, 4);
  std::vector<Parameter*> ps{&l.w_input, &l.w_recur, &l.bias, &l.w_proj};
  auto f = [&](Tape& t) {
    Var y = lstmp_sequence(t, t.constant(x), l);
    return ad::sum(ad::mul(y, y));
  };
  EXPECT_LT(grad_check(f, ps), 1e-4);
}

TEST(Encoder, ZeroParametersGiveUniformLattice) {
  EncoderModel m = make_encoder(EncoderConfig{}, 3);
  for (Parameter* p : m.parameters()) p->value.fill(0.0);
  std::mt19937_64 rng(10);
  const LogProbLattice lat = encoder_forward(oracle::random_tensor(rng, 100, 8), m);
  for (double v : lat.values()) EXPECT_NEAR(v, -std::log(13.0), 1e-15);
}

TEST(Encoder, RowsAreLogDistributions) {
  const EncoderModel m = make_encoder(EncoderConfig{}, 4);
  std::mt19937_64 rng(11);
  const LogProbLattice lat = encoder_forward(oracle::random_tensor(rng, 200, 8), m);
  for (std::size_t t = 0; t < lat.rows(); ++t) EXPECT_NEAR(logsumexp(lat.row(t)), 0.0, 1e-10);
}

TEST(Encoder, TapeLogitsMatchInference) {
  const EncoderModel m = make_encoder(small_config(), 5);
  std::mt19937_64 rng(12);
  const Tensor2 x = oracle::random_tensor(rng, 23, 3);
  Tape t;
  const Tensor2 lat = log_softmax_rows(encoder_logits(t, x, m).value());
  EXPECT_LT(max_abs_diff(lat, encoder_forward(x, m)), 1e-13);
}

TEST(Encoder, FullModelGradCheck) {
  EncoderModel m = make_encoder(small_config(), 6);
  std::mt19937_64 rng(13);
  const Tensor2 x = oracle::random_tensor(rng, 30, 3);
  auto ps = m.parameters();
  const std::vector<int> labels{1, 0};
  auto f = [&](Tape& t) { return ctc_loss(encoder_logits(t, x, m), labels, 3); };
  EXPECT_LT(grad_check(f, ps), 1e-4);
}

TEST(Encoder, FrozenFirstLayerCacheGivesSameLoss) {
  EncoderModel m = make_encoder(small_config(), 7);
  m.layers.front().set_frozen(true);
  std::mt19937_64 rng(14);
  const Tensor2 x = oracle::random_tensor(rng, 30, 3);
  const Tensor2 cached = first_layer_forward(x, m);
  Tape a, b;
  ForwardOptions opt;
  opt.first_layer_output = &cached;
  EXPECT_EQ(encoder_logits(a, x, m).value(), encoder_logits(b, x, m, opt).value());
  m.layers.front().set_frozen(false);
  Tape c;
  EXPECT_THROW(encoder_logits(c, x, m, opt), ContractViolation);
}

TEST(Encoder, DropoutOnlyWithRng) {
  const EncoderModel m = make_encoder(small_config(), 8);
  std::mt19937_64 rng(15), drop(16);
  const Tensor2 x = oracle::random_tensor(rng, 20, 3);
  Tape a, b, c;
  ForwardOptions no_rng{0.5, nullptr, nullptr}, with_rng{0.5, &drop, nullptr};
  EXPECT_EQ(encoder_logits(a, x, m, no_rng).value(), encoder_logits(b, x, m).value());
  EXPECT_NE(encoder_logits(c, x, m, with_rng).value(), encoder_logits(b, x, m).value());
}

TEST(Streaming, ChunkedEqualsBatch) {
  std::mt19937_64 rng(17);
  for (const EncoderConfig& cfg : {small_config(), EncoderConfig{}}) {
    const EncoderModel m = make_encoder(cfg, 9);
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t T = std::uniform_int_distribution<std::size_t>(1, 250)(rng);
      const Tensor2 x = oracle::random_tensor(rng, T, cfg.feature_dim);
      const LogProbLattice batch = encoder_forward(x, m);
      const LogProbLattice streamed = stream(x, m, rng, 17);
      ASSERT_TRUE(batch.same_shape(streamed));
      EXPECT_LE(max_abs_diff(batch, streamed), 1e-12);
    }
  }
}

TEST(Streaming, Causality) {
  const EncoderConfig cfg;
  const EncoderModel m = make_encoder(cfg, 10);
  std::mt19937_64 rng(18);
  const std::size_t T = 200;
  const Tensor2 x = oracle::random_tensor(rng, T, 8);
  const LogProbLattice base = encoder_forward(x, m);
  const std::size_t step = frames_per_output_step(cfg);
  for (std::size_t t : {0u, 47u, 48u, 100u, 150u, 198u}) {
    Tensor2 y = x;
    y(t, 3) += 1.0;
    const LogProbLattice p = encoder_forward(y, m);
    // Row k reads input frames up to (k+1)*step-1 (capped by the sequence end).
    for (std::size_t k = 0; k < base.rows(); ++k) {
      const std::size_t last_input = std::min(T - 1, (k + 1) * step - 1);
      if (last_input < t) {
        EXPECT_EQ(std::vector<double>(p.row(k).begin(), p.row(k).end()),
                  std::vector<double>(base.row(k).begin(), base.row(k).end()))
            << "row " << k << " changed by frame " << t;
      }
    }
    bool changed = false;
    for (std::size_t k = t / step; k < base.rows(); ++k) changed |= p.row(k)[0] != base.row(k)[0];
    EXPECT_TRUE(changed);
  }
}

TEST(Streaming, PushAfterCloseThrows) {
  const EncoderModel m = make_encoder(small_config(), 11);
  EncoderState st = EncoderState::start(m);
  encoder_stream_push(Tensor2(4, 3), st, m);
  encoder_stream_close(st, m);
  EXPECT_THROW(encoder_stream_push(Tensor2(1, 3), st, m), ContractViolation);
  EXPECT_THROW(encoder_stream_push(Tensor2(1, 2), st, m), ContractViolation);
}

TEST(Streaming, WrongFeatureDimThrows) {
  const EncoderModel m = make_encoder(small_config(), 12);
  EncoderState st = EncoderState::start(m);
  EXPECT_THROW(encoder_stream_push(Tensor2(1, 5), st, m), DimensionError);
}

TEST(Checkpoint, RoundTripIsExact) {
  EncoderModel m = make_encoder(small_config(), 13);
  m.layers.front().set_frozen(true);
  m.cmvn = CmvnStats{{0.1, 0.2, 0.3}, {1.0, 2.0, 3.0}};
  const std::string bytes = serialize_checkpoint(m);
  const EncoderModel back = parse_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_TRUE(back.layers.front().frozen);
  EXPECT_FALSE(back.layers.front().w_input.trainable);
  EXPECT_EQ(back.config, m.config);
  EXPECT_EQ(back.cmvn, m.cmvn);
}

TEST(Checkpoint, RejectsCorruption) {
  const EncoderModel m = make_encoder(small_config(), 14);
  std::string bytes = serialize_checkpoint(m);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bad_magic), FormatError);
  std::string bad_version = bytes;
  bad_version[8] = 9;
  EXPECT_THROW(parse_checkpoint(bad_version), FormatError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(parse_checkpoint(bytes + "x"), FormatError);
}
