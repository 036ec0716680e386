#include <gtest/gtest.h>

#include <filesystem>

#include "frami/grad_check.hpp"
#include "frami/nets.hpp"

using namespace frami;

namespace {

Tensor random_input(Rng& rng, std::size_t b, std::size_t f, std::size_t t, double scale = 1.0) {
  std::vector<double> v(b * f * t);
  for (auto& x : v) x = scale * rng.normal();
  return Tensor({b, f, t}, std::move(v));
}

std::vector<double> copy_values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST(Build, TeacherShapes) {
  Rng rng(1);
  auto teacher = build_model("tiny_t", 4, rng);
  Rng in(2);
  const Tensor h = teacher.frame_level(random_input(in, 1, 40, 198));
  EXPECT_EQ(h.dim(0), 1u);
  EXPECT_EQ(h.dim(1), 64u);
  // strides 1,2,1,2: 198 -> 198 -> 99 -> 99 -> 50
  EXPECT_EQ(h.dim(2), 50u);
  EXPECT_EQ(teacher.embedding_dim(), 128u);
  EXPECT_EQ(teacher.forward_logits(random_input(in, 3, 40, 198)).shape(), (Shape{3, 4}));
}

TEST(Build, StudentNarrowerThanTeacher) {
  Rng rng(1);
  auto t = build_model("tiny_t", 4, rng);
  auto s = build_model("tiny_s", 4, rng);
  EXPECT_GT(t.frame_dim(), s.frame_dim());
  EXPECT_NE(t.output_frames(198), s.output_frames(198));
}

TEST(Build, UnknownArchAndSameSeed) {
  Rng rng(1);
  EXPECT_THROW(build_model("resnet", 4, rng), ConfigError);
  Rng a(7), b(7);
  const auto pa = build_model("tiny_s", 3, a).parameters();
  const auto pb = build_model("tiny_s", 3, b).parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(copy_values(pa[i].tensor), copy_values(pb[i].tensor));
}

TEST(FrameLevel, ZeroInputFiniteAndReproducible) {
  Rng rng(3);
  auto m = build_model("tiny_t", 4, rng);
  const Tensor zero = Tensor::zeros({2, 40, 64});
  const auto a = copy_values(m.frame_level(zero));
  const auto b = copy_values(m.frame_level(zero));
  EXPECT_EQ(a, b);
  for (double v : a) EXPECT_TRUE(std::isfinite(v));
}

TEST(FrameLevel, RepeatedItemGivesIdenticalOutputs) {
  Rng rng(3);
  auto m = build_model("tiny_t", 4, rng);
  Rng in(4);
  const Tensor one = random_input(in, 1, 40, 40);
  const Tensor two = concat({one, one}, 0);
  const Tensor h = m.frame_level(two);
  const std::size_t half = h.size() / 2;
  for (std::size_t i = 0; i < half; ++i) EXPECT_EQ(h[i], h[half + i]);
}

TEST(FrameLevel, StrideArithmetic) {
  Rng rng(3);
  auto m = build_model("tiny_t", 4, rng);
  EXPECT_EQ(m.output_frames(200), 50u);
  EXPECT_EQ(m.output_frames(100), 25u);
  EXPECT_EQ(m.frame_level(Tensor::zeros({1, 40, 100})).dim(2), 25u);
  EXPECT_THROW(m.frame_level(Tensor::zeros({1, 39, 100})), ShapeError);
  EXPECT_THROW(m.frame_level(Tensor::zeros({1, 40, 2})), ShapeError);
}

TEST(FrameLevel, TimeConstantInputGivesTimeConstantFeatures) {
  Rng rng(5);
  auto m = build_model("tiny_t", 4, rng);
  std::vector<double> v(40 * 48);
  for (std::size_t f = 0; f < 40; ++f)
    for (std::size_t t = 0; t < 48; ++t) v[f * 48 + t] = -3.0 + 0.1 * static_cast<double>(f);
  const Tensor h = m.frame_level(Tensor({1, 40, 48}, v));
  const std::size_t tt = h.dim(2);
  for (std::size_t c = 0; c < h.dim(1); ++c)
    for (std::size_t t = 1; t < tt; ++t) EXPECT_NEAR(h[c * tt + t], h[c * tt], 1e-12);
}

TEST(StatsPool, Examples) {
  const Tensor pooled = stats_pool(Tensor({1, 1, 2}, {1, 3}));
  EXPECT_NEAR(pooled[0], 2.0, 1e-12);
  EXPECT_NEAR(pooled[1], 1.0, 1e-12);

  const Tensor flat = stats_pool(Tensor::full({2, 3, 5}, 1.5));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_EQ(flat[b * 6 + c], 1.5);
      EXPECT_EQ(flat[b * 6 + 3 + c], 0.0);
    }
  EXPECT_THROW(stats_pool(Tensor::zeros({1, 2, 1})), DomainError);
}

TEST(StatsPool, PermutationInvariant) {
  Rng rng(8);
  const Tensor h = random_input(rng, 2, 3, 7);
  std::vector<std::vector<std::size_t>> perm(2, {6, 2, 4, 0, 1, 5, 3});
  const Tensor a = stats_pool(h);
  const Tensor b = stats_pool(gather_last(h, perm));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(StatsPool, FiniteGradientAtZeroVariance) {
  Tensor h = Tensor::full({1, 2, 4}, 0.5, true);
  backward(sum(stats_pool(h)));
  for (double g : h.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(Logits, WidthDeterminismAndSoftmax) {
  Rng rng(9);
  auto m = build_model("tiny_s", 4, rng);
  Rng in(10);
  const Tensor x = random_input(in, 3, 40, 32);
  const Tensor a = m.forward_logits(x);
  const Tensor b = m.forward_logits(x);
  EXPECT_EQ(a.dim(1), 4u);
  EXPECT_EQ(copy_values(a), copy_values(b));
  const Tensor p = softmax(a);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_NEAR(p[4 * r] + p[4 * r + 1] + p[4 * r + 2] + p[4 * r + 3], 1.0, 1e-9);
}

TEST(BatchNormLayer, TrainUpdatesRunningStatsEvalDoesNot) {
  BatchNorm bn("bn", 2);
  const Tensor x({2, 2, 1, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  bn.forward(x, {Mode::Eval, nullptr});
  EXPECT_EQ(bn.running_mean(), (std::vector<double>{0.0, 0.0}));
  bn.forward(x, {Mode::Train, nullptr});
  // channel 0 holds {1,2,5,6}: mean 3.5, population var 4.25
  EXPECT_NEAR(bn.running_mean()[0], 0.35, 1e-12);
  EXPECT_NEAR(bn.running_var()[0], 0.9 + 0.425, 1e-12);
}

TEST(BatchNormLayer, RecordsBatchAndRunningStatistics) {
  BatchNorm bn("bn", 2);
  std::vector<BnRecord> rec;
  const Tensor x({2, 2, 1, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  bn.forward(x, {Mode::Eval, &rec});
  ASSERT_EQ(rec.size(), 1u);
  EXPECT_NEAR(rec[0].batch_mean[0], 3.5, 1e-12);
  EXPECT_NEAR(rec[0].batch_std[0], std::sqrt(4.25 + BatchNorm::kEps), 1e-12);
  EXPECT_NEAR(rec[0].running_std[0], std::sqrt(1.0 + BatchNorm::kEps), 1e-12);
  EXPECT_EQ(bn.running_mean()[0], 0.0);
}

TEST(Generator, ShapeAndDeterminism) {
  Rng rng(11);
  Generator g(198, rng);
  Rng zr(12);
  const Tensor z = g.sample_latent(16, zr);
  const Tensor a = g.generate(z);
  EXPECT_EQ(a.shape(), (Shape{16, 40, 198}));
  EXPECT_EQ(copy_values(a), copy_values(g.generate(z)));
  EXPECT_THROW(g.generate(Tensor::zeros({2, 63})), ShapeError);
}

TEST(Generator, OutputStatisticsFollowTargets) {
  Rng rng(13);
  Generator g(50, rng);
  std::vector<double> mean(40), sd(40);
  for (std::size_t i = 0; i < 40; ++i) {
    mean[i] = -5.0 + 0.1 * static_cast<double>(i);
    sd[i] = 0.5 + 0.05 * static_cast<double>(i);
  }
  g.match_output_stats(mean, sd);
  Rng zr(14);
  const Tensor x = g.generate(g.sample_latent(8, zr));
  const Tensor mu = channel_mean(x);
  const Tensor s = channel_std(x, 0.0);
  for (std::size_t i = 0; i < 40; ++i) {
    EXPECT_NEAR(mu[i], mean[i], 1e-9);
    EXPECT_NEAR(s[i], sd[i], 1e-3);
  }
}

TEST(Generator, GradientPassesFiniteDifferences) {
  Rng rng(15);
  Generator g(10, rng, 4, 3, 4);
  Rng zr(16);
  const Tensor z = g.sample_latent(3, zr);
  Rng wr(17);
  const Tensor w = random_input(wr, 3, 3, 10);
  const auto report = grad_check([&] { return sum(mul(g.generate(z), w)); }, g.parameters());
  EXPECT_TRUE(report.passed(1e-4)) << report.worst << " " << report.max_rel_error;
}

TEST(Embed, UnitNormAndDeterministic) {
  Rng rng(18);
  auto teacher = build_model("tiny_t", 4, rng);
  Discriminator head(teacher.embedding_dim(), rng);
  Rng in(19);
  const Tensor x = random_input(in, 2, 40, 60);
  const Tensor e = embed(head, teacher, x);
  EXPECT_EQ(e.shape(), (Shape{2, 128}));
  for (std::size_t r = 0; r < 2; ++r) {
    double n = 0.0;
    for (std::size_t j = 0; j < 128; ++j) n += e[r * 128 + j] * e[r * 128 + j];
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-9);
  }
  EXPECT_EQ(copy_values(e), copy_values(embed(head, teacher, x)));
  EXPECT_EQ(embed(head, teacher, slice(x, 2, 0, 23)).dim(1), 128u);
}

TEST(Checkpoint, RoundTripAndIntegrity) {
  const auto dir = std::filesystem::temp_directory_path() / "frami_test_ckpt";
  std::filesystem::create_directories(dir);
  Rng rng(20);
  auto m = build_model("tiny_s", 3, rng);
  Rng in(21);
  m.forward_logits(random_input(in, 4, 40, 30), {Mode::Train, nullptr});
  save_checkpoint(m, dir / "model");
  auto loaded = load_checkpoint(dir / "model");
  const Tensor x = random_input(in, 2, 40, 30);
  const Tensor a = m.forward_logits(x);
  const Tensor b = loaded.forward_logits(x);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-4);
  EXPECT_EQ(m.batch_norms()[1]->running_var(), loaded.batch_norms()[1]->running_var());

  save_checkpoint(loaded, dir / "again");
  EXPECT_EQ(read_file(dir / "model.bin"), read_file(dir / "again.bin"));

  auto bytes = read_file(dir / "model.bin");
  bytes[5] ^= 1;
  write_file_atomic(dir / "model.bin", bytes);
  EXPECT_THROW(load_checkpoint(dir / "model"), IntegrityError);
  std::filesystem::remove_all(dir);
}
