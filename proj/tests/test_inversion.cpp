#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "frami/grad_check.hpp"
#include "frami/inversion.hpp"

using namespace frami;

namespace {

Tensor random_tensor(Rng& rng, const Shape& shape, bool rg = false) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor(shape, std::move(v), rg);
}

Tensor unit_rows(Rng& rng, std::size_t b, std::size_t d) { return normalize_rows(random_tensor(rng, {b, d})); }

ArchSpec toy_arch() { return {"toy", 4, {1, 2}, 3}; }

struct Toy {
  Rng rng;
  ModelBundle teacher;
  ModelBundle student;
  Discriminator head;
  Generator gen;

  explicit Toy(std::uint64_t seed, std::size_t frames = 16)
      : rng(seed),
        teacher(toy_arch(), 3, rng, 5),
        student(ArchSpec{"toy_s", 3, {2}, 3}, 3, rng, 5),
        head(teacher.embedding_dim(), rng, 6, 4),
        gen(frames, rng, 4, 5, 4) {
    teacher.set_trainable(false);
    student.set_trainable(false);
    Rng data(seed + 100);
    for (int i = 0; i < 5; ++i) teacher.forward_logits(random_tensor(data, {6, 5, frames}), {Mode::Train, nullptr});
  }
};

}  // namespace

TEST(ChunkTime, LengthExamples) {
  EXPECT_EQ(chunk_lengths(10, 3, 1), (std::vector<std::size_t>{3, 3, 4}));
  EXPECT_EQ(chunk_lengths(8, 2, 1), (std::vector<std::size_t>{4, 4}));
  EXPECT_THROW(chunk_lengths(15, 2, 8), ContractError);
}

TEST(ChunkTime, PartitionIsBitExact) {
  Rng rng(1);
  for (std::size_t t = 16; t < 80; t += 7)
    for (std::size_t k = 2; k <= t / 8; ++k) {
      Spectrogram x;
      x.mel_bins = 3;
      x.frames = t;
      x.data.resize(3 * t);
      for (auto& v : x.data) v = rng.normal();
      const auto set = chunk_time(x, k);
      ASSERT_EQ(set.size(), k);
      std::vector<double> rebuilt(3 * t);
      std::size_t start = 0;
      for (const auto& c : set.chunks) {
        EXPECT_GE(c.frames, 8u);
        for (std::size_t f = 0; f < 3; ++f)
          for (std::size_t i = 0; i < c.frames; ++i) rebuilt[f * t + start + i] = c.at(f, i);
        start += c.frames;
      }
      EXPECT_EQ(rebuilt, x.data);
    }
}

TEST(Finv, HandExamples) {
  const Tensor a({2}, {1, 0}), b({2}, {0, 1});
  EXPECT_NEAR(finv_term({a, a, a})[0], 1.0, 1e-15);
  EXPECT_NEAR(finv_term({a, b})[0], 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(finv_term({a, a, b})[0], 1.0 / 3.0);
  EXPECT_THROW(finv_term({a}), ContractError);
}

TEST(Finv, BoundedOnRandomUnitVectors) {
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    std::vector<Tensor> e;
    for (int k = 0; k < 4; ++k) e.push_back(unit_rows(rng, 3, 5));
    const Tensor f = finv_term(e);
    for (double v : f.values()) {
      EXPECT_LE(v, 1.0 + 1e-12);
      EXPECT_GE(v, -1.0 - 1e-12);
    }
  }
}

TEST(Finv, TimeConstantSpectrogramThroughTeacherAndHead) {
  Rng rng(3);
  auto teacher = build_model("tiny_t", 4, rng);
  Discriminator head(teacher.embedding_dim(), rng);
  std::vector<double> v(40 * 96);
  for (std::size_t f = 0; f < 40; ++f)
    for (std::size_t t = 0; t < 96; ++t) v[f * 96 + t] = std::sin(0.3 * static_cast<double>(f)) - 2.0;
  const Tensor x({1, 40, 96}, v);
  for (std::size_t k = 2; k <= 6; ++k) {
    std::vector<Tensor> emb;
    for (const auto& c : chunk_batch(x, k)) emb.push_back(embed(head, teacher, c));
    EXPECT_NEAR(finv_term(emb)[0], 1.0, 1e-6) << "K=" << k;
  }
}

TEST(Fic, HandExamples) {
  const Tensor one({1}, {1.0}), zero({1}, {0.0}), neg({1, 1}, {0.0});
  EXPECT_NEAR(fic_from_similarities(one, one, neg, 1.0).item(), -2.0, 1e-12);
  EXPECT_NEAR(fic_from_similarities(one, zero, neg, 1.0).item(), -1.0, 1e-12);
  EXPECT_THROW(fic_from_similarities(one, one, neg, 0.0), ConfigError);
}

TEST(Fic, LargeTemperatureLimit) {
  const Tensor pos({1}, {0.8}), finv({1}, {0.6}), neg({1, 3}, {0.1, -0.2, 0.3});
  const double tau = 1e6;
  EXPECT_NEAR(fic_from_similarities(pos, finv, neg, tau).item(), -(1.4) / tau + std::log(3.0), 1e-6);
  Tensor p({1}, {0.8}, true);
  backward(fic_from_similarities(p, finv, neg, tau));
  EXPECT_NEAR(p.grad()[0], -1.0 / tau, 1e-15);
}

TEST(Fic, MonotoneInPositiveSimilarity) {
  const Tensor finv({2}, {0.2, 0.1}), neg({2, 2}, {0.1, kExcluded, 0.4, 0.3});
  double prev = std::numeric_limits<double>::infinity();
  for (double s = -1.0; s <= 1.0; s += 0.1) {
    const double loss = fic_from_similarities(Tensor({2}, {s, s}), finv, neg, 0.07).item();
    EXPECT_LT(loss, prev);
    prev = loss;
  }
}

TEST(Fic, EmbeddingFormMatchesHandComputation) {
  // one anchor, its positive identical, one bank negative orthogonal, two identical chunks
  FicInputs in;
  in.anchors = Tensor({1, 2}, {1, 0});
  in.positives = Tensor({1, 2}, {1, 0});
  in.chunks = {Tensor({1, 2}, {0, 1}), Tensor({1, 2}, {0, 1})};
  in.bank = Tensor({1, 2}, {0, 1});
  EXPECT_NEAR(fic_loss(in, 1.0).item(), -2.0, 1e-12);
  in.chunks.clear();
  EXPECT_NEAR(fic_loss(in, 1.0).item(), -1.0, 1e-12);
  in.bank.reset();
  EXPECT_THROW(fic_loss(in, 1.0), ContractError);
}

TEST(Fic, StandardFormAddsPositiveToDenominator) {
  const Tensor one({1}, {1.0}), zero({1}, {0.0}), neg({1, 1}, {0.0});
  EXPECT_NEAR(fic_from_similarities(one, zero, neg, 1.0, true).item(), std::log(std::exp(1.0) + 1.0) - 1.0, 1e-12);
}

TEST(Fic, InBatchSelfIsExcluded) {
  // two anchors: each sees only the other as negative
  FicInputs in;
  in.anchors = Tensor({2, 2}, {1, 0, 0, 1});
  in.positives = in.anchors;
  EXPECT_NEAR(fic_loss(in, 1.0).item(), -1.0, 1e-12);
}

TEST(DeepInversion, ClassAndAdversarialExamples) {
  EXPECT_NEAR(cls_loss(Tensor({1, 2}, {0, 0}), {0}).item(), std::log(2.0), 1e-12);
  const Tensor p({1, 2}, {std::log(2.0), 0.0}), q({1, 2}, {0, 0});
  EXPECT_NEAR(adv_loss(p, q, 1.0).item(), -0.0566330122651324, 1e-12);
  EXPECT_EQ(adv_loss(p, p, 1.0).item(), 0.0);
  Rng rng(4);
  for (int i = 0; i < 20; ++i) EXPECT_LE(adv_loss(random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4}), 2.0).item(), 0.0);
}

TEST(DeepInversion, BnLossExamples) {
  auto record = [](double mu, double sd, double rmu, double rsd) {
    return BnRecord{"l", Tensor({1}, {mu}), Tensor({1}, {sd}), {rmu}, {rsd}};
  };
  EXPECT_EQ(bn_loss({record(0.3, 2.0, 0.3, 2.0)}).item(), 0.0);
  EXPECT_NEAR(bn_loss({record(1.0, 1.0, 0.0, 1.0)}).item(), 1.0, 1e-12);
  EXPECT_NEAR(bn_loss({record(1.0, 1.0, 0.0, 1.0), record(0.0, 3.0, 0.0, 2.0)}).item(), 2.0, 1e-12);
  EXPECT_THROW(bn_loss({}), ConfigError);
}

TEST(DeepInversion, BnLossVanishesOnBatchThatBuiltRunningStats) {
  Rng rng(5);
  auto teacher = build_model("tiny_s", 4, rng);
  const Tensor batch = random_tensor(rng, {8, 40, 24});
  for (int i = 0; i < 400; ++i) teacher.forward_logits(batch, {Mode::Train, nullptr});
  std::vector<BnRecord> rec;
  teacher.forward_logits(batch, {Mode::Eval, &rec});
  EXPECT_EQ(rec.size(), 4u);
  EXPECT_LT(bn_loss(rec).item(), 1e-6);
}

TEST(DeepInversion, InvLossWeights) {
  InversionConfig cfg;
  const InvComponents c{Tensor::scalar(2.0), Tensor::scalar(0.5), Tensor::scalar(-0.3)};
  EXPECT_NEAR(inv_loss(c, cfg).item(), 2.2, 1e-12);
  cfg.alpha = cfg.beta = cfg.gamma = 0.0;
  EXPECT_EQ(inv_loss(c, cfg).item(), 0.0);
  cfg.alpha = -1.0;
  EXPECT_THROW(inv_loss(c, cfg), ConfigError);
}

TEST(DeepInversion, DoublingWeightsDoublesLossAndGradients) {
  Tensor bn = Tensor::scalar(0.7, true), cls = Tensor::scalar(1.1, true), adv = Tensor::scalar(-0.2, true);
  InversionConfig cfg;
  cfg.alpha = 0.5;
  cfg.beta = 1.5;
  cfg.gamma = 0.25;
  const double l1 = inv_loss({square(bn), square(cls), mul(adv, adv)}, cfg).item();
  backward(inv_loss({square(bn), square(cls), mul(adv, adv)}, cfg));
  const double g1 = bn.grad()[0], g2 = cls.grad()[0];
  bn.zero_grad();
  cls.zero_grad();
  InversionConfig twice = cfg;
  twice.alpha *= 2;
  twice.beta *= 2;
  twice.gamma *= 2;
  EXPECT_DOUBLE_EQ(inv_loss({square(bn), square(cls), mul(adv, adv)}, twice).item(), 2 * l1);
  backward(inv_loss({square(bn), square(cls), mul(adv, adv)}, twice));
  EXPECT_DOUBLE_EQ(bn.grad()[0], 2 * g1);
  EXPECT_DOUBLE_EQ(cls.grad()[0], 2 * g2);
}

TEST(DeepInversion, InvalidConfig) {
  InversionConfig cfg;
  cfg.k_min = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.tau = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.beta_inv = -0.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Bank, SampleContract) {
  MemoryBank bank;
  Rng rng(6);
  EXPECT_FALSE(bank_sample(bank, 4, rng));
  bank.append(random_tensor(rng, {16, 3, 10}), 1, 0.5, round_robin_targets(16, 4));
  EXPECT_FALSE(bank_sample(bank, 0, rng));
  const auto draw = bank_sample(bank, 16, rng);
  ASSERT_TRUE(draw);
  EXPECT_EQ(draw->shape(), (Shape{16, 3, 10}));
  const auto stored = bank.entries()[0].batch.values();
  for (std::size_t i = 0; i < 16; ++i) {
    bool found = false;
    for (std::size_t j = 0; j < 16 && !found; ++j)
      found = std::equal(stored.begin() + j * 30, stored.begin() + (j + 1) * 30, draw->values().begin() + i * 30);
    EXPECT_TRUE(found);
  }
  Rng a(9), b(9);
  const auto da = bank_sample(bank, 5, a), db = bank_sample(bank, 5, b);
  EXPECT_TRUE(std::equal(da->values().begin(), da->values().end(), db->values().begin()));
}

TEST(Bank, PersistenceRoundTripsBitExactly) {
  const auto dir = std::filesystem::temp_directory_path() / "frami_test_bank";
  std::filesystem::remove_all(dir);
  Rng rng(7);
  MemoryBank bank;
  for (std::size_t e = 1; e <= 3; ++e) bank.append(random_tensor(rng, {4, 5, 12}), e, rng.normal(), {0, 1, 2, 3});
  bank.save(dir);
  const auto loaded = MemoryBank::load(dir);
  ASSERT_EQ(loaded.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& a = bank.entries()[i];
    const auto& b = loaded.entries()[i];
    EXPECT_TRUE(std::equal(a.batch.values().begin(), a.batch.values().end(), b.batch.values().begin()));
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_EQ(a.epoch, b.epoch);
    EXPECT_EQ(a.targets, b.targets);
  }
  auto bytes = read_file(dir / "entry_0001.f32");
  bytes[0] ^= 0x40;
  write_file_atomic(dir / "entry_0001.f32", bytes);
  EXPECT_THROW(MemoryBank::load(dir), IntegrityError);
  std::filesystem::remove_all(dir);
}

TEST(GradCheck, FicLossOnRandomEmbeddings) {
  Rng rng(10);
  for (int inst = 0; inst < 10; ++inst) {
    Tensor a = random_tensor(rng, {3, 4}, true), p = random_tensor(rng, {3, 4}, true);
    Tensor c1 = random_tensor(rng, {3, 4}, true), c2 = random_tensor(rng, {3, 4}, true);
    Tensor m = random_tensor(rng, {2, 4}, true);
    auto build = [&] {
      FicInputs in{normalize_rows(a), normalize_rows(p), {normalize_rows(c1), normalize_rows(c2)}, normalize_rows(m)};
      return fic_loss(in, 0.5, inst % 2 == 1);
    };
    const auto r = grad_check(build, {{"a", a}, {"p", p}, {"c1", c1}, {"c2", c2}, {"m", m}});
    EXPECT_TRUE(r.passed(1e-5)) << r.worst << " " << r.max_rel_error;
  }
}

TEST(GradCheck, InvLossThroughToyTeacher) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Toy toy(20 + seed);
    Tensor x = random_tensor(toy.rng, {2, 5, 16}, true);
    InversionConfig cfg;
    auto build = [&] {
      std::vector<BnRecord> rec;
      const Tensor logits = toy.teacher.forward_logits(x, {Mode::Eval, &rec});
      return inv_loss({bn_loss(rec), cls_loss(logits, {0, 1}), adv_loss(logits, toy.student.forward_logits(x), 1.0)},
                      cfg);
    };
    const auto r = grad_check(build, {{"x", x}});
    EXPECT_TRUE(r.passed(1e-4)) << r.worst << " " << r.max_rel_error;
  }
}

TEST(GradCheck, TotalObjectiveOnTwoSampleToy) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Toy toy(40 + seed);
    MemoryBank bank;
    bank.append(random_tensor(toy.rng, {2, 5, 16}), 1, 0.0, {0, 1});
    InversionConfig cfg;
    cfg.batch = 2;
    cfg.tau = 0.5;
    const Tensor z = toy.gen.sample_latent(2, toy.rng);
    auto build = [&] {
      Rng local(seed);
      return inversion_objective(toy.gen.generate(z), toy.teacher, &toy.student, toy.head, bank, {0, 1}, cfg, local)
          .total;
    };
    auto params = toy.gen.parameters();
    for (auto& p : toy.head.parameters()) params.push_back(p);
    const auto r = grad_check(build, params);
    EXPECT_TRUE(r.passed(1e-4)) << r.worst << " " << r.max_rel_error;
  }
}

TEST(GradFlow, GeneratorReceivesNonzeroGradient) {
  Toy toy(60);
  MemoryBank bank;
  InversionConfig cfg;
  cfg.batch = 4;
  const auto loss = inversion_objective(toy.gen.generate(toy.gen.sample_latent(4, toy.rng)), toy.teacher,
                                        &toy.student, toy.head, bank, {0, 1, 2, 0}, cfg, toy.rng);
  backward(loss.total);
  for (const auto& p : toy.gen.parameters()) {
    if (p.name.find("out_bn") != std::string::npos || p.name.find(".bias") != std::string::npos) continue;
    double norm = 0.0;
    for (double g : p.tensor.grad()) norm += g * g;
    EXPECT_GT(norm, 0.0) << p.name;
  }
}

TEST(Ablation, TdModeEqualsFinvForcedToZero) {
  Toy toy(70);
  MemoryBank bank;
  bank.append(random_tensor(toy.rng, {3, 5, 16}), 1, 0.0, {0, 1, 2});
  const Tensor x = toy.gen.generate(toy.gen.sample_latent(3, toy.rng)).detach();
  InversionConfig td;
  td.batch = 3;
  td.mode = AudioMode::TD;
  InversionConfig no_finv = td;
  no_finv.use_finv = false;
  Rng a(5), b(5);
  const double l_td = inversion_objective(x, toy.teacher, &toy.student, toy.head, bank, {0, 1, 2}, td, a).fic.item();
  const double l_zero =
      inversion_objective(x, toy.teacher, &toy.student, toy.head, bank, {0, 1, 2}, no_finv, b).fic.item();
  EXPECT_EQ(l_td, l_zero);
}

TEST(Epoch, TraceBankAndBestBatch) {
  Toy toy(80, 24);
  MemoryBank bank;
  InversionConfig cfg;
  cfg.steps = 6;
  cfg.batch = 6;
  Adam head_opt(toy.head.parameters(), {.lr = 1e-3});
  for (std::size_t e = 1; e <= 3; ++e) {
    const auto r = inversion_epoch(toy.teacher, &toy.student, toy.head, head_opt, bank, 24, cfg, toy.rng, e);
    EXPECT_EQ(r.trace.size(), cfg.steps);
    EXPECT_EQ(r.best_loss, *std::min_element(r.trace.begin(), r.trace.end()));
    EXPECT_EQ(r.best_loss, r.trace[r.best_step]);
    EXPECT_EQ(r.best_batch.shape(), (Shape{6, 5, 24}));
    bank.append(r.best_batch, e, r.best_loss, r.targets);
    EXPECT_EQ(bank.size(), e);
  }
  for (const auto& p : toy.teacher.parameters()) EXPECT_FALSE(p.tensor.requires_grad());
}

TEST(Epoch, TeacherStateUntouched) {
  Toy toy(90, 24);
  const auto before = toy.teacher.batch_norms()[1]->running_mean();
  const auto w_before = std::vector<double>(toy.teacher.parameters()[2].tensor.values().begin(),
                                            toy.teacher.parameters()[2].tensor.values().end());
  MemoryBank bank;
  InversionConfig cfg;
  cfg.steps = 3;
  cfg.batch = 4;
  Adam head_opt(toy.head.parameters());
  inversion_epoch(toy.teacher, &toy.student, toy.head, head_opt, bank, 24, cfg, toy.rng);
  EXPECT_EQ(before, toy.teacher.batch_norms()[1]->running_mean());
  EXPECT_TRUE(std::equal(w_before.begin(), w_before.end(), toy.teacher.parameters()[2].tensor.values().begin()));
}
