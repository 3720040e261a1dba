#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "episodic/synth.hpp"
#include "episodic/trainer.hpp"

using namespace episodic;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.d_embed = 8;
  c.conv_widths = {2, 3};
  c.filters_per_conv = 8;
  c.attn_layers = 1;
  c.attn_heads = 2;
  c.d_hidden = 8;
  c.output_dim = 8;
  c.dropout_rate = 0.1;
  return c;
}

// The default lr is sized for the full model; tiny models diverge at 0.1 with scale 64.
TrainConfig tiny_train() {
  TrainConfig t;
  t.lr_initial = 0.01;
  return t;
}

struct Fixture {
  Corpus corpus;
  Vocabulary vocab;
  std::vector<std::string> users;
};

Fixture make_fixture(SynthConfig scfg, std::size_t vocab_size = 300, std::size_t text_len = 6) {
  Fixture f;
  f.corpus = synth_corpus(scfg);
  TokenizerConfig tc;
  tc.vocab_size = vocab_size;
  tc.text_len = text_len;
  tc.num_contexts = 20;
  f.vocab = learn_vocabulary(f.corpus, tc);
  for (const auto& [id, h] : f.corpus) f.users.push_back(id);
  return f;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[(v.size() - 1) / 2];
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("episodic_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(ScheduleTest, PaperDrops) {
  TrainConfig c;
  c.total_iters = 200000;
  c.lr_drops = std::vector<std::size_t>{100000, 150000};
  EXPECT_DOUBLE_EQ(lr_at(c, 0), 0.1);
  EXPECT_DOUBLE_EQ(lr_at(c, 99999), 0.1);
  EXPECT_DOUBLE_EQ(lr_at(c, 100000), 0.01);
  EXPECT_DOUBLE_EQ(lr_at(c, 120000), 0.01);
  EXPECT_DOUBLE_EQ(lr_at(c, 180000), 0.001);
  for (std::size_t it = 1; it < 200000; it += 997) EXPECT_LE(lr_at(c, it), lr_at(c, it - 1));
}

TEST(ScheduleTest, DefaultsAndValidation) {
  TrainConfig c;
  c.total_iters = 1000;
  EXPECT_EQ(c.drops(), (std::vector<std::size_t>{500, 750}));
  c.lr_drops = std::vector<std::size_t>{};
  EXPECT_DOUBLE_EQ(lr_at(c, 0), lr_at(c, 999));
  c.lr_drops = std::vector<std::size_t>{600, 500};
  EXPECT_THROW(c.validate(), ConfigError);
  c.lr_drops = std::vector<std::size_t>{1000};
  EXPECT_THROW(c.validate(), ConfigError);
  c.lr_drops.reset();
  c.warmup_iters = 10;
  EXPECT_DOUBLE_EQ(lr_at(c, 0), 0.01);
  EXPECT_DOUBLE_EQ(lr_at(c, 9), 0.1);
  EXPECT_THROW(train_config_from_json({{"total_iters", 10}, {"lr", 1}}), ConfigError);
  const TrainConfig back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(SgdTest, HandExamples) {
  auto run = [](Tensor p, Tensor v, const std::vector<Tensor>& gs, double lr, double mu) {
    for (const auto& g : gs) {
      std::vector<Tensor*> ps{&p}, vs{&v};
      std::vector<const Tensor*> gp{&g};
      sgd_momentum_step(ps, gp, vs, lr, mu);
    }
    return std::make_pair(p, v);
  };
  const Tensor p0 = Tensor::vector({1.5, -2.0});
  auto [p1, v1] = run(p0, Tensor(Shape{2}, 0.0), {p0}, 1.0, 0.0);
  EXPECT_EQ(p1, Tensor(Shape{2}, 0.0));

  const Tensor one = Tensor::vector({1.0});
  auto [p2, v2] = run(Tensor::vector({0.0}), Tensor(Shape{1}, 0.0), {one, one}, 0.1, 0.9);
  EXPECT_NEAR(-p2[0], 0.29, 1e-15);

  auto [p3, v3] = run(p0, Tensor::vector({1.0, 2.0}), {Tensor(Shape{2}, 0.0)}, 0.0, 0.9);
  EXPECT_EQ(p3, p0);
  EXPECT_DOUBLE_EQ(v3[1], 1.8);
}

TEST(SgdTest, NonFiniteGradientAbortsStep) {
  Tensor p = Tensor::vector({1.0, 2.0}), v = Tensor::vector({0.5, 0.5});
  Tensor q = Tensor::vector({3.0}), w = Tensor::vector({0.0});
  const Tensor g1 = Tensor::vector({1.0, 1.0}), g2 = Tensor::vector({std::nan("")});
  std::vector<Tensor*> ps{&p, &q}, vs{&v, &w};
  std::vector<const Tensor*> gs{&g1, &g2};
  EXPECT_THROW(sgd_momentum_step(ps, gs, vs, 0.1, 0.9), TrainingError);
  EXPECT_EQ(p, Tensor::vector({1.0, 2.0}));
  EXPECT_EQ(v, Tensor::vector({0.5, 0.5}));
}

TEST(TrainTest, SeparableAuthorsReachLowLoss) {
  SynthConfig s;
  s.num_authors = 2;
  s.actions_per_author = 200;
  s.signature_strength = 1.0;
  s.disjoint_signatures = true;
  const Fixture f = make_fixture(s);
  TrainConfig tc = tiny_train();
  tc.total_iters = 500;
  tc.batch_size = 16;
  tc.episode_len = 4;
  Model m = make_model(f.vocab, tiny_model(), tc, f.users);
  Trainer t(m, f.corpus);
  const TrainLog log = t.run();
  ASSERT_EQ(log.losses.size(), 500u);
  const double tail = std::accumulate(log.losses.end() - 20, log.losses.end(), 0.0) / 20.0;
  EXPECT_LT(tail, 0.1 * std::log(2.0));
  EXPECT_EQ(log.records.size(), 5u);
  EXPECT_EQ(log.records.back().iter, 500u);
}

TEST(TrainTest, LossDropsOnSignalCorpus) {
  SynthConfig s;
  s.num_authors = 8;
  s.actions_per_author = 200;
  s.signature_strength = 0.5;
  const Fixture f = make_fixture(s);
  TrainConfig tc = tiny_train();
  tc.total_iters = 1000;
  tc.batch_size = 16;
  tc.episode_len = 8;
  for (LossKind loss : {LossKind::am, LossKind::sm}) {
    tc.head.loss = loss;
    Model m = make_model(f.vocab, tiny_model(), tc, f.users);
    const TrainLog log = Trainer(m, f.corpus).run();
    const std::vector<double> head(log.losses.begin(), log.losses.begin() + 500);
    const std::vector<double> tail(log.losses.end() - 500, log.losses.end());
    EXPECT_GT(median(head), median(tail)) << to_string(loss);
  }
}

TEST(TrainTest, NoSignalGivesChanceAccuracy) {
  SynthConfig s;
  s.num_authors = 4;
  s.actions_per_author = 3000;
  s.signature_strength = 0.0;
  const Fixture f = make_fixture(s);
  TrainConfig tc = tiny_train();
  tc.total_iters = 1500;
  tc.batch_size = 8;
  tc.episode_len = 4;
  Model m = make_model(f.vocab, tiny_model(), tc, f.users);
  const TrainLog log = Trainer(m, f.corpus).run();
  double hits = 0.0;
  for (std::size_t i = 500; i < 1500; ++i) hits += log.accuracy[i] * 8.0;
  const double n = 8000.0, p = 0.25;
  EXPECT_LE(std::abs(hits - n * p), 3.0 * std::sqrt(n * p * (1 - p))) << hits / n;
}

TEST(TrainTest, DeterministicForFixedSeed) {
  SynthConfig s;
  s.num_authors = 3;
  s.actions_per_author = 60;
  const Fixture f = make_fixture(s);
  TrainConfig tc = tiny_train();
  tc.total_iters = 120;
  tc.batch_size = 6;
  tc.episode_len = 4;
  tc.log_every = 50;
  std::ostringstream la, lb;
  Model a = make_model(f.vocab, tiny_model(), tc, f.users);
  Model b = make_model(f.vocab, tiny_model(), tc, f.users);
  Trainer(a, f.corpus).run(&la);
  Trainer(b, f.corpus).run(&lb);
  EXPECT_EQ(la.str(), lb.str());
  EXPECT_EQ(serialize_params(a), serialize_params(b));
  const std::string text = la.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);  // 50, 100 and the final step
  tc.seed = 2;
  Model c = make_model(f.vocab, tiny_model(), tc, f.users);
  Trainer(c, f.corpus).run();
  EXPECT_NE(serialize_params(a), serialize_params(c));
}

TEST(TrainTest, CopiedModelIsIndependent) {
  SynthConfig s;
  s.num_authors = 2;
  s.actions_per_author = 40;
  const Fixture f = make_fixture(s);
  TrainConfig tc = tiny_train();
  tc.total_iters = 5;
  tc.batch_size = 4;
  tc.episode_len = 4;
  Model a = make_model(f.vocab, tiny_model(), tc, f.users);
  const Model snapshot = a;
  Trainer(a, f.corpus).run();
  EXPECT_NE(serialize_params(a), serialize_params(snapshot));
  EXPECT_EQ(snapshot.iteration, 0u);
}

TEST(TrainTest, MissingUserRejected) {
  SynthConfig s;
  s.num_authors = 2;
  s.actions_per_author = 20;
  const Fixture f = make_fixture(s);
  TrainConfig tc = tiny_train();
  tc.total_iters = 5;
  Model m = make_model(f.vocab, tiny_model(), tc, {"u0000", "nobody"});
  EXPECT_THROW(Trainer(m, f.corpus), DataError);
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    SynthConfig s;
    s.num_authors = 3;
    s.actions_per_author = 80;
    fixture = make_fixture(s);
    TrainConfig tc = tiny_train();
    tc.total_iters = 60;
    tc.batch_size = 6;
    tc.episode_len = 4;
    model.emplace(make_model(fixture.vocab, tiny_model(), tc, fixture.users));
    Trainer(*model, fixture.corpus).run();
    dir = temp_dir("ckpt");
  }
  void TearDown() override { fs::remove_all(dir); }

  std::vector<std::vector<Action>> probe_episodes() const {
    std::vector<std::vector<Action>> eps;
    for (const auto& [id, h] : fixture.corpus) {
      eps.emplace_back(h.actions.begin(), h.actions.begin() + 4);
      eps.emplace_back(h.actions.end() - 4, h.actions.end());
    }
    return eps;
  }

  Fixture fixture;
  std::optional<Model> model;
  fs::path dir;
};

TEST_F(CheckpointTest, RoundTripIsByteIdenticalAndEmbeddingsClose) {
  save_checkpoint(*model, dir);
  const Model loaded = load_checkpoint(dir);
  const fs::path again = temp_dir("ckpt_again");
  save_checkpoint(loaded, again);
  for (const char* file : {"manifest.json", "params.bin", "vocab.json"}) {
    EXPECT_EQ(detail::read_file(dir / file), detail::read_file(again / file)) << file;
  }
  fs::remove_all(again);

  const auto eps = probe_episodes();
  const auto za = model->embed(eps), zb = loaded.embed(eps);
  double worst = 0.0;
  for (std::size_t i = 0; i < za.size(); ++i) worst = std::max(worst, max_abs_diff(za[i], zb[i]));
  EXPECT_LE(worst, 1e-6);
  EXPECT_EQ(loaded.iteration, 60u);
  EXPECT_EQ(loaded.training_users, model->training_users);
  EXPECT_EQ(loaded.metric(), Metric::cosine);
}

TEST_F(CheckpointTest, TruncatedBlobRefused) {
  save_checkpoint(*model, dir);
  const std::string blob = detail::read_file(dir / "params.bin");
  detail::write_file(dir / "params.bin", blob.substr(0, blob.size() - 7));
  EXPECT_THROW(load_checkpoint(dir), DataError);
  detail::write_file(dir / "params.bin", "NOTMAGIC" + blob.substr(8));
  EXPECT_THROW(load_checkpoint(dir), DataError);
}

TEST_F(CheckpointTest, ShapeAndVersionMismatchRefused) {
  save_checkpoint(*model, dir);
  auto man = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  auto changed = man;
  changed["model"]["output_dim"] = 6;
  detail::write_file(dir / "manifest.json", changed.dump());
  EXPECT_THROW(load_checkpoint(dir), DataError);
  changed = man;
  changed["format_version"] = 99;
  detail::write_file(dir / "manifest.json", changed.dump());
  EXPECT_THROW(load_checkpoint(dir), DataError);
  EXPECT_THROW(load_checkpoint(dir / "does_not_exist"), std::runtime_error);
}

TEST_F(CheckpointTest, LossKindSelectsMetric) {
  TrainConfig tc = model->train;
  tc.head.loss = LossKind::sm;
  Model sm = make_model(fixture.vocab, tiny_model(), tc, fixture.users);
  save_checkpoint(sm, dir);
  EXPECT_EQ(load_checkpoint(dir).metric(), Metric::euclidean);
  const auto man = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  EXPECT_EQ(man.at("metric"), "euclidean");
}
