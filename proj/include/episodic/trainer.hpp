#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "episodic/corpus.hpp"
#include "episodic/encoder.hpp"
#include "episodic/objectives.hpp"
#include "episodic/tokenizer.hpp"

namespace episodic {

/// Raised when a training step cannot proceed (non-finite loss or gradient).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t total_iters = 20000;
  std::size_t batch_size = 64;
  std::size_t episode_len = 16;
  double lr_initial = 0.1;
  std::optional<std::vector<std::size_t>> lr_drops;  // unset: 50% and 75% of total_iters
  double lr_drop_factor = 10.0;
  std::size_t warmup_iters = 0;  // linear ramp from lr/warmup to lr
  double momentum = 0.9;
  double weight_decay = 0.0;
  double clip_norm = 0.0;  // 0 disables
  HeadConfig head;
  std::uint64_t seed = 1;
  std::size_t log_every = 100;

  std::vector<std::size_t> drops() const {
    if (lr_drops) return *lr_drops;
    return {total_iters / 2, total_iters * 3 / 4};
  }

  void validate() const {
    if (total_iters == 0) throw ConfigError("train.total_iters must be >= 1");
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (episode_len == 0) throw ConfigError("train.episode_len must be >= 1");
    if (!(lr_initial > 0.0)) throw ConfigError("train.lr_initial must be > 0");
    if (!(lr_drop_factor >= 1.0)) throw ConfigError("train.lr_drop_factor must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    if (!(clip_norm >= 0.0)) throw ConfigError("train.clip_norm must be >= 0");
    if (log_every == 0) throw ConfigError("train.log_every must be >= 1");
    const auto d = drops();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d[i] >= total_iters || (i > 0 && d[i] <= d[i - 1])) {
        throw ConfigError("train.lr_drops must be strictly increasing and below total_iters");
      }
    }
    head.validate();
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"total_iters", c.total_iters},   {"batch_size", c.batch_size},
          {"episode_len", c.episode_len},   {"lr_initial", c.lr_initial},
          {"lr_drops", c.drops()},          {"lr_drop_factor", c.lr_drop_factor},
          {"warmup_iters", c.warmup_iters}, {"momentum", c.momentum},
          {"weight_decay", c.weight_decay}, {"clip_norm", c.clip_norm},
          {"loss", to_string(c.head.loss)}, {"margin", c.head.margin},
          {"scale", c.head.scale},          {"seed", c.seed},
          {"log_every", c.log_every}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  StrictObject o(j, "train");
  o.read("total_iters", c.total_iters);
  o.read("batch_size", c.batch_size);
  o.read("episode_len", c.episode_len);
  o.read("lr_initial", c.lr_initial);
  if (o.has("lr_drops")) {
    std::vector<std::size_t> d;
    o.read("lr_drops", d);
    c.lr_drops = d;
  }
  o.read("lr_drop_factor", c.lr_drop_factor);
  o.read("warmup_iters", c.warmup_iters);
  o.read("momentum", c.momentum);
  o.read("weight_decay", c.weight_decay);
  o.read("clip_norm", c.clip_norm);
  if (o.has("loss")) {
    std::string s;
    o.read("loss", s);
    c.head.loss = parse_loss(s);
  }
  o.read("margin", c.head.margin);
  o.read("scale", c.head.scale);
  o.read("seed", c.seed);
  o.read("log_every", c.log_every);
  o.finish();
  c.validate();
  return c;
}

/// Piecewise-constant schedule: lr_initial divided by the drop factor once
/// per drop point at or before `iter`, after an optional linear warmup.
inline double lr_at(const TrainConfig& cfg, std::size_t iter) {
  double lr = cfg.lr_initial;
  for (std::size_t d : cfg.drops()) {
    if (iter >= d) lr /= cfg.lr_drop_factor;
  }
  if (iter < cfg.warmup_iters) lr *= static_cast<double>(iter + 1) / static_cast<double>(cfg.warmup_iters);
  return lr;
}

/// Classic momentum: v = momentum * v + g; p -= lr * v. Leaves everything
/// untouched and throws if any gradient entry is non-finite.
inline void sgd_momentum_step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                              std::vector<Tensor*>& velocity, double lr, double momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ShapeError("sgd_momentum_step: parameter, gradient and velocity counts differ");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k]->shape() != params[k]->shape() || velocity[k]->shape() != params[k]->shape()) {
      throw ShapeError("sgd_momentum_step: shape mismatch at tensor " + std::to_string(k) + ": " +
                       shape_str(params[k]->shape()) + " vs " + shape_str(grads[k]->shape()));
    }
    if (!grads[k]->all_finite()) {
      throw TrainingError("sgd_momentum_step: non-finite gradient in tensor " + std::to_string(k));
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    Tensor& v = *velocity[k];
    const Tensor& g = *grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = momentum * v[i] + g[i];
      p[i] -= lr * v[i];
    }
  }
}

/// Everything a checkpoint holds.
struct Model {
  Vocabulary vocab;
  Encoder encoder;
  Head head;
  TrainConfig train;
  std::vector<std::string> training_users;  // label order
  std::map<std::string, Tensor> velocity;
  std::size_t iteration = 0;

  Metric metric() const { return default_metric(train.head.loss); }

  /// Encoder and head parameters in a fixed order.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& p : encoder.params().items()) out.push_back(&p);
    for (auto& p : head.params().items()) out.push_back(&p);
    return out;
  }
  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out;
    for (const auto& p : encoder.params().items()) out.push_back(&p);
    for (const auto& p : head.params().items()) out.push_back(&p);
    return out;
  }

  /// Eval-mode embeddings of raw-action episodes.
  std::vector<Tensor> embed(const std::vector<std::vector<Action>>& episodes) const {
    std::vector<std::vector<EncodedAction>> enc;
    enc.reserve(episodes.size());
    for (const auto& e : episodes) enc.push_back(vocab.encode(e));
    return encoder.embed(enc);
  }
};

/// Fresh model with seeded initialization. Stream 1 initializes the
/// encoder, stream 2 the head; training uses streams 3 (batches) and 4
/// (dropout).
inline Model make_model(Vocabulary vocab, const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                        std::vector<std::string> training_users) {
  train_cfg.validate();
  const Rng root(train_cfg.seed);
  Encoder enc(model_cfg, vocab.subwords.size(), vocab.contexts.size(), vocab.text_len, root.split(1).next_u64());
  Head head(train_cfg.head, training_users.size(), model_cfg.output_dim, root.split(2).next_u64());
  Model m{std::move(vocab), std::move(enc), std::move(head), train_cfg, std::move(training_users), {}, 0};
  for (const Parameter* p : m.parameters()) m.velocity.emplace(p->name, Tensor(p->var.shape(), 0.0));
  return m;
}

struct LogRecord {
  std::size_t iter = 0;
  double lr = 0.0;
  double loss = 0.0;     // mean over the logging window
  double aux_acc = 0.0;  // head top-1 accuracy over the window
};

inline nlohmann::json to_json(const LogRecord& r) {
  return {{"iter", r.iter}, {"lr", r.lr}, {"loss", r.loss}, {"aux_acc", r.aux_acc}};
}

struct TrainLog {
  std::vector<double> losses;    // one per iteration
  std::vector<double> accuracy;  // one per iteration
  std::vector<LogRecord> records;
};

/// Training loop over the users of `corpus` listed in model.training_users.
/// Resumes from model.iteration. Writes one JSON line per logging window to
/// `jsonl` when given.
class Trainer {
 public:
  Trainer(Model& model, const Corpus& corpus) : m_(model) {
    for (const auto& id : m_.training_users) {
      auto it = corpus.find(id);
      if (it == corpus.end()) throw DataError("train: training user " + id + " missing from corpus");
      histories_.push_back(m_.vocab.encode(it->second.actions));
      sizes_.push_back(it->second.size());
    }
  }

  /// One optimization step; returns (loss, batch accuracy).
  std::pair<double, double> step() {
    const TrainConfig& cfg = m_.train;
    const std::size_t it = m_.iteration;
    const double lr = lr_at(cfg, it);
    const Rng root(cfg.seed);
    Rng brng = root.split(3).split(it);
    Rng drng = root.split(4).split(it);

    const auto windows = sample_batch_windows(sizes_, cfg.batch_size, cfg.episode_len, brng);
    EpisodeBatch batch;
    batch.batch = windows.size();
    batch.length = cfg.episode_len;
    std::vector<std::size_t> labels;
    for (const auto& w : windows) {
      const auto& h = histories_[w.user];
      batch.actions.insert(batch.actions.end(), h.begin() + static_cast<std::ptrdiff_t>(w.start),
                           h.begin() + static_cast<std::ptrdiff_t>(w.start + cfg.episode_len));
      labels.push_back(w.user);
    }

    auto params = m_.parameters();
    for (Parameter* p : params) p->var.zero_grad();
    double loss_value = 0.0, acc = 0.0;
    try {
      const Var z = m_.encoder.forward(batch, Mode::train, &drng);
      const Var loss = m_.head.loss(z, labels);
      loss_value = loss.value().item();
      const auto pred = m_.head.predict(z);
      for (std::size_t i = 0; i < pred.size(); ++i) acc += pred[i] == labels[i] ? 1.0 : 0.0;
      acc /= static_cast<double>(pred.size());
      backward(loss);
    } catch (const NumericError& e) {
      throw TrainingError(diagnostic("non-finite value (" + std::string(e.what()) + ")", it, lr, labels));
    }

    std::vector<Tensor> grads;
    grads.reserve(params.size());
    double sq = 0.0;
    for (Parameter* p : params) {
      Tensor g = p->var.has_grad() ? p->var.grad() : Tensor(p->var.shape(), 0.0);
      if (cfg.weight_decay > 0.0) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += cfg.weight_decay * p->var.value()[i];
      }
      for (double v : g.data()) sq += v * v;
      grads.push_back(std::move(g));
    }
    if (!std::isfinite(sq)) throw TrainingError(diagnostic("non-finite gradient", it, lr, labels));
    if (cfg.clip_norm > 0.0 && std::sqrt(sq) > cfg.clip_norm) {
      const double f = cfg.clip_norm / std::sqrt(sq);
      for (auto& g : grads) {
        for (double& v : g.data()) v *= f;
      }
    }
    std::vector<Tensor*> values, vel;
    std::vector<const Tensor*> gptr;
    for (std::size_t k = 0; k < params.size(); ++k) {
      values.push_back(&params[k]->var.mutable_value());
      vel.push_back(&m_.velocity.at(params[k]->name));
      gptr.push_back(&grads[k]);
    }
    sgd_momentum_step(values, gptr, vel, lr, cfg.momentum);
    for (Parameter* p : params) p->var.zero_grad();
    ++m_.iteration;
    return {loss_value, acc};
  }

  /// Runs until model.iteration reaches total_iters.
  TrainLog run(std::ostream* jsonl = nullptr) {
    TrainLog log;
    const TrainConfig& cfg = m_.train;
    double win_loss = 0.0, win_acc = 0.0;
    std::size_t win = 0;
    while (m_.iteration < cfg.total_iters) {
      const std::size_t it = m_.iteration;
      const auto [loss, acc] = step();
      log.losses.push_back(loss);
      log.accuracy.push_back(acc);
      win_loss += loss;
      win_acc += acc;
      ++win;
      if ((it + 1) % cfg.log_every == 0 || it + 1 == cfg.total_iters) {
        LogRecord r{it + 1, lr_at(cfg, it), win_loss / static_cast<double>(win), win_acc / static_cast<double>(win)};
        log.records.push_back(r);
        if (jsonl) *jsonl << to_json(r).dump() << "\n" << std::flush;
        win_loss = win_acc = 0.0;
        win = 0;
      }
    }
    return log;
  }

 private:
  std::string diagnostic(const std::string& what, std::size_t it, double lr,
                         const std::vector<std::size_t>& labels) const {
    std::ostringstream os;
    os << "training aborted at iter " << it << " (lr " << lr << "): " << what << "; batch users:";
    for (std::size_t l : labels) os << " " << m_.training_users[l];
    return os.str();
  }

  Model& m_;
  std::vector<std::vector<EncodedAction>> histories_;
  std::vector<std::size_t> sizes_;
};

// ---------------------------------------------------------------------------
// Checkpoints: a directory with manifest.json, params.bin and vocab.json.

inline constexpr char kParamsMagic[8] = {'E', 'P', 'I', 'S', 'P', 'A', 'R', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& data, std::string what = "checkpoint: params.bin")
      : d_(data), what_(std::move(what)) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = d_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == d_.size(); }

 private:
  std::uint64_t uint(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(d_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  void need(std::size_t n) const {
    if (d_.size() - pos_ < n) throw DataError(what_ + " is truncated");
  }
  const std::string& d_;
  std::string what_;
  std::size_t pos_ = 0;
};

/// FNV-1a 64-bit, hex encoded.
inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& data) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << data;
  if (!out) throw std::runtime_error("write failed: " + p.string());
}

}  // namespace detail

/// Named tensors to store: parameters, batch-norm running statistics and
/// momentum buffers.
inline std::vector<std::pair<std::string, const Tensor*>> checkpoint_tensors(const Model& m) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (const Parameter* p : m.parameters()) out.emplace_back(p->name, &p->var.value());
  for (const auto& [name, st] : m.encoder.bn_states()) {
    out.emplace_back(name + ".running_mean", &st.running_mean);
    out.emplace_back(name + ".running_var", &st.running_var);
  }
  for (const auto& [name, v] : m.velocity) out.emplace_back("velocity:" + name, &v);
  return out;
}

inline std::string serialize_params(const Model& m) {
  std::string out(kParamsMagic, sizeof kParamsMagic);
  detail::put_u32(out, kCheckpointVersion);
  const auto tensors = checkpoint_tensors(m);
  detail::put_u64(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t d : t->shape()) detail::put_u64(out, d);
    for (double v : t->data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

inline nlohmann::json manifest_json(const Model& m, const std::string& vocab_text) {
  return {{"format_version", kCheckpointVersion},
          {"model", to_json(m.encoder.config())},
          {"train", to_json(m.train)},
          {"loss", to_string(m.train.head.loss)},
          {"metric", to_string(m.metric())},
          {"iteration", m.iteration},
          {"symbol_vocab", m.encoder.symbol_vocab()},
          {"context_vocab", m.encoder.context_vocab()},
          {"text_len", m.encoder.text_len()},
          {"vocab_hash", detail::fnv1a_hex(vocab_text)},
          {"training_users", m.training_users},
          {"head_init", "glorot_uniform"}};
}

inline void save_checkpoint(const Model& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string vocab_text = to_json(m.vocab).dump() + "\n";
  detail::write_file(dir / "vocab.json", vocab_text);
  detail::write_file(dir / "params.bin", serialize_params(m));
  detail::write_file(dir / "manifest.json", manifest_json(m, vocab_text).dump(2) + "\n");
}

/// Loads and validates a checkpoint directory. Nothing is returned unless
/// every tensor is present with the shape the manifest implies.
inline Model load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("checkpoint not found: " + dir.string());
  nlohmann::json man;
  try {
    man = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: manifest.json is not valid JSON: " + std::string(e.what()));
  }
  const std::string vocab_text = detail::read_file(dir / "vocab.json");
  std::optional<Model> m;
  try {
    if (man.at("format_version").get<std::uint32_t>() != kCheckpointVersion) {
      throw DataError("checkpoint: unsupported format version " + man.at("format_version").dump());
    }
    if (man.at("vocab_hash").get<std::string>() != detail::fnv1a_hex(vocab_text)) {
      throw DataError("checkpoint: vocab.json does not match the manifest hash");
    }
    Vocabulary vocab = vocabulary_from_json(nlohmann::json::parse(vocab_text));
    const ModelConfig mc = model_config_from_json(man.at("model"));
    const TrainConfig tc = train_config_from_json(man.at("train"));
    m.emplace(make_model(std::move(vocab), mc, tc, man.at("training_users").get<std::vector<std::string>>()));
    if (m->encoder.symbol_vocab() != man.at("symbol_vocab").get<std::size_t>() ||
        m->encoder.context_vocab() != man.at("context_vocab").get<std::size_t>() ||
        m->encoder.text_len() != man.at("text_len").get<std::size_t>()) {
      throw DataError("checkpoint: vocabulary sizes disagree with the manifest");
    }
    m->iteration = man.at("iteration").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: malformed manifest: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw DataError("checkpoint: manifest config rejected: " + std::string(e.what()));
  }

  const std::string blob = detail::read_file(dir / "params.bin");
  detail::ByteReader r(blob);
  if (r.bytes(sizeof kParamsMagic) != std::string(kParamsMagic, sizeof kParamsMagic)) {
    throw DataError("checkpoint: params.bin has a bad magic number");
  }
  if (const auto v = r.u32(); v != kCheckpointVersion) {
    throw DataError("checkpoint: params.bin version " + std::to_string(v) + " is not supported");
  }
  // Decode everything first, then commit.
  std::map<std::string, Tensor> loaded;
  const std::uint64_t count = r.u64();
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::string name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw DataError("checkpoint: tensor " + name + " has implausible rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u64());
    std::vector<double> vals(shape_numel(shape));
    for (double& v : vals) v = static_cast<double>(std::bit_cast<float>(r.u32()));
    if (!loaded.emplace(name, Tensor(shape, std::move(vals))).second) {
      throw DataError("checkpoint: duplicate tensor " + name);
    }
  }
  if (!r.done()) throw DataError("checkpoint: trailing bytes in params.bin");

  const auto expected = checkpoint_tensors(*m);
  if (expected.size() != loaded.size()) {
    throw DataError("checkpoint: expected " + std::to_string(expected.size()) + " tensors, found " +
                    std::to_string(loaded.size()));
  }
  for (const auto& [name, t] : expected) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw DataError("checkpoint: missing tensor " + name);
    if (it->second.shape() != t->shape()) {
      throw DataError("checkpoint: tensor " + name + " has shape " + shape_str(it->second.shape()) +
                      ", model expects " + shape_str(t->shape()));
    }
  }
  for (Parameter* p : m->parameters()) p->var.mutable_value() = loaded.at(p->name);
  for (auto& [name, st] : m->encoder.bn_states()) {
    st.running_mean = loaded.at(name + ".running_mean");
    st.running_var = loaded.at(name + ".running_var");
  }
  for (auto& [name, v] : m->velocity) v = loaded.at("velocity:" + name);
  return std::move(*m);
}

}  // namespace episodic
