#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "episodic/autodiff.hpp"
#include "episodic/json_config.hpp"
#include "episodic/ops.hpp"
#include "episodic/rng.hpp"
#include "episodic/tokenizer.hpp"

namespace episodic {

struct ModelConfig {
  std::size_t d_embed = 256;
  std::vector<std::size_t> conv_widths = {2, 3, 4, 5};
  std::size_t filters_per_conv = 256;
  std::size_t attn_layers = 2;
  std::size_t attn_heads = 4;
  std::size_t d_hidden = 512;
  std::size_t output_dim = 512;
  double dropout_rate = 0.1;
  bool use_time = true;
  bool use_context = true;
  bool use_text = true;
  bool use_positional = false;

  void validate() const {
    if (d_embed == 0 || d_hidden == 0 || output_dim == 0) throw ConfigError("model: zero width");
    if (use_text && (conv_widths.empty() || filters_per_conv == 0)) {
      throw ConfigError("model: text features need conv widths and filters");
    }
    for (std::size_t w : conv_widths) {
      if (w == 0) throw ConfigError("model: conv width must be >= 1");
    }
    if (attn_layers == 0) throw ConfigError("model: attn_layers must be >= 1");
    if (attn_heads == 0 || d_hidden % attn_heads != 0) {
      throw ConfigError("model: d_hidden " + std::to_string(d_hidden) +
                        " not divisible by attn_heads " + std::to_string(attn_heads));
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("model: dropout_rate must be in [0, 1)");
    if (!use_time && !use_context && !use_text) throw ConfigError("model: all feature groups disabled");
  }

  std::size_t max_width() const {
    std::size_t m = 0;
    for (std::size_t w : conv_widths) m = std::max(m, w);
    return m;
  }

  /// Width of one action vector.
  std::size_t action_dim() const {
    return (use_time ? d_embed : 0) + (use_text ? conv_widths.size() * filters_per_conv : 0) +
           (use_context ? d_embed : 0);
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"d_embed", c.d_embed},         {"conv_widths", c.conv_widths},
          {"filters_per_conv", c.filters_per_conv}, {"attn_layers", c.attn_layers},
          {"attn_heads", c.attn_heads},   {"d_hidden", c.d_hidden},
          {"output_dim", c.output_dim},   {"dropout_rate", c.dropout_rate},
          {"use_time", c.use_time},       {"use_context", c.use_context},
          {"use_text", c.use_text},       {"use_positional", c.use_positional},
          {"norm_placement", "pre"},      {"ffn_width", c.d_hidden}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  StrictObject o(j, "model");
  o.read("d_embed", c.d_embed);
  o.read("conv_widths", c.conv_widths);
  o.read("filters_per_conv", c.filters_per_conv);
  o.read("attn_layers", c.attn_layers);
  o.read("attn_heads", c.attn_heads);
  o.read("d_hidden", c.d_hidden);
  o.read("output_dim", c.output_dim);
  o.read("dropout_rate", c.dropout_rate);
  o.read("use_time", c.use_time);
  o.read("use_context", c.use_context);
  o.read("use_text", c.use_text);
  o.read("use_positional", c.use_positional);
  // Informational fields written by to_json; only the supported values load.
  if (o.has("norm_placement")) {
    std::string p;
    o.read("norm_placement", p);
    if (p != "pre") throw ConfigError("model.norm_placement: only \"pre\" is supported");
  }
  if (o.has("ffn_width")) {
    std::size_t f = 0;
    o.read("ffn_width", f);
    if (f != c.d_hidden) throw ConfigError("model.ffn_width must equal d_hidden");
  }
  o.finish();
  c.validate();
  return c;
}

/// A batch of equal-length episodes, actions stored episode-major.
struct EpisodeBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<EncodedAction> actions;  // batch * length

  static EpisodeBatch from(const std::vector<std::vector<EncodedAction>>& episodes) {
    EpisodeBatch b;
    if (episodes.empty()) throw ShapeError("EpisodeBatch: no episodes");
    b.batch = episodes.size();
    b.length = episodes[0].size();
    if (b.length == 0) throw ShapeError("EpisodeBatch: empty episode");
    for (const auto& e : episodes) {
      if (e.size() != b.length) throw ShapeError("EpisodeBatch: episodes differ in length");
      b.actions.insert(b.actions.end(), e.begin(), e.end());
    }
    return b;
  }
};

/// Sinusoidal position table [length, width].
inline Tensor sinusoid_positions(std::size_t length, std::size_t width) {
  Tensor pe(Shape{length, width});
  for (std::size_t p = 0; p < length; ++p) {
    for (std::size_t i = 0; i < width; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(width));
      pe[p * width + i] = i % 2 == 0 ? std::sin(p * rate) : std::cos(p * rate);
    }
  }
  return pe;
}

/// Glorot-uniform tensor: entries i.i.d. in +-sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor t(std::move(shape));
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-a, a);
  return t;
}

/// The episode embedding network. Holds its parameters and batch-norm
/// running state.
class Encoder {
 public:
  Encoder(ModelConfig cfg, std::size_t symbol_vocab, std::size_t context_vocab, std::size_t text_len,
          std::uint64_t seed)
      : cfg_(std::move(cfg)), symbol_vocab_(symbol_vocab), context_vocab_(context_vocab), text_len_(text_len) {
    cfg_.validate();
    if (cfg_.use_text && cfg_.max_width() > text_len) {
      throw ConfigError("model: conv width " + std::to_string(cfg_.max_width()) +
                        " exceeds text length " + std::to_string(text_len));
    }
    Rng rng(seed);
    const std::size_t e = cfg_.d_embed, h = cfg_.d_hidden;
    auto weight = [&](const std::string& name, std::size_t in, std::size_t out) {
      params_.add(name, glorot_uniform({in, out}, in, out, rng));
    };
    auto zeros = [&](const std::string& name, std::size_t n) { params_.add(name, Tensor(Shape{n}, 0.0)); };
    auto ones = [&](const std::string& name, std::size_t n) { params_.add(name, Tensor(Shape{n}, 1.0)); };

    if (cfg_.use_time) weight("encoder.embed.hour", 24, e);
    if (cfg_.use_context) weight("encoder.embed.context", context_vocab, e);
    if (cfg_.use_text) {
      weight("encoder.embed.symbol", symbol_vocab, e);
      const std::size_t f = cfg_.filters_per_conv;
      for (std::size_t w : cfg_.conv_widths) {
        const std::string p = "encoder.conv.w" + std::to_string(w);
        params_.add(p + ".kernel", glorot_uniform({w, e, f}, w * e, w * f, rng));
        zeros(p + ".bias", f);
      }
    }
    weight("encoder.proj.weight", cfg_.action_dim(), h);
    zeros("encoder.proj.bias", h);
    for (std::size_t l = 0; l < cfg_.attn_layers; ++l) {
      const std::string p = layer_prefix(l);
      ones(p + ".ln1.gain", h);
      zeros(p + ".ln1.bias", h);
      // Key bias would shift every score of a query equally, so it is left out.
      weight(p + ".k.weight", h, h);
      for (const char* m : {".q", ".v", ".o"}) {
        weight(p + m + ".weight", h, h);
        zeros(p + m + ".bias", h);
      }
      ones(p + ".ln2.gain", h);
      zeros(p + ".ln2.bias", h);
      weight(p + ".ffn1.weight", h, h);
      zeros(p + ".ffn1.bias", h);
      weight(p + ".ffn2.weight", h, h);
      // The last block feeds batch norm through mean pooling, which cancels a bias.
      if (l + 1 < cfg_.attn_layers) zeros(p + ".ffn2.bias", h);
    }
    const std::size_t pooled = cfg_.attn_layers * h, d = cfg_.output_dim;
    add_batch_norm("encoder.mlp.bn_in", pooled);
    weight("encoder.mlp.fc1.weight", pooled, h);
    zeros("encoder.mlp.fc1.bias", h);
    weight("encoder.mlp.fc2.weight", h, d);
    add_batch_norm("encoder.mlp.bn_out", d);
  }

  const ModelConfig& config() const { return cfg_; }
  std::size_t text_len() const { return text_len_; }
  std::size_t symbol_vocab() const { return symbol_vocab_; }
  std::size_t context_vocab() const { return context_vocab_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  std::map<std::string, BatchNormState>& bn_states() { return bn_; }
  const std::map<std::string, BatchNormState>& bn_states() const { return bn_; }

  /// Action vectors [N, action_dim] for N actions.
  Var encode_actions(const std::vector<EncodedAction>& actions, Mode mode, Rng* rng) const {
    const std::size_t n = actions.size();
    if (n == 0) throw ShapeError("encode_actions: no actions");
    std::vector<Var> parts;
    if (cfg_.use_time) {
      std::vector<std::int64_t> ids(n);
      for (std::size_t i = 0; i < n; ++i) ids[i] = actions[i].hour_id;
      parts.push_back(embedding_gather(params_.get("encoder.embed.hour"), ids, {n}));
    }
    if (cfg_.use_text) {
      std::vector<std::int64_t> ids;
      ids.reserve(n * text_len_);
      for (const auto& a : actions) {
        if (a.text_ids.size() != text_len_) {
          throw DataError("encode_actions: text has " + std::to_string(a.text_ids.size()) +
                          " ids, expected " + std::to_string(text_len_));
        }
        ids.insert(ids.end(), a.text_ids.begin(), a.text_ids.end());
      }
      const Var emb = embedding_gather(params_.get("encoder.embed.symbol"), ids, {n, text_len_});
      std::vector<Var> pooled;
      for (std::size_t w : cfg_.conv_widths) {
        const std::string p = "encoder.conv.w" + std::to_string(w);
        pooled.push_back(max_over_time(relu(conv1d(emb, params_.get(p + ".kernel"), params_.get(p + ".bias")))));
      }
      Var text = pooled.size() == 1 ? pooled[0] : concat(pooled, -1);
      parts.push_back(dropout(text, cfg_.dropout_rate, mode, rng));
    }
    if (cfg_.use_context) {
      std::vector<std::int64_t> ids(n);
      for (std::size_t i = 0; i < n; ++i) ids[i] = actions[i].context_id;
      parts.push_back(embedding_gather(params_.get("encoder.embed.context"), ids, {n}));
    }
    return parts.size() == 1 ? parts[0] : concat(parts, -1);
  }

  /// Episode embeddings [batch, output_dim]. Train mode uses batch
  /// statistics, updates the running state and applies dropout.
  Var forward(const EpisodeBatch& batch, Mode mode, Rng* rng) {
    return forward_with(batch, mode, rng, bn_);
  }

  /// Eval-mode forward that leaves the encoder untouched.
  Var forward_eval(const EpisodeBatch& batch) const {
    auto states = bn_;
    return forward_with(batch, Mode::eval, nullptr, states);
  }

  /// Eval-mode embeddings without recording a graph, in chunks of
  /// `chunk` episodes. Episodes may differ in length.
  std::vector<Tensor> embed(const std::vector<std::vector<EncodedAction>>& episodes,
                            std::size_t chunk = 128) const {
    NoGradGuard guard;
    std::vector<Tensor> out(episodes.size());
    std::map<std::size_t, std::vector<std::size_t>> by_len;
    for (std::size_t i = 0; i < episodes.size(); ++i) by_len[episodes[i].size()].push_back(i);
    for (const auto& [len, idx] : by_len) {
      for (std::size_t s = 0; s < idx.size(); s += chunk) {
        std::vector<std::vector<EncodedAction>> group;
        for (std::size_t k = s; k < std::min(idx.size(), s + chunk); ++k) group.push_back(episodes[idx[k]]);
        const Tensor z = forward_eval(EpisodeBatch::from(group)).value();
        const std::size_t d = z.dim(1);
        for (std::size_t k = 0; k < group.size(); ++k) {
          Tensor row(Shape{d});
          std::copy_n(z.storage().begin() + static_cast<std::ptrdiff_t>(k * d), d, row.storage().begin());
          out[idx[s + k]] = std::move(row);
        }
      }
    }
    return out;
  }

 private:
  static std::string layer_prefix(std::size_t l) { return "encoder.attn" + std::to_string(l); }

  void add_batch_norm(const std::string& name, std::size_t n) {
    params_.add(name + ".gamma", Tensor(Shape{n}, 1.0));
    params_.add(name + ".beta", Tensor(Shape{n}, 0.0));
    bn_[name] = {Tensor(Shape{n}, 0.0), Tensor(Shape{n}, 1.0)};
  }

  Var linear(const Var& x, const std::string& name) const {
    const Var y = matmul(x, params_.get(name + ".weight"));
    return params_.contains(name + ".bias") ? add(y, params_.get(name + ".bias")) : y;
  }

  Var forward_with(const EpisodeBatch& batch, Mode mode, Rng* rng,
                   std::map<std::string, BatchNormState>& bn) const {
    const std::size_t b = batch.batch, l = batch.length, h = cfg_.d_hidden;
    if (b == 0 || l == 0 || batch.actions.size() != b * l) {
      throw ShapeError("encoder: batch of " + std::to_string(b) + " x " + std::to_string(l) + " holds " +
                       std::to_string(batch.actions.size()) + " actions");
    }
    Var x = reshape(linear(encode_actions(batch.actions, mode, rng), "encoder.proj"), {b, l, h});
    if (cfg_.use_positional) x = add(x, Var(sinusoid_positions(l, h)));

    std::vector<Var> pooled;
    for (std::size_t i = 0; i < cfg_.attn_layers; ++i) {
      const std::string p = layer_prefix(i);
      const Var y = layer_norm(x, params_.get(p + ".ln1.gain"), params_.get(p + ".ln1.bias"));
      const Var att = scaled_dot_product_attention(linear(y, p + ".q"), linear(y, p + ".k"),
                                                   linear(y, p + ".v"), cfg_.attn_heads);
      x = add(x, linear(att, p + ".o"));
      const Var y2 = layer_norm(x, params_.get(p + ".ln2.gain"), params_.get(p + ".ln2.bias"));
      x = add(x, linear(relu(linear(y2, p + ".ffn1")), p + ".ffn2"));
      pooled.push_back(mean_over_time(x));
    }
    Var u = pooled.size() == 1 ? pooled[0] : concat(pooled, -1);
    u = batch_norm(u, params_.get("encoder.mlp.bn_in.gamma"), params_.get("encoder.mlp.bn_in.beta"),
                   bn.at("encoder.mlp.bn_in"), mode);
    u = linear(relu(linear(u, "encoder.mlp.fc1")), "encoder.mlp.fc2");
    return batch_norm(u, params_.get("encoder.mlp.bn_out.gamma"), params_.get("encoder.mlp.bn_out.beta"),
                      bn.at("encoder.mlp.bn_out"), mode);
  }

  ModelConfig cfg_;
  std::size_t symbol_vocab_, context_vocab_, text_len_;
  ParameterSet params_;
  std::map<std::string, BatchNormState> bn_;
};

}  // namespace episodic
