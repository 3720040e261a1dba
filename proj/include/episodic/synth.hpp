#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "episodic/corpus.hpp"
#include "episodic/json_config.hpp"
#include "episodic/rng.hpp"

namespace episodic {

/// Parameters of the synthetic corpus. Every author has a private token
/// distribution, a preferred hour band and preferred contexts; the signature
/// strength is the probability that any one token, timestamp or context is
/// drawn from the author's private profile instead of the shared one.
struct SynthConfig {
  std::size_t num_authors = 20;
  std::size_t actions_per_author = 200;
  double signature_strength = 0.8;

  std::size_t background_vocab = 200;
  double background_zipf = 1.0;
  std::size_t signature_vocab = 400;
  std::size_t signature_words_per_author = 10;
  bool disjoint_signatures = false;

  std::size_t words_per_action_min = 3;
  std::size_t words_per_action_max = 8;

  std::size_t num_contexts = 50;
  std::size_t contexts_per_author = 3;

  std::size_t hour_band_width = 6;
  bool disjoint_hour_bands = false;  // author i gets band (i mod 24/width)
  double mean_gap_hours = 6.0;
  std::int64_t start_time = 1470009600;  // 2016-08-01T00:00:00Z

  std::uint64_t seed = 1;

  void validate() const {
    if (num_authors < 2) throw ConfigError("synth: num_authors must be >= 2");
    if (actions_per_author < 1) throw ConfigError("synth: actions_per_author must be >= 1");
    if (!(signature_strength >= 0.0 && signature_strength <= 1.0)) {
      throw ConfigError("synth: signature_strength must be a probability in [0, 1]");
    }
    if (background_vocab < 1 || signature_vocab < 1) throw ConfigError("synth: empty vocabulary");
    if (!(background_zipf >= 0.0)) throw ConfigError("synth: background_zipf must be >= 0");
    if (signature_words_per_author < 1 || signature_words_per_author > signature_vocab) {
      throw ConfigError("synth: signature_words_per_author must be in [1, signature_vocab]");
    }
    if (disjoint_signatures && num_authors * signature_words_per_author > signature_vocab) {
      throw ConfigError("synth: disjoint signatures need signature_vocab >= num_authors * "
                        "signature_words_per_author");
    }
    if (words_per_action_min > words_per_action_max) {
      throw ConfigError("synth: words_per_action_min > words_per_action_max");
    }
    if (num_contexts < 1 || contexts_per_author < 1 || contexts_per_author > num_contexts) {
      throw ConfigError("synth: contexts_per_author must be in [1, num_contexts]");
    }
    if (hour_band_width < 1 || hour_band_width > 24) {
      throw ConfigError("synth: hour_band_width must be in [1, 24]");
    }
    if (disjoint_hour_bands && 24 % hour_band_width != 0) {
      throw ConfigError("synth: disjoint hour bands need hour_band_width dividing 24");
    }
    if (!(mean_gap_hours > 0.0)) throw ConfigError("synth: mean_gap_hours must be positive");
    if (start_time < 0) throw ConfigError("synth: start_time must be >= 0");
  }
};

inline nlohmann::json to_json(const SynthConfig& c) {
  return {{"num_authors", c.num_authors},
          {"actions_per_author", c.actions_per_author},
          {"signature_strength", c.signature_strength},
          {"background_vocab", c.background_vocab},
          {"background_zipf", c.background_zipf},
          {"signature_vocab", c.signature_vocab},
          {"signature_words_per_author", c.signature_words_per_author},
          {"disjoint_signatures", c.disjoint_signatures},
          {"words_per_action_min", c.words_per_action_min},
          {"words_per_action_max", c.words_per_action_max},
          {"num_contexts", c.num_contexts},
          {"contexts_per_author", c.contexts_per_author},
          {"hour_band_width", c.hour_band_width},
          {"disjoint_hour_bands", c.disjoint_hour_bands},
          {"mean_gap_hours", c.mean_gap_hours},
          {"start_time", c.start_time},
          {"seed", c.seed}};
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  StrictObject o(j, "synth");
  o.read("num_authors", c.num_authors);
  o.read("actions_per_author", c.actions_per_author);
  o.read("signature_strength", c.signature_strength);
  o.read("background_vocab", c.background_vocab);
  o.read("background_zipf", c.background_zipf);
  o.read("signature_vocab", c.signature_vocab);
  o.read("signature_words_per_author", c.signature_words_per_author);
  o.read("disjoint_signatures", c.disjoint_signatures);
  o.read("words_per_action_min", c.words_per_action_min);
  o.read("words_per_action_max", c.words_per_action_max);
  o.read("num_contexts", c.num_contexts);
  o.read("contexts_per_author", c.contexts_per_author);
  o.read("hour_band_width", c.hour_band_width);
  o.read("disjoint_hour_bands", c.disjoint_hour_bands);
  o.read("mean_gap_hours", c.mean_gap_hours);
  o.read("start_time", c.start_time);
  o.read("seed", c.seed);
  o.finish();
  c.validate();
  return c;
}

namespace detail {

inline std::string random_word(Rng& rng, std::size_t min_len, std::size_t max_len) {
  static constexpr const char* kLetters = "abcdefghijklmnopqrstuvwxyz";
  const std::size_t len = min_len + rng.uniform_int(max_len - min_len + 1);
  std::string w;
  for (std::size_t i = 0; i < len; ++i) w.push_back(kLetters[rng.uniform_int(26)]);
  return w;
}

inline std::vector<std::string> unique_words(Rng& rng, std::size_t count, std::set<std::string>& taken,
                                             std::size_t min_len, std::size_t max_len) {
  std::vector<std::string> out;
  while (out.size() < count) {
    std::string w = random_word(rng, min_len, max_len);
    if (taken.insert(w).second) out.push_back(std::move(w));
  }
  return out;
}

/// Cumulative table for repeated categorical draws.
class Sampler {
 public:
  Sampler() = default;
  explicit Sampler(const std::vector<double>& weights) {
    double acc = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("synth: invalid probability weight");
      acc += w;
      cum_.push_back(acc);
    }
    if (!(acc > 0.0)) throw ConfigError("synth: probability weights sum to zero");
  }
  std::size_t draw(Rng& rng) const {
    const double u = rng.uniform() * cum_.back();
    const auto it = std::upper_bound(cum_.begin(), cum_.end(), u);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cum_.begin()), cum_.size() - 1);
  }

 private:
  std::vector<double> cum_;
};

}  // namespace detail

/// Deterministic synthetic corpus. User ids are "u0000", "u0001", ... so id
/// order is generation order; each author draws from its own stream, so an
/// author's data does not depend on how many authors follow it.
inline Corpus synth_corpus(const SynthConfig& cfg) {
  cfg.validate();
  const Rng root(cfg.seed);
  Rng vocab_rng = root.split(0xB0CAB);

  std::set<std::string> taken;
  const auto background = detail::unique_words(vocab_rng, cfg.background_vocab, taken, 2, 6);
  const auto signature = detail::unique_words(vocab_rng, cfg.signature_vocab, taken, 4, 9);

  std::vector<double> zipf(cfg.background_vocab);
  for (std::size_t i = 0; i < zipf.size(); ++i) {
    zipf[i] = 1.0 / std::pow(static_cast<double>(i + 1), cfg.background_zipf);
  }
  const detail::Sampler background_sampler(zipf);

  std::vector<std::string> contexts;
  for (std::size_t i = 0; i < cfg.num_contexts; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ctx%03zu", i);
    contexts.emplace_back(buf);
  }
  std::vector<double> ctx_pop(cfg.num_contexts);
  for (std::size_t i = 0; i < ctx_pop.size(); ++i) ctx_pop[i] = 1.0 / static_cast<double>(i + 1);
  const detail::Sampler shared_ctx_sampler(ctx_pop);

  const std::size_t num_bands = 24 / cfg.hour_band_width;
  Corpus corpus;
  for (std::size_t a = 0; a < cfg.num_authors; ++a) {
    Rng prof = root.split(2 * a + 1);
    Rng gen = root.split(2 * a + 2);

    // Private token multinomial.
    std::vector<std::size_t> words;
    if (cfg.disjoint_signatures) {
      for (std::size_t k = 0; k < cfg.signature_words_per_author; ++k) {
        words.push_back(a * cfg.signature_words_per_author + k);
      }
    } else {
      std::set<std::size_t> picked;
      while (picked.size() < cfg.signature_words_per_author) {
        picked.insert(static_cast<std::size_t>(prof.uniform_int(cfg.signature_vocab)));
      }
      words.assign(picked.begin(), picked.end());
    }
    std::vector<double> word_w;
    for (std::size_t k = 0; k < words.size(); ++k) word_w.push_back(prof.uniform(0.2, 1.0));
    const detail::Sampler word_sampler(word_w);

    // Context multinomial.
    std::set<std::size_t> ctx_set;
    while (ctx_set.size() < cfg.contexts_per_author) {
      ctx_set.insert(static_cast<std::size_t>(prof.uniform_int(cfg.num_contexts)));
    }
    const std::vector<std::size_t> my_ctx(ctx_set.begin(), ctx_set.end());
    std::vector<double> ctx_w;
    for (std::size_t k = 0; k < my_ctx.size(); ++k) ctx_w.push_back(prof.uniform(0.2, 1.0));
    const detail::Sampler ctx_sampler(ctx_w);

    // Preferred hour band [band_start, band_start + width).
    const std::int64_t band_start =
        cfg.disjoint_hour_bands
            ? static_cast<std::int64_t>((a % num_bands) * cfg.hour_band_width)
            : static_cast<std::int64_t>(prof.uniform_int(24));
    const std::int64_t band_len = static_cast<std::int64_t>(cfg.hour_band_width) * 3600;

    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "u%04zu", a);
    UserHistory h;
    h.user_id = idbuf;

    std::int64_t t = cfg.start_time + static_cast<std::int64_t>(prof.uniform_int(2 * 86400));
    for (std::size_t i = 0; i < cfg.actions_per_author; ++i) {
      t += 60 + static_cast<std::int64_t>(gen.exponential(cfg.mean_gap_hours * 3600.0));
      if (gen.bernoulli(cfg.signature_strength)) {
        // Move forward into the next occurrence of the preferred band.
        const std::int64_t day = t - t % 86400;
        std::int64_t bs = day + band_start * 3600;
        if (t >= bs + band_len) bs += 86400;
        if (t < bs) t = bs + static_cast<std::int64_t>(gen.uniform_int(static_cast<std::uint64_t>(band_len)));
      }
      Action act;
      act.timestamp = t;
      const std::size_t n_words =
          cfg.words_per_action_min + gen.uniform_int(cfg.words_per_action_max - cfg.words_per_action_min + 1);
      for (std::size_t w = 0; w < n_words; ++w) {
        if (w) act.text.push_back(' ');
        if (gen.bernoulli(cfg.signature_strength)) {
          act.text += signature[words[word_sampler.draw(gen)]];
        } else {
          act.text += background[background_sampler.draw(gen)];
        }
      }
      act.context = gen.bernoulli(cfg.signature_strength) ? contexts[my_ctx[ctx_sampler.draw(gen)]]
                                                          : contexts[shared_ctx_sampler.draw(gen)];
      h.actions.push_back(std::move(act));
    }
    corpus.emplace(h.user_id, std::move(h));
  }
  return corpus;
}

}  // namespace episodic
