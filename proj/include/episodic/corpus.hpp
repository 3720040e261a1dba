#pragma once

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "episodic/rng.hpp"
#include "episodic/tensor.hpp"
#include "json.hpp"

namespace episodic {

inline constexpr const char* kUnknownContext = "unk";

/// Hour of day in UTC, in [0, 24).
inline int hour_of_day(std::int64_t timestamp) {
  const std::int64_t s = ((timestamp % 86400) + 86400) % 86400;
  return static_cast<int>(s / 3600);
}

/// One user event.
struct Action {
  std::int64_t timestamp = 0;  // seconds since epoch, UTC
  std::string text;
  std::string context = kUnknownContext;

  int hour() const { return hour_of_day(timestamp); }
  bool operator==(const Action&) const = default;
};

struct UserHistory {
  std::string user_id;
  std::vector<Action> actions;  // non-decreasing timestamps

  std::size_t size() const { return actions.size(); }
  bool operator==(const UserHistory&) const = default;
};

/// Users keyed (and therefore iterated) by id.
using Corpus = std::map<std::string, UserHistory>;

/// A contiguous window of one user's history.
struct Episode {
  std::string user_id;
  std::size_t start = 0;  // offset of the first action in the source history
  std::vector<Action> actions;

  std::size_t length() const { return actions.size(); }
};

struct SplitSpec {
  double train_fraction = 0.75;
  std::size_t min_actions = 100;
  std::size_t max_actions = 500;
};

// ---------------------------------------------------------------------------
// Timestamps

/// Parses RFC-3339 ("2016-09-15T07:03:00Z", optional fraction and numeric
/// offset) to epoch seconds. Fractional seconds are truncated.
inline std::optional<std::int64_t> parse_rfc3339(const std::string& s) {
  int y, mo, d, h, mi, sec;
  if (s.size() < 20) return std::nullopt;
  if (std::sscanf(s.c_str(), "%4d-%2d-%2d", &y, &mo, &d) != 3) return std::nullopt;
  if (s[4] != '-' || s[7] != '-' || (s[10] != 'T' && s[10] != 't' && s[10] != ' ')) {
    return std::nullopt;
  }
  if (std::sscanf(s.c_str() + 11, "%2d:%2d:%2d", &h, &mi, &sec) != 3) return std::nullopt;
  if (s[13] != ':' || s[16] != ':') return std::nullopt;
  std::size_t pos = 19;
  if (pos < s.size() && s[pos] == '.') {
    ++pos;
    while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
  }
  std::int64_t offset = 0;
  if (pos >= s.size()) return std::nullopt;
  if (s[pos] == 'Z' || s[pos] == 'z') {
    ++pos;
  } else if (s[pos] == '+' || s[pos] == '-') {
    int oh, om;
    if (s.size() < pos + 6 || s[pos + 3] != ':' ||
        std::sscanf(s.c_str() + pos + 1, "%2d:%2d", &oh, &om) != 2) {
      return std::nullopt;
    }
    offset = (s[pos] == '+' ? 1 : -1) * (oh * 3600 + om * 60);
    pos += 6;
  } else {
    return std::nullopt;
  }
  if (pos != s.size()) return std::nullopt;
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || sec > 60) return std::nullopt;
  const std::int64_t days = sys_days{ymd}.time_since_epoch().count();
  return days * 86400 + h * 3600 + mi * 60 + sec - offset;
}

// ---------------------------------------------------------------------------
// JSONL ingestion

struct IngestOptions {
  bool strict = false;
  std::ostream* warnings = &std::cerr;
};

struct IngestResult {
  Corpus corpus;
  std::size_t lines_read = 0;
  std::size_t malformed_lines = 0;
};

inline void sort_history(UserHistory& h) {
  std::stable_sort(h.actions.begin(), h.actions.end(),
                   [](const Action& a, const Action& b) { return a.timestamp < b.timestamp; });
}

/// Parses one JSONL record {user_id, ts, text, context}. Throws DataError.
inline std::pair<std::string, Action> parse_action_record(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw DataError("record is not an object");
  if (!j.contains("user_id") || !j["user_id"].is_string() || j["user_id"].get<std::string>().empty()) {
    throw DataError("missing or empty string field 'user_id'");
  }
  Action a;
  if (!j.contains("ts")) throw DataError("missing field 'ts'");
  const auto& ts = j["ts"];
  if (ts.is_number_integer()) {
    a.timestamp = ts.get<std::int64_t>();
  } else if (ts.is_string()) {
    auto parsed = parse_rfc3339(ts.get<std::string>());
    if (!parsed) throw DataError("unparseable timestamp '" + ts.get<std::string>() + "'");
    a.timestamp = *parsed;
  } else {
    throw DataError("field 'ts' must be an integer or RFC-3339 string");
  }
  if (a.timestamp < 0) throw DataError("negative timestamp");
  if (j.contains("text")) {
    if (!j["text"].is_string()) throw DataError("field 'text' must be a string");
    a.text = j["text"].get<std::string>();
  }
  if (j.contains("context") && !j["context"].is_null()) {
    if (!j["context"].is_string()) throw DataError("field 'context' must be a string");
    a.context = j["context"].get<std::string>();
    if (a.context.empty()) a.context = kUnknownContext;
  }
  return {j["user_id"].get<std::string>(), std::move(a)};
}

inline IngestResult ingest_jsonl(std::istream& in, const IngestOptions& opts = {}) {
  IngestResult result;
  std::string line;
  while (std::getline(in, line)) {
    ++result.lines_read;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto [user, action] = parse_action_record(line);
      auto& h = result.corpus[user];
      h.user_id = user;
      h.actions.push_back(std::move(action));
    } catch (const DataError& e) {
      if (opts.strict) {
        throw DataError("line " + std::to_string(result.lines_read) + ": " + e.what());
      }
      ++result.malformed_lines;
      if (opts.warnings) {
        *opts.warnings << "warning: skipping line " << result.lines_read << ": " << e.what() << '\n';
      }
    }
  }
  for (auto& [id, h] : result.corpus) sort_history(h);
  return result;
}

inline IngestResult ingest_jsonl(const std::string& path, const IngestOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read corpus file " + path);
  return ingest_jsonl(in, opts);
}

inline nlohmann::json action_to_json(const std::string& user_id, const Action& a) {
  return {{"user_id", user_id}, {"ts", a.timestamp}, {"text", a.text}, {"context", a.context}};
}

inline void save_jsonl(const Corpus& corpus, std::ostream& out) {
  for (const auto& [id, h] : corpus) {
    for (const auto& a : h.actions) out << action_to_json(id, a).dump() << '\n';
  }
}

inline void save_jsonl(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file " + path);
  save_jsonl(corpus, out);
}

// ---------------------------------------------------------------------------
// Filtering and splitting

/// Keeps users with min_actions <= |actions| <= max_actions.
inline Corpus filter_users(const Corpus& corpus, std::size_t min_actions,
                           std::size_t max_actions = std::numeric_limits<std::size_t>::max()) {
  if (min_actions < 1) throw std::invalid_argument("filter_users: min_actions must be >= 1");
  Corpus out;
  for (const auto& [id, h] : corpus) {
    if (h.size() >= min_actions && h.size() <= max_actions) out.emplace(id, h);
  }
  return out;
}

/// Number of actions in the early part: ceil(fraction * n).
inline std::size_t early_count(std::size_t n, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw std::invalid_argument("chronological_split: fraction must be in (0, 1)");
  }
  // The epsilon absorbs representation error such as 0.7 * 10 = 7.000000000000001.
  const double raw = fraction * static_cast<double>(n);
  return std::min(n, static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw))));
}

inline std::pair<UserHistory, UserHistory> chronological_split(const UserHistory& history,
                                                               double fraction) {
  const std::size_t k = early_count(history.size(), fraction);
  UserHistory early{history.user_id, {history.actions.begin(), history.actions.begin() + static_cast<std::ptrdiff_t>(k)}};
  UserHistory late{history.user_id, {history.actions.begin() + static_cast<std::ptrdiff_t>(k), history.actions.end()}};
  return {std::move(early), std::move(late)};
}

/// Applies chronological_split to every user; returns (early, late) corpora.
inline std::pair<Corpus, Corpus> chronological_split(const Corpus& corpus, double fraction) {
  Corpus early, late;
  for (const auto& [id, h] : corpus) {
    auto [e, l] = chronological_split(h, fraction);
    early.emplace(id, std::move(e));
    late.emplace(id, std::move(l));
  }
  return {std::move(early), std::move(late)};
}

// ---------------------------------------------------------------------------
// Sampling

inline Episode episode_at(const UserHistory& history, std::size_t start, std::size_t length) {
  if (length == 0 || start + length > history.size()) {
    throw std::out_of_range("episode window [" + std::to_string(start) + ", " +
                            std::to_string(start + length) + ") outside history of " +
                            history.user_id + " with " + std::to_string(history.size()) +
                            " actions");
  }
  Episode e;
  e.user_id = history.user_id;
  e.start = start;
  e.actions.assign(history.actions.begin() + static_cast<std::ptrdiff_t>(start),
                   history.actions.begin() + static_cast<std::ptrdiff_t>(start + length));
  return e;
}

/// Start offset of a window of `length` drawn uniformly from n actions.
inline std::size_t sample_window_start(std::size_t n, std::size_t length, Rng& rng,
                                       const std::string& user_id = "") {
  if (length == 0) throw std::invalid_argument("sample_episode: length must be positive");
  if (n < length) {
    throw DataError("sample_episode: user '" + user_id + "' has " + std::to_string(n) +
                    " actions, fewer than episode length " + std::to_string(length));
  }
  return static_cast<std::size_t>(rng.uniform_int(n - length + 1));
}

/// Uniform contiguous window [i, i + L) with i in {0, ..., n - L}.
inline Episode sample_episode(const UserHistory& history, std::size_t length, Rng& rng) {
  return episode_at(history, sample_window_start(history.size(), length, rng, history.user_id),
                    length);
}

/// `count` episodes drawn from disjoint, equal-size consecutive segments of
/// the history (one per segment), so episodes never share actions.
inline std::vector<Episode> sample_disjoint_episodes(const UserHistory& history, std::size_t count,
                                                     std::size_t length, Rng& rng) {
  if (count == 0) return {};
  const std::size_t seg = history.size() / count;
  if (seg < length) {
    throw DataError("sample_disjoint_episodes: user '" + history.user_id + "' has " +
                    std::to_string(history.size()) + " actions, need " +
                    std::to_string(count * length));
  }
  std::vector<Episode> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t start = i * seg + sample_window_start(seg, length, rng, history.user_id);
    out.push_back(episode_at(history, start, length));
  }
  return out;
}

struct BatchWindow {
  std::size_t user = 0;  // dense label
  std::size_t start = 0;
};

/// Draws `batch_size` users uniformly with replacement among those with at
/// least `length` actions, then one window per draw. `sizes[i]` is the
/// history length of label i.
inline std::vector<BatchWindow> sample_batch_windows(std::span<const std::size_t> sizes,
                                                     std::size_t batch_size, std::size_t length,
                                                     Rng& rng) {
  if (batch_size == 0) return {};
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] >= length) eligible.push_back(i);
  }
  if (eligible.empty()) {
    throw DataError("make_batch: no user has at least " + std::to_string(length) + " actions");
  }
  std::vector<BatchWindow> out;
  out.reserve(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const std::size_t u = eligible[rng.uniform_int(eligible.size())];
    out.push_back({u, sample_window_start(sizes[u], length, rng)});
  }
  return out;
}

/// Training users in id order; label i is the i-th user.
struct LabeledUsers {
  std::vector<const UserHistory*> users;

  explicit LabeledUsers(const Corpus& corpus) {
    for (const auto& [id, h] : corpus) users.push_back(&h);
  }
  std::size_t num_labels() const { return users.size(); }
  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s;
    for (const auto* u : users) s.push_back(u->size());
    return s;
  }
};

struct LabeledEpisode {
  Episode episode;
  std::size_t label = 0;
};

inline std::vector<LabeledEpisode> make_batch(const LabeledUsers& users, std::size_t batch_size,
                                              std::size_t length, Rng& rng) {
  const auto sizes = users.sizes();
  std::vector<LabeledEpisode> out;
  for (const auto& w : sample_batch_windows(sizes, batch_size, length, rng)) {
    out.push_back({episode_at(*users.users[w.user], w.start, length), w.user});
  }
  return out;
}

}  // namespace episodic
