// Copyright 2026 The rellax Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Interaction logs, CTR sample construction and the synthetic corpus.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rellax/error.hpp"
#include "rellax/numerics.hpp"

namespace rellax {

struct Attribute {
  std::string name;
  std::vector<std::string> values;
};

struct Item {
  std::int64_t id = 0;
  std::string title;
  std::vector<Attribute> attributes;

  const Attribute* find(std::string_view field) const {
    for (const auto& a : attributes)
      if (a.name == field) return &a;
    return nullptr;
  }
};

struct ProfileField {
  std::string name;
  std::string value;
};

struct User {
  std::int64_t id = 0;
  std::vector<ProfileField> profile;

  const ProfileField* find(std::string_view field) const {
    for (const auto& f : profile)
      if (f.name == field) return &f;
    return nullptr;
  }
};

struct InteractionEvent {
  std::int64_t user_id = 0;
  std::int64_t item_id = 0;
  double rating = 0.0;
  std::int64_t timestamp = 0;
  std::size_t order = 0;  // position in the source file; stable tie-break
};

struct Catalog {
  std::map<std::int64_t, Item> items;
  std::map<std::int64_t, User> users;

  const Item& item(std::int64_t id) const {
    auto it = items.find(id);
    if (it == items.end()) throw ContractError("unknown item id " + std::to_string(id));
    return it->second;
  }
  const User& user(std::int64_t id) const {
    auto it = users.find(id);
    if (it == users.end()) throw ContractError("unknown user id " + std::to_string(id));
    return it->second;
  }
};

struct LoadReport {
  std::size_t lines = 0;
  std::size_t malformed = 0;
  std::vector<std::string> problems;  // "<file>:<line>: <reason>"
};

struct Corpus {
  Catalog catalog;
  std::vector<InteractionEvent> events;
  LoadReport report;
};

// ---------------------------------------------------------------------------
// Labels

enum class LabelRule {
  movielens_1m,   // rating >= 4
  movielens_25m,  // rating > 3.0
  book_crossing,  // rating > 5
};

inline int label_for(LabelRule rule, double rating) {
  switch (rule) {
    case LabelRule::movielens_1m:
      return rating >= 4.0 ? 1 : 0;
    case LabelRule::movielens_25m:
      return rating > 3.0 ? 1 : 0;
    case LabelRule::book_crossing:
      return rating > 5.0 ? 1 : 0;
  }
  return 0;
}

inline LabelRule parse_label_rule(std::string_view name) {
  if (name == "ml-1m" || name == "movielens-1m") return LabelRule::movielens_1m;
  if (name == "ml-25m" || name == "movielens-25m") return LabelRule::movielens_25m;
  if (name == "bookcrossing" || name == "book-crossing") return LabelRule::book_crossing;
  throw ContractError("unknown label rule '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// MovieLens-1M

enum class TextEncoding { latin1, utf8 };

struct LoadOptions {
  TextEncoding encoding = TextEncoding::latin1;
  bool strict = true;  // throw on the first malformed line instead of counting it
};

struct MovieLensPaths {
  std::string ratings;
  std::string movies;
  std::string users;

  static MovieLensPaths in_directory(const std::string& dir) {
    return {dir + "/ratings.dat", dir + "/movies.dat", dir + "/users.dat"};
  }
};

namespace detail {

inline std::string latin1_to_utf8(std::string_view in) {
  std::string out;
  out.reserve(in.size());
  for (unsigned char c : in) {
    if (c < 0x80) {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back(static_cast<char>(0xC0 | (c >> 6)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    }
  }
  return out;
}

inline bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    if (c < 0x80) extra = 0;
    else if ((c >> 5) == 0x6) extra = 1;
    else if ((c >> 4) == 0xE) extra = 2;
    else if ((c >> 3) == 0x1E) extra = 3;
    else return false;
    if (i + extra >= s.size() && extra > 0) return false;
    for (std::size_t k = 1; k <= extra; ++k)
      if ((static_cast<unsigned char>(s[i + k]) >> 6) != 0x2) return false;
    i += extra + 1;
  }
  return true;
}

inline std::vector<std::string> split_on(std::string_view line, std::string_view sep) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t next = line.find(sep, pos);
    if (next == std::string_view::npos) {
      out.emplace_back(line.substr(pos));
      return out;
    }
    out.emplace_back(line.substr(pos, next - pos));
    pos = next + sep.size();
  }
}

template <class T>
bool parse_number(const std::string& s, T& out) {
  std::istringstream ss(s);
  ss >> out;
  return !ss.fail() && ss.eof();
}

// Reads a "::"-delimited file, handing each decoded row to `on_row`, which
// returns an empty string on success or a reason for rejecting the line.
template <class OnRow>
void read_dat(const std::string& path, std::size_t fields, const LoadOptions& opt,
              LoadReport& report, OnRow&& on_row) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError("cannot open " + path);
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(f, raw)) {
    ++lineno;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    if (raw.empty()) continue;
    ++report.lines;
    std::string line;
    if (opt.encoding == TextEncoding::latin1) {
      line = latin1_to_utf8(raw);
    } else {
      if (!valid_utf8(raw))
        throw LoadError(path + ":" + std::to_string(lineno) + ": invalid UTF-8");
      line = raw;
    }
    auto parts = split_on(line, "::");
    std::string reason;
    if (parts.size() < fields) {
      throw LoadError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(fields) +
                      " fields, found " + std::to_string(parts.size()));
    }
    reason = parts.size() > fields ? "too many fields" : on_row(parts, lineno);
    if (!reason.empty()) {
      const std::string msg = path + ":" + std::to_string(lineno) + ": " + reason;
      if (opt.strict) throw LoadError(msg);
      ++report.malformed;
      report.problems.push_back(msg);
    }
  }
}

inline std::string ml1m_age(const std::string& code) {
  static const std::map<std::string, std::string> kAges = {
      {"1", "under 18"}, {"18", "18-24"}, {"25", "25-34"}, {"35", "35-44"},
      {"45", "45-49"},   {"50", "50-55"}, {"56", "56+"}};
  auto it = kAges.find(code);
  return it == kAges.end() ? code : it->second;
}

inline std::string ml1m_occupation(const std::string& code) {
  static const std::vector<std::string> kJobs = {
      "other",          "academic/educator", "artist",        "clerical/admin",
      "college/grad student", "customer service", "doctor/health care",
      "executive/managerial", "farmer",         "homemaker",     "K-12 student",
      "lawyer",         "programmer",        "retired",       "sales/marketing",
      "scientist",      "self-employed",     "technician/engineer",
      "tradesman/craftsman", "unemployed",   "writer"};
  int k = -1;
  if (!parse_number(code, k) || k < 0 || k >= static_cast<int>(kJobs.size())) return code;
  return kJobs[static_cast<std::size_t>(k)];
}

}  // namespace detail

inline Corpus load_movielens_1m(const MovieLensPaths& paths, const LoadOptions& opt = {}) {
  Corpus c;
  detail::read_dat(paths.movies, 3, opt, c.report,
                   [&](const std::vector<std::string>& p, std::size_t) -> std::string {
                     Item item;
                     if (!detail::parse_number(p[0], item.id)) return "bad MovieID";
                     if (c.catalog.items.contains(item.id)) return "duplicate MovieID";
                     item.title = p[1];
                     Attribute genres{"genres", {}};
                     if (!p[2].empty()) genres.values = detail::split_on(p[2], "|");
                     item.attributes.push_back(std::move(genres));
                     c.catalog.items.emplace(item.id, std::move(item));
                     return {};
                   });
  detail::read_dat(paths.users, 5, opt, c.report,
                   [&](const std::vector<std::string>& p, std::size_t) -> std::string {
                     User u;
                     if (!detail::parse_number(p[0], u.id)) return "bad UserID";
                     if (c.catalog.users.contains(u.id)) return "duplicate UserID";
                     if (p[1] != "M" && p[1] != "F") return "bad Gender";
                     u.profile = {{"gender", p[1] == "M" ? "male" : "female"},
                                  {"age", detail::ml1m_age(p[2])},
                                  {"occupation", detail::ml1m_occupation(p[3])},
                                  {"zip", p[4]}};
                     c.catalog.users.emplace(u.id, std::move(u));
                     return {};
                   });
  detail::read_dat(paths.ratings, 4, opt, c.report,
                   [&](const std::vector<std::string>& p, std::size_t) -> std::string {
                     InteractionEvent e;
                     if (!detail::parse_number(p[0], e.user_id)) return "bad UserID";
                     if (!detail::parse_number(p[1], e.item_id)) return "bad MovieID";
                     if (!detail::parse_number(p[2], e.rating)) return "bad Rating";
                     if (!detail::parse_number(p[3], e.timestamp)) return "bad Timestamp";
                     if (!c.catalog.users.contains(e.user_id)) return "unknown UserID";
                     if (!c.catalog.items.contains(e.item_id)) return "unknown MovieID";
                     e.order = c.events.size();
                     c.events.push_back(e);
                     return {};
                   });
  return c;
}

// ---------------------------------------------------------------------------
// Samples

struct HistoryEntry {
  std::int64_t item_id = 0;
  int label = 0;
  std::int64_t timestamp = 0;
};

// A prefix of one user's chronological event list. Samples whose targets
// share a timestamp share the same prefix object.
struct History {
  std::shared_ptr<const std::vector<HistoryEntry>> events;
  std::size_t length = 0;

  std::span<const HistoryEntry> view() const {
    return events ? std::span<const HistoryEntry>(events->data(), length)
                  : std::span<const HistoryEntry>{};
  }
  std::size_t size() const { return length; }
  bool empty() const { return length == 0; }
  const HistoryEntry& operator[](std::size_t i) const { return (*events)[i]; }
};

enum class Split { train, test };

struct InteractionSample {
  std::int64_t user_id = 0;
  History history;
  std::int64_t target_id = 0;
  int label = 0;
  std::int64_t timestamp = 0;
  std::size_t order = 0;
  Split split = Split::train;
};

struct SampleRules {
  LabelRule label = LabelRule::movielens_1m;
  std::size_t min_history = 5;
  std::size_t train_parts = 8;
  std::size_t test_parts = 1;
};

// Every event whose user has at least `min_history` strictly earlier events
// becomes a sample. Samples are ordered by (timestamp, file order); the first
// train_parts/(train_parts+test_parts) of them go to train, and any sample
// tied with the last train timestamp joins train as well.
inline std::vector<InteractionSample> build_samples(const std::vector<InteractionEvent>& events,
                                                    const Catalog& catalog,
                                                    const SampleRules& rules = {}) {
  if (events.empty()) throw ContractError("build_samples: empty event stream");
  std::map<std::int64_t, std::vector<const InteractionEvent*>> per_user;
  for (const auto& e : events) {
    if (!catalog.users.contains(e.user_id) || !catalog.items.contains(e.item_id))
      throw ContractError("build_samples: event references unknown user/item");
    per_user[e.user_id].push_back(&e);
  }
  std::vector<InteractionSample> samples;
  for (auto& [uid, list] : per_user) {
    std::stable_sort(list.begin(), list.end(), [](const auto* a, const auto* b) {
      return a->timestamp != b->timestamp ? a->timestamp < b->timestamp : a->order < b->order;
    });
    auto hist = std::make_shared<std::vector<HistoryEntry>>();
    hist->reserve(list.size());
    for (const auto* e : list)
      hist->push_back({e->item_id, label_for(rules.label, e->rating), e->timestamp});
    std::shared_ptr<const std::vector<HistoryEntry>> shared = hist;
    std::size_t strictly_before = 0;
    for (std::size_t k = 0; k < list.size(); ++k) {
      while (strictly_before < k && list[strictly_before]->timestamp < list[k]->timestamp)
        ++strictly_before;
      if (strictly_before < rules.min_history) continue;
      InteractionSample s;
      s.user_id = uid;
      s.history = History{shared, strictly_before};
      s.target_id = list[k]->item_id;
      s.label = label_for(rules.label, list[k]->rating);
      s.timestamp = list[k]->timestamp;
      s.order = list[k]->order;
      samples.push_back(std::move(s));
    }
  }
  std::stable_sort(samples.begin(), samples.end(), [](const auto& a, const auto& b) {
    return a.timestamp != b.timestamp ? a.timestamp < b.timestamp : a.order < b.order;
  });
  const std::size_t n = samples.size();
  if (n == 0) return samples;
  std::size_t n_train = n * rules.train_parts / (rules.train_parts + rules.test_parts);
  n_train = std::max<std::size_t>(n_train, 1);
  const std::int64_t boundary = samples[n_train - 1].timestamp;
  for (auto& s : samples) s.split = s.timestamp <= boundary ? Split::train : Split::test;
  return samples;
}

inline std::vector<InteractionSample> select_split(const std::vector<InteractionSample>& samples,
                                                   Split split) {
  std::vector<InteractionSample> out;
  for (const auto& s : samples)
    if (s.split == split) out.push_back(s);
  return out;
}

// Uniform sample without replacement, returned in the original order.
inline std::vector<InteractionSample> sample_few_shot(const std::vector<InteractionSample>& train,
                                                      std::size_t shots, std::uint64_t seed) {
  if (shots > train.size())
    throw ContractError("sample_few_shot: " + std::to_string(shots) + " shots requested from " +
                        std::to_string(train.size()) + " samples");
  if (shots == train.size()) return train;
  std::vector<std::size_t> idx(train.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng = Rng(seed).split("few-shot");
  for (std::size_t i = 0; i < shots; ++i) {
    const std::size_t j = i + rng.below(idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(shots);
  std::sort(idx.begin(), idx.end());
  std::vector<InteractionSample> out;
  out.reserve(shots);
  for (std::size_t i : idx) out.push_back(train[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Sample store: one sample per line, tab separated, fixed field order.
//   user  target  label  timestamp  order  split  history
// history = item:label:timestamp entries joined by ';' (empty allowed).

inline constexpr std::string_view kSampleStoreHeader =
    "# rellax-samples v1\tuser\ttarget\tlabel\ttimestamp\torder\tsplit\thistory(item:label:timestamp;...)";

inline void write_samples(std::ostream& out, const std::vector<InteractionSample>& samples) {
  out << kSampleStoreHeader << '\n';
  for (const auto& s : samples) {
    out << s.user_id << '\t' << s.target_id << '\t' << s.label << '\t' << s.timestamp << '\t'
        << s.order << '\t' << (s.split == Split::train ? "train" : "test") << '\t';
    bool first = true;
    for (const auto& h : s.history.view()) {
      if (!first) out << ';';
      first = false;
      out << h.item_id << ':' << h.label << ':' << h.timestamp;
    }
    out << '\n';
  }
}

inline std::vector<InteractionSample> read_samples(std::istream& in) {
  std::vector<InteractionSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto fail = [&](const char* what) {
      throw LoadError("sample store line " + std::to_string(lineno) + ": " + what);
    };
    auto f = detail::split_on(line, "\t");
    if (f.size() != 7) fail("expected 7 fields");
    InteractionSample s;
    if (!detail::parse_number(f[0], s.user_id) || !detail::parse_number(f[1], s.target_id) ||
        !detail::parse_number(f[2], s.label) || !detail::parse_number(f[3], s.timestamp) ||
        !detail::parse_number(f[4], s.order))
      fail("bad numeric field");
    if (f[5] == "train") s.split = Split::train;
    else if (f[5] == "test") s.split = Split::test;
    else fail("bad split");
    auto hist = std::make_shared<std::vector<HistoryEntry>>();
    if (!f[6].empty()) {
      for (const auto& e : detail::split_on(f[6], ";")) {
        auto parts = detail::split_on(e, ":");
        HistoryEntry h;
        if (parts.size() != 3 || !detail::parse_number(parts[0], h.item_id) ||
            !detail::parse_number(parts[1], h.label) || !detail::parse_number(parts[2], h.timestamp))
          fail("bad history entry");
        hist->push_back(h);
      }
    }
    s.history = History{std::move(hist), 0};
    s.history.length = s.history.events->size();
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus: items clustered by genre, users with planted genre
// preferences. Ratings are high on preferred genres (with label noise), so
// relevant history genuinely predicts the label.

struct SyntheticSpec {
  std::size_t users = 600;
  std::size_t items = 200;
  std::size_t genres = 8;
  std::size_t preferred_genres = 2;
  std::size_t min_events = 30;
  std::size_t max_events = 50;
  double p_preferred = 0.65;     // chance an event is drawn from a preferred genre
  double p_secondary = 0.3;      // chance an item carries a second genre
  double label_noise = 0.05;     // chance a rating contradicts the preference
  std::uint64_t seed = 7;
};

inline Corpus make_synthetic_corpus(const SyntheticSpec& spec) {
  static const std::vector<std::string> kGenres = {
      "Action", "Comedy", "Drama", "Horror", "Romance", "SciFi", "Western", "Musical",
      "Mystery", "Fantasy", "Crime", "Animation"};
  static const std::vector<std::vector<std::string>> kGenreWords = {
      {"Steel", "Fury", "Strike", "Blast"},   {"Silly", "Laugh", "Goofy", "Prank"},
      {"Quiet", "Broken", "Tender", "River"}, {"Blood", "Haunted", "Scream", "Grave"},
      {"Kiss", "Heart", "Sweet", "Amour"},    {"Star", "Galaxy", "Robot", "Quantum"},
      {"Dust", "Saddle", "Outlaw", "Canyon"}, {"Song", "Dance", "Melody", "Stage"},
      {"Secret", "Clue", "Shadow", "Riddle"}, {"Dragon", "Wizard", "Elf", "Realm"},
      {"Heist", "Mob", "Cartel", "Badge"},    {"Toon", "Bunny", "Pixel", "Doodle"}};
  static const std::vector<std::string> kNouns = {"Night", "Road", "Story", "City", "Game",
                                                  "Day",   "House", "Line", "Land", "Code"};
  static const std::vector<std::string> kAges = {"18-24", "25-34", "35-44", "45-49", "50-55"};
  static const std::vector<std::string> kJobs = {"artist", "programmer", "writer", "scientist",
                                                 "lawyer", "homemaker", "retired"};
  RELLAX_REQUIRE(spec.genres >= 2 && spec.genres <= kGenres.size(),
                 "synthetic: genres must be in [2, 12]");
  RELLAX_REQUIRE(spec.preferred_genres >= 1 && spec.preferred_genres < spec.genres,
                 "synthetic: preferred_genres must be in [1, genres)");
  RELLAX_REQUIRE(spec.min_events >= 1 && spec.min_events <= spec.max_events,
                 "synthetic: bad event range");

  Rng root(spec.seed);
  Corpus c;
  Rng item_rng = root.split("items");
  std::vector<std::vector<std::int64_t>> by_genre(spec.genres);
  std::vector<std::vector<std::size_t>> item_genres;
  for (std::size_t i = 0; i < spec.items; ++i) {
    const std::size_t g = item_rng.below(spec.genres);
    Item item;
    item.id = static_cast<std::int64_t>(i + 1);
    const auto& words = kGenreWords[g];
    item.title = words[item_rng.below(words.size())] + " " + kNouns[item_rng.below(kNouns.size())] +
                 " " + std::to_string(i + 1);
    std::vector<std::size_t> gs = {g};
    if (item_rng.uniform() < spec.p_secondary) {
      std::size_t g2 = item_rng.below(spec.genres - 1);
      if (g2 >= g) ++g2;
      gs.push_back(g2);
    }
    Attribute genres{"genres", {}};
    for (std::size_t x : gs) genres.values.push_back(kGenres[x]);
    item.attributes.push_back(std::move(genres));
    by_genre[g].push_back(item.id);
    item_genres.push_back(gs);
    c.catalog.items.emplace(item.id, std::move(item));
  }
  for (std::size_t g = 0; g < spec.genres; ++g)
    RELLAX_REQUIRE(!by_genre[g].empty(), "synthetic: a genre received no items; raise items");

  Rng user_rng = root.split("users");
  Rng event_rng = root.split("events");
  constexpr std::int64_t kHorizon = 1'000'000;
  for (std::size_t u = 0; u < spec.users; ++u) {
    User user;
    user.id = static_cast<std::int64_t>(u + 1);
    user.profile = {{"gender", user_rng.below(2) ? "male" : "female"},
                    {"age", kAges[user_rng.below(kAges.size())]},
                    {"occupation", kJobs[user_rng.below(kJobs.size())]}};
    std::vector<std::size_t> all(spec.genres);
    for (std::size_t g = 0; g < spec.genres; ++g) all[g] = g;
    user_rng.shuffle(all);
    std::vector<bool> liked(spec.genres, false);
    for (std::size_t k = 0; k < spec.preferred_genres; ++k) liked[all[k]] = true;
    c.catalog.users.emplace(user.id, std::move(user));

    const std::size_t n_events =
        spec.min_events + event_rng.below(spec.max_events - spec.min_events + 1);
    std::vector<std::int64_t> times(n_events);
    for (auto& t : times) t = static_cast<std::int64_t>(event_rng.below(kHorizon));
    std::sort(times.begin(), times.end());
    for (std::size_t e = 0; e < n_events; ++e) {
      std::size_t g;
      if (event_rng.uniform() < spec.p_preferred) {
        g = all[event_rng.below(spec.preferred_genres)];
      } else {
        g = event_rng.below(spec.genres);
      }
      const auto& pool = by_genre[g];
      const std::int64_t item_id = pool[event_rng.below(pool.size())];
      bool pref = false;
      for (std::size_t x : item_genres[static_cast<std::size_t>(item_id - 1)]) pref = pref || liked[x];
      if (event_rng.uniform() < spec.label_noise) pref = !pref;
      const double rating = pref ? 4.0 + static_cast<double>(event_rng.below(2))
                                 : 1.0 + static_cast<double>(event_rng.below(3));
      InteractionEvent ev{static_cast<std::int64_t>(u + 1), item_id, rating, times[e], c.events.size()};
      c.events.push_back(ev);
    }
  }
  return c;
}

}  // namespace rellax
