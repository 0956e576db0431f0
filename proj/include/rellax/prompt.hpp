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

// Hard prompts, the word-level tokenizer and soft-prompt assembly.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rellax/data.hpp"
#include "rellax/error.hpp"
#include "rellax/numerics.hpp"

namespace rellax {

// Clause texts with `{field}` placeholders. Item clauses may use {title} and
// any attribute name; profile clauses use profile field names; history_item
// uses {item} and {judgment}; target uses {item}. There is deliberately no
// placeholder for raw ids.
struct PromptTemplate {
  std::string dataset = "movielens";
  std::string item_description = "Here is a movie. Its title is {title}. Its genres are {genres}.";
  std::string item_mention = "{title} ({genres})";
  std::string profile = "The user is {gender}, aged {age}, and works as {occupation}.";
  std::string history_intro = "The user rated these movies:";
  std::string history_item = "{item}, {judgment};";
  std::string liked = "liked";
  std::string disliked = "disliked";
  std::string target = "Will the user like {item}?";
  std::string question = "Answer Yes or No. Answer:";

  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k = {"dataset", "item_description", "item_mention", "profile",
                                               "history_intro", "history_item", "liked", "disliked",
                                               "target", "question"};
    return k;
  }

  std::string& field(const std::string& key) {
    if (key == "dataset") return dataset;
    if (key == "item_description") return item_description;
    if (key == "item_mention") return item_mention;
    if (key == "profile") return profile;
    if (key == "history_intro") return history_intro;
    if (key == "history_item") return history_item;
    if (key == "liked") return liked;
    if (key == "disliked") return disliked;
    if (key == "target") return target;
    if (key == "question") return question;
    throw LoadError("template: unknown clause '" + key + "'");
  }
  const std::string& field(const std::string& key) const { return const_cast<PromptTemplate*>(this)->field(key); }

  // "clause = text" lines; '#' starts a comment line. Unlisted clauses keep
  // their defaults.
  static PromptTemplate parse(std::istream& in) {
    PromptTemplate t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const auto first = line.find_first_not_of(" \t");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw LoadError("template line " + std::to_string(lineno) + ": expected 'clause = text'");
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t");
        const auto e = s.find_last_not_of(" \t");
        return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
      };
      t.field(trim(line.substr(0, eq))) = trim(line.substr(eq + 1));
    }
    return t;
  }

  void write(std::ostream& out) const {
    for (const auto& k : keys()) out << k << " = " << field(k) << "\n";
  }
};

struct CharSpan {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
};

namespace detail {

using FieldLookup = std::function<std::optional<std::string>(std::string_view)>;

// Replaces every {name}; records the output range of each occurrence of
// `mark` in `marks`.
inline std::string substitute(std::string_view tmpl, const FieldLookup& lookup, std::string_view context,
                              std::string_view mark = {}, std::vector<CharSpan>* marks = nullptr) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i);
      if (close == std::string_view::npos) throw ContractError("template: unterminated placeholder in " + std::string(context));
      const std::string_view name = tmpl.substr(i + 1, close - i - 1);
      auto value = lookup(name);
      if (!value)
        throw ContractError("template: placeholder {" + std::string(name) + "} has no value in " + std::string(context));
      if (marks && name == mark) marks->push_back({out.size(), out.size() + value->size()});
      out += *value;
      i = close + 1;
    } else {
      out.push_back(tmpl[i++]);
    }
  }
  return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

inline FieldLookup item_lookup(const Item& item) {
  return [&item](std::string_view name) -> std::optional<std::string> {
    if (name == "title") return item.title;
    if (const Attribute* a = item.find(name)) return a->values.empty() ? std::string("unknown") : join(a->values, ", ");
    return std::nullopt;
  };
}

}  // namespace detail

inline std::string render_item_description(const Item& item, const PromptTemplate& t) {
  return detail::substitute(t.item_description, detail::item_lookup(item), "item_description");
}

inline std::string render_item_mention(const Item& item, const PromptTemplate& t) {
  return detail::substitute(t.item_mention, detail::item_lookup(item), "item_mention");
}

inline std::string render_profile(const User& user, const PromptTemplate& t) {
  return detail::substitute(
      t.profile,
      [&user](std::string_view name) -> std::optional<std::string> {
        if (const ProfileField* f = user.find(name)) return f->value;
        return std::nullopt;
      },
      "profile");
}

struct RenderedPrompt {
  std::string text;
  std::vector<std::string> clauses;           // joined by single spaces
  std::vector<CharSpan> item_spans;           // history items, then the target
  std::vector<std::int64_t> item_ids;         // same order as item_spans
  std::vector<std::size_t> history_positions; // which history entries were rendered
};

// Renders the given history positions (must be ascending) plus the target.
inline RenderedPrompt render_hard_prompt(const InteractionSample& sample, const Catalog& catalog,
                                         const PromptTemplate& t, std::span<const std::size_t> positions) {
  if (sample.history.empty()) throw ContractError("render_hard_prompt: empty history");
  RenderedPrompt r;
  r.history_positions.assign(positions.begin(), positions.end());
  struct Piece {
    std::string text;
    std::vector<CharSpan> marks;
  };
  std::vector<Piece> pieces;
  pieces.push_back({render_profile(catalog.user(sample.user_id), t), {}});
  pieces.push_back({t.history_intro, {}});
  const auto hist = sample.history.view();
  for (std::size_t k = 0; k < positions.size(); ++k) {
    RELLAX_REQUIRE(positions[k] < hist.size(), "render_hard_prompt: history position out of range");
    RELLAX_REQUIRE(k == 0 || positions[k - 1] < positions[k], "render_hard_prompt: positions must ascend");
    const HistoryEntry& h = hist[positions[k]];
    const std::string mention = render_item_mention(catalog.item(h.item_id), t);
    const std::string judgment = h.label ? t.liked : t.disliked;
    Piece p;
    p.text = detail::substitute(
        t.history_item,
        [&](std::string_view name) -> std::optional<std::string> {
          if (name == "item") return mention;
          if (name == "judgment") return judgment;
          return std::nullopt;
        },
        "history_item", "item", &p.marks);
    RELLAX_REQUIRE(p.marks.size() == 1, "template: history_item must contain {item} exactly once");
    pieces.push_back(std::move(p));
    r.item_ids.push_back(h.item_id);
  }
  {
    const std::string mention = render_item_mention(catalog.item(sample.target_id), t);
    Piece p;
    p.text = detail::substitute(
        t.target,
        [&](std::string_view name) -> std::optional<std::string> {
          if (name == "item") return mention;
          return std::nullopt;
        },
        "target", "item", &p.marks);
    RELLAX_REQUIRE(p.marks.size() == 1, "template: target must contain {item} exactly once");
    pieces.push_back(std::move(p));
    r.item_ids.push_back(sample.target_id);
  }
  pieces.push_back({t.question, {}});
  for (auto& p : pieces) {
    if (!r.text.empty()) r.text.push_back(' ');
    const std::size_t base = r.text.size();
    for (const auto& m : p.marks) r.item_spans.push_back({base + m.begin, base + m.end});
    r.text += p.text;
    r.clauses.push_back(std::move(p.text));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Word-level tokenizer: whitespace separates words; every ASCII punctuation
// character is its own token.

struct WordPiece {
  std::size_t begin = 0;
  std::size_t end = 0;
};

inline std::vector<WordPiece> split_words(std::string_view text) {
  std::vector<WordPiece> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
    } else if (c < 0x80 && std::ispunct(c)) {
      out.push_back({i, i + 1});
      ++i;
    } else {
      std::size_t j = i;
      while (j < text.size()) {
        const unsigned char d = static_cast<unsigned char>(text[j]);
        if (std::isspace(d) || (d < 0x80 && std::ispunct(d))) break;
        ++j;
      }
      out.push_back({i, j});
      i = j;
    }
  }
  return out;
}

class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kBos = 1;
  static constexpr std::int32_t kEos = 2;
  static constexpr std::int32_t kUnk = 3;
  static constexpr std::int32_t kYes = 4;
  static constexpr std::int32_t kNo = 5;

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  // Reserved tokens first, then every distinct word of `texts` in byte order.
  static Vocabulary build(const std::vector<std::string>& texts) {
    std::set<std::string> words;
    for (const auto& t : texts)
      for (const auto& w : split_words(t)) words.emplace(t.substr(w.begin, w.end - w.begin));
    std::vector<std::string> extra;
    for (const auto& w : words)
      if (!reserved().contains(w)) extra.push_back(w);
    return Vocabulary(extra);
  }

  std::size_t size() const { return tokens_.size(); }
  std::int32_t yes() const { return kYes; }
  std::int32_t no() const { return kNo; }

  std::int32_t id(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    return it == ids_.end() ? kUnk : it->second;
  }
  bool contains(std::string_view token) const { return ids_.contains(std::string(token)); }
  const std::string& token(std::int32_t id) const {
    RELLAX_REQUIRE(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), "vocabulary: id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  // One token per line; line number (from 0) is the id.
  void write(std::ostream& out) const {
    for (const auto& t : tokens_) out << t << "\n";
  }
  static Vocabulary read(std::istream& in) {
    std::vector<std::string> all;
    std::string line;
    while (std::getline(in, line)) all.push_back(line);
    const auto& base = base_tokens();
    if (all.size() < base.size() || !std::equal(base.begin(), base.end(), all.begin()))
      throw LoadError("vocabulary file: reserved tokens missing or reordered");
    return Vocabulary(std::vector<std::string>(all.begin() + static_cast<std::ptrdiff_t>(base.size()), all.end()));
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  explicit Vocabulary(const std::vector<std::string>& extra) {
    tokens_ = base_tokens();
    tokens_.insert(tokens_.end(), extra.begin(), extra.end());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (ids_.contains(tokens_[i])) throw LoadError("vocabulary: duplicate token '" + tokens_[i] + "'");
      ids_[tokens_[i]] = static_cast<std::int32_t>(i);
    }
  }

  static const std::vector<std::string>& base_tokens() {
    static const std::vector<std::string> b = {"<pad>", "<bos>", "<eos>", "<unk>", "Yes", "No"};
    return b;
  }
  static const std::set<std::string>& reserved() {
    static const std::set<std::string> r(base_tokens().begin(), base_tokens().end());
    return r;
  }

  std::vector<std::string> tokens_;
  std::map<std::string, std::int32_t> ids_;
};

// Every text the template can emit for this catalog.
inline Vocabulary build_vocabulary(const Catalog& catalog, const PromptTemplate& t) {
  std::vector<std::string> texts = {t.history_intro, t.history_item, t.liked, t.disliked, t.target, t.question};
  for (const auto& [id, item] : catalog.items) {
    texts.push_back(render_item_description(item, t));
    texts.push_back(render_item_mention(item, t));
  }
  for (const auto& [id, user] : catalog.users) texts.push_back(render_profile(user, t));
  return Vocabulary::build(texts);
}

struct TokenSpan {
  std::size_t first = 0;
  std::size_t last = 0;  // inclusive; the soft token (if any) goes right after
};

struct TokenizedPrompt {
  std::vector<std::int32_t> tokens;   // starts with <bos>
  std::vector<TokenSpan> item_spans;  // history items, then the target
  std::int32_t answer = -1;           // Yes/No id when known

  std::size_t size() const { return tokens.size(); }
};

inline TokenizedPrompt tokenize(std::string_view text, const Vocabulary& vocab, std::span<const CharSpan> spans = {}) {
  TokenizedPrompt tp;
  const auto words = split_words(text);
  tp.tokens.reserve(words.size() + 1);
  tp.tokens.push_back(Vocabulary::kBos);
  for (const auto& w : words) tp.tokens.push_back(vocab.id(text.substr(w.begin, w.end - w.begin)));
  for (const auto& span : spans) {
    // Token index = word index + 1 because of <bos>.
    auto lo = std::lower_bound(words.begin(), words.end(), span.begin,
                               [](const WordPiece& w, std::size_t b) { return w.begin < b; });
    RELLAX_REQUIRE(lo != words.end() && lo->begin == span.begin, "tokenize: span start is not a token boundary");
    auto hi = lo;
    while (hi != words.end() && hi->end < span.end) ++hi;
    RELLAX_REQUIRE(hi != words.end() && hi->end == span.end, "tokenize: span end is not a token boundary");
    tp.item_spans.push_back({static_cast<std::size_t>(lo - words.begin()) + 1,
                             static_cast<std::size_t>(hi - words.begin()) + 1});
  }
  for (std::size_t i = 1; i < tp.item_spans.size(); ++i)
    RELLAX_REQUIRE(tp.item_spans[i - 1].last < tp.item_spans[i].first, "tokenize: item spans overlap");
  return tp;
}

inline std::string detokenize(std::span<const std::int32_t> tokens, const Vocabulary& vocab) {
  std::string out;
  for (std::int32_t id : tokens) {
    if (id == Vocabulary::kBos || id == Vocabulary::kEos || id == Vocabulary::kPad) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

inline std::int32_t answer_token(int label) { return label ? Vocabulary::kYes : Vocabulary::kNo; }

// ---------------------------------------------------------------------------
// Soft prompts

// One shared projector maps CRM item embeddings into the token-embedding space.
inline Vector spa_project(std::span<const double> item_embedding, const Mlp2& projector, Mlp2Trace* trace = nullptr) {
  if (item_embedding.size() != projector.input_dim())
    throw ContractError("spa_project: embedding dim " + std::to_string(item_embedding.size()) + " != projector input " +
                        std::to_string(projector.input_dim()));
  return mlp2_forward(projector, item_embedding, trace);
}

struct AssembledPrompt {
  Matrix embeddings;                 // rows fed to the language model
  std::vector<std::int32_t> row_token;  // token id, or -1 for a soft row
  std::vector<std::int32_t> row_item;   // item index for soft rows, else -1
  std::vector<TokenSpan> item_spans;    // updated to include the soft rows

  std::size_t size() const { return embeddings.rows(); }
};

// Inserts soft token j right after the last text token of item j. With no
// soft tokens the result is the plain token-embedding sequence.
inline AssembledPrompt assemble_soft_prompt(const TokenizedPrompt& tp, const Matrix& token_embedding,
                                            const Matrix& soft_tokens) {
  const std::size_t d = token_embedding.cols();
  const std::size_t n_soft = soft_tokens.rows();
  if (n_soft != 0 && n_soft != tp.item_spans.size())
    throw ContractError("assemble_soft_prompt: " + std::to_string(n_soft) + " soft tokens for " +
                        std::to_string(tp.item_spans.size()) + " items");
  RELLAX_REQUIRE(n_soft == 0 || soft_tokens.cols() == d, "assemble_soft_prompt: soft token dim != embedding dim");
  AssembledPrompt out;
  out.embeddings = Matrix(tp.size() + n_soft, d);
  out.row_token.reserve(out.embeddings.rows());
  out.row_item.reserve(out.embeddings.rows());
  std::size_t next_item = 0;
  std::size_t row = 0;
  for (std::size_t t = 0; t < tp.size(); ++t) {
    const std::int32_t tok = tp.tokens[t];
    RELLAX_REQUIRE(tok >= 0 && static_cast<std::size_t>(tok) < token_embedding.rows(), "assemble_soft_prompt: token id out of range");
    std::copy_n(token_embedding.row(static_cast<std::size_t>(tok)).begin(), d, out.embeddings.row(row).begin());
    out.row_token.push_back(tok);
    out.row_item.push_back(-1);
    ++row;
    if (n_soft && next_item < n_soft && tp.item_spans[next_item].last == t) {
      std::copy_n(soft_tokens.row(next_item).begin(), d, out.embeddings.row(row).begin());
      out.row_token.push_back(-1);
      out.row_item.push_back(static_cast<std::int32_t>(next_item));
      out.item_spans.push_back({tp.item_spans[next_item].first + next_item, row});
      ++row;
      ++next_item;
    }
  }
  if (n_soft == 0) out.item_spans = tp.item_spans;
  RELLAX_REQUIRE(row == out.embeddings.rows(), "assemble_soft_prompt: item span beyond prompt end");
  return out;
}

}  // namespace rellax
