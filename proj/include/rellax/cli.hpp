// SPDX-License-Identifier: Apache-2.0
#pragma once

// Command-line driver. Every subcommand resolves one RunConfig (config file
// first, flags override), works inside one output directory, and reuses the
// artifacts of earlier stages there when their fingerprints still match.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "rellax/experiment.hpp"
#include "rellax/pipeline.hpp"
#include "rellax/selftest.hpp"

namespace rellax {

struct RunConfig {
  std::string out = "rellax-out";
  std::uint64_t seed = 1;

  // data
  std::string data_dir;  // MovieLens-1M directory; empty selects the synthetic corpus
  std::string encoding = "latin1";
  bool lenient = false;
  SyntheticSpec synthetic;
  std::size_t min_history = 5;

  // frozen models
  LmConfig lm;
  std::size_t lm_epochs = 2;
  std::size_t lm_prompts = 300;
  CrmConfig crm;
  std::string crm_aggregator = "target-attention";
  std::size_t crm_epochs = 6;
  std::size_t crm_history = 32;
  std::size_t d_q = 32;
  std::string item_vectors;  // optional imported semantic vectors
  std::string field = "genres";

  // tuned parts
  std::string variant = "rellax";
  AdapterConfig adapter;
  std::size_t spa_hidden = 32;

  // training and evaluation
  std::size_t shots = 2000;
  std::size_t epochs = 3;
  std::size_t batch = 8;
  double learning_rate = 3e-3;
  std::size_t k_text = 8;
  std::size_t l_id = 32;
  std::size_t test_limit = 0;  // 0 = the whole test split
};

namespace cli {

inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;
inline constexpr int kUsage = 2;

using Entries = std::vector<std::pair<std::string, std::string>>;

inline std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string quoted(const std::string& s) { return "\"" + s + "\""; }

// Each group feeds the fingerprint of the stages that depend on it.
inline Entries data_entries(const RunConfig& c) {
  return {{"data", quoted(c.data_dir)},
          {"encoding", quoted(c.encoding)},
          {"lenient", c.lenient ? "true" : "false"},
          {"users", std::to_string(c.synthetic.users)},
          {"items", std::to_string(c.synthetic.items)},
          {"genres", std::to_string(c.synthetic.genres)},
          {"min-events", std::to_string(c.synthetic.min_events)},
          {"max-events", std::to_string(c.synthetic.max_events)},
          {"label-noise", format_double(c.synthetic.label_noise)},
          {"data-seed", std::to_string(c.synthetic.seed)},
          {"min-history", std::to_string(c.min_history)}};
}

inline Entries lm_entries(const RunConfig& c) {
  return {{"seed", std::to_string(c.seed)},
          {"lm-dim", std::to_string(c.lm.dim)},
          {"lm-layers", std::to_string(c.lm.layers)},
          {"lm-heads", std::to_string(c.lm.heads)},
          {"lm-ffn", std::to_string(c.lm.ffn_dim)},
          {"lm-context", std::to_string(c.lm.context)},
          {"lm-epochs", std::to_string(c.lm_epochs)},
          {"lm-prompts", std::to_string(c.lm_prompts)}};
}

inline Entries crm_entries(const RunConfig& c) {
  return {{"seed", std::to_string(c.seed)},
          {"crm-embed-dim", std::to_string(c.crm.embed_dim)},
          {"crm-hidden-dim", std::to_string(c.crm.hidden_dim)},
          {"crm-aggregator", quoted(c.crm_aggregator)},
          {"crm-epochs", std::to_string(c.crm_epochs)},
          {"crm-history", std::to_string(c.crm_history)}};
}

inline Entries index_entries(const RunConfig& c) {
  return {{"d-q", std::to_string(c.d_q)}, {"item-vectors", quoted(c.item_vectors)}, {"field", quoted(c.field)}};
}

inline Entries tuned_entries(const RunConfig& c) {
  const VariantSettings vs = variant_settings(parse_variant(c.variant));
  return {{"variant", quoted(c.variant)},
          {"subr", vs.subr ? "true" : "false"},
          {"spa", vs.spa ? "true" : "false"},
          {"interaction", quoted(to_string(vs.kind))},
          {"rank", std::to_string(c.adapter.rank)},
          {"alpha", format_double(c.adapter.alpha)},
          {"blocks", std::to_string(c.adapter.blocks)},
          {"projector-hidden", std::to_string(c.adapter.projector_hidden)},
          {"dropout", format_double(c.adapter.dropout)},
          {"spa-hidden", std::to_string(c.spa_hidden)},
          {"shots", std::to_string(c.shots)},
          {"epochs", std::to_string(c.epochs)},
          {"batch", std::to_string(c.batch)},
          {"lr", format_double(c.learning_rate)},
          {"k-text", std::to_string(c.k_text)},
          {"l-id", std::to_string(c.l_id)}};
}

inline std::string render(const Entries& e) {
  std::string s;
  for (const auto& [k, v] : e) s += k + " = " + v + "\n";
  return s;
}

inline std::string fingerprint(std::initializer_list<Entries> groups) {
  std::string s;
  for (const auto& g : groups) s += render(g);
  return sha256_hex(s).substr(0, 16);
}

// The echo is itself a valid config file.
inline std::string config_echo(const RunConfig& c, const std::string& command, const Entries& command_entries) {
  std::string s = "# rellax run configuration\n";
  s += "out = " + quoted(c.out) + "\n";
  s += render(data_entries(c));
  s += render(lm_entries(c));
  Entries crm = crm_entries(c);
  crm.erase(crm.begin());  // seed already written
  s += render(crm);
  s += render(index_entries(c));
  s += render(tuned_entries(c));
  s += "test-limit = " + std::to_string(c.test_limit) + "\n";
  s += "\n[" + command + "]\n" + render(command_entries);
  return s;
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error("cannot write " + p.string());
  f << text;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw LoadError("cannot read " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Replaces the rows of a TSV whose first column equals `key`, keeping the
// rest, so several commands can share one file.
inline void replace_rows(const std::filesystem::path& p, const std::string& header, const std::string& key,
                         const std::vector<std::string>& rows) {
  std::vector<std::string> kept;
  if (std::filesystem::exists(p)) {
    std::istringstream in(read_file(p));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line == header) continue;
      if (line.substr(0, line.find('\t')) == key) continue;
      kept.push_back(line);
    }
  }
  std::string text = header + "\n";
  for (const auto& l : kept) text += l + "\n";
  for (const auto& l : rows) text += key + "\t" + l + "\n";
  write_file(p, text);
}

class Session {
 public:
  explicit Session(RunConfig rc) : rc_(std::move(rc)), dir_(rc_.out) {
    std::filesystem::create_directories(dir_);
    ec_.synthetic = rc_.synthetic;
    ec_.rules.min_history = rc_.min_history;
    ec_.crm = rc_.crm;
    ec_.crm.aggregator = parse_aggregator(rc_.crm_aggregator);
    ec_.crm_train.epochs = rc_.crm_epochs;
    ec_.crm_train.max_history = rc_.crm_history;
    ec_.crm_train.seed = rc_.seed;
    ec_.lm = rc_.lm;
    ec_.lm_train.epochs = rc_.lm_epochs;
    ec_.lm_train.seed = rc_.seed;
    ec_.lm_prompts = rc_.lm_prompts;
    ec_.d_q = rc_.d_q;
    ec_.seed = rc_.seed;
  }

  const RunConfig& config() const { return rc_; }
  const std::filesystem::path& dir() const { return dir_; }
  Workspace& ws() { return ws_; }

  void load_data() {
    if (data_loaded_) return;
    Corpus corpus;
    if (rc_.data_dir.empty()) {
      corpus = make_synthetic_corpus(rc_.synthetic);
    } else {
      LoadOptions opt;
      if (rc_.encoding == "latin1") opt.encoding = TextEncoding::latin1;
      else if (rc_.encoding == "utf8") opt.encoding = TextEncoding::utf8;
      else throw ContractError("unknown encoding '" + rc_.encoding + "' (latin1, utf8)");
      opt.strict = !rc_.lenient;
      corpus = load_movielens_1m(MovieLensPaths::in_directory(rc_.data_dir), opt);
    }
    attach_corpus(ws_, std::move(corpus), ec_.rules);
    if (ws_.train.empty() || ws_.test.empty()) throw ContractError("data: the train or test split is empty");
    ws_.vocab = build_vocabulary(ws_.corpus.catalog, ws_.tmpl);
    std::ostringstream ss;
    write_samples(ss, ws_.samples);
    data_digest_ = sha256_hex(ss.str());
    data_loaded_ = true;
  }

  void ensure_lm(bool force = false) {
    if (lm_ready_ && !force) return;
    load_data();
    const std::string fp = fingerprint({data_entries(rc_), lm_entries(rc_)});
    const auto path = dir_ / "lm.ckpt";
    if (!force && std::filesystem::exists(path)) {
      const Checkpoint ck = Checkpoint::load(path.string());
      if (ck.meta("fingerprint") == fp) {
        ws_.lm = lm_from_checkpoint(ck);
        lm_ready_ = true;
        return;
      }
      std::cerr << "note: lm.ckpt was built with other settings, retraining\n";
    }
    LmConfig lc = ec_.lm;
    lc.vocab_size = ws_.vocab.size();
    ws_.lm = ToyLm::create(lc, Rng(rc_.seed).split("lm"));
    ws_.lm_losses = lm_pretrain(ws_.lm, lm_pretraining_text(ws_, ec_.lm_prompts, ec_.lm_prompt_k, rc_.seed), ec_.lm_train);
    Checkpoint ck = lm_checkpoint(ws_.lm);
    ck.set_meta("fingerprint", fp);
    ck.save(path.string());
    std::ofstream vf(dir_ / "vocab.txt");
    ws_.vocab.write(vf);
    std::ofstream tf(dir_ / "template.txt");
    ws_.tmpl.write(tf);
    write_losses("lm", ws_.lm_losses);
    lm_ready_ = true;
  }

  void ensure_crm(bool force = false) {
    if (crm_ready_ && !force) return;
    load_data();
    const std::string fp = fingerprint({data_entries(rc_), crm_entries(rc_)});
    const auto path = dir_ / "crm.ckpt";
    if (!force && std::filesystem::exists(path)) {
      const Checkpoint ck = Checkpoint::load(path.string());
      if (ck.meta("fingerprint") == fp) {
        ws_.crm = crm_from_checkpoint(ck);
        crm_ready_ = true;
        return;
      }
      std::cerr << "note: crm.ckpt was built with other settings, retraining\n";
    }
    ws_.crm = CrmModel::create(ws_.corpus.catalog, ec_.crm, Rng(rc_.seed).split("crm"));
    ws_.crm_losses = crm_pretrain(ws_.crm, ws_.train, ec_.crm_train);
    Checkpoint ck = crm_checkpoint(ws_.crm);
    ck.set_meta("fingerprint", fp);
    ck.save(path.string());
    write_losses("crm", ws_.crm_losses);
    crm_ready_ = true;
  }

  void ensure_index() {
    if (index_ready_) return;
    if (rc_.item_vectors.empty()) {
      ensure_lm();
      ws_.index = build_semantic_index(ws_.corpus.catalog, ToyLmEncoder(ws_.lm, ws_.vocab, ws_.tmpl), rc_.d_q);
    } else {
      load_data();
      std::ifstream f(rc_.item_vectors);
      if (!f) throw LoadError("cannot open item vectors " + rc_.item_vectors);
      ws_.index = build_semantic_index(ws_.corpus.catalog, ImportedVectorEncoder::read(f), rc_.d_q);
    }
    index_ready_ = true;
  }

  PipelineInputs inputs() {
    ensure_lm();
    ensure_crm();
    ensure_index();
    return {&ws_.corpus.catalog, &ws_.tmpl, &ws_.vocab, &ws_.lm, &ws_.crm, &ws_.index};
  }

  VariantSettings variant() const { return variant_settings(parse_variant(rc_.variant)); }

  PromptOptions prompt() const {
    const VariantSettings vs = variant();
    return {vs.subr, vs.spa, rc_.k_text, rc_.l_id};
  }

  TunedParts fresh_tuned() {
    const VariantSettings vs = variant();
    TunedPartsConfig pc;
    pc.adapter = rc_.adapter;
    pc.adapter.kind = vs.kind;
    pc.spa = vs.spa;
    pc.spa_hidden = rc_.spa_hidden;
    inputs();
    return create_tuned_parts(ws_.lm, ws_.crm, pc, Rng(rc_.seed).split("tuned"));
  }

  std::string tuned_fingerprint() const {
    return fingerprint({data_entries(rc_), lm_entries(rc_), crm_entries(rc_), index_entries(rc_), tuned_entries(rc_)});
  }

  std::vector<InteractionSample> test_set() {
    load_data();
    std::vector<InteractionSample> t = ws_.test;
    if (rc_.test_limit && rc_.test_limit < t.size()) {
      Rng(rc_.seed).split("test-subset").shuffle(t);
      t.resize(rc_.test_limit);
      std::sort(t.begin(), t.end(), [](const auto& a, const auto& b) { return a.order < b.order; });
    }
    return t;
  }

  void write_losses(const std::string& stage, const std::vector<double>& losses) {
    std::vector<std::string> rows;
    for (std::size_t i = 0; i < losses.size(); ++i) rows.push_back(std::to_string(i) + "\t" + format_double(losses[i]));
    replace_rows(dir_ / "loss.tsv", "stage\tstep\tloss", stage, rows);
  }

  void write_echo(const std::string& command, const Entries& command_entries) {
    write_file(dir_ / "config.echo", config_echo(rc_, command, command_entries));
  }

  void write_digests(const TunedParts* tuned) {
    std::string s = "seed\t" + std::to_string(rc_.seed) + "\n";
    if (data_loaded_) s += "samples\tsha256:" + data_digest_ + "\n";
    if (lm_ready_) s += "lm\tsha256:" + lm_digest(ws_.lm) + "\n";
    if (crm_ready_) s += "crm\tsha256:" + crm_digest(ws_.crm) + "\n";
    if (tuned) s += "tuned\tsha256:" + tuned_checkpoint(*tuned).digest() + "\n";
    write_file(dir_ / "digests.txt", s);
  }

 private:
  RunConfig rc_;
  ExperimentConfig ec_;
  std::filesystem::path dir_;
  Workspace ws_;
  std::string data_digest_;
  bool data_loaded_ = false, lm_ready_ = false, crm_ready_ = false, index_ready_ = false;
};

inline const char* kMetricsHeader = "command\tvariant\taxis\tvalue\tauc\tlogloss\tacc\tsamples\tmean_positions";

inline std::string metrics_row(const std::string& variant, const std::string& axis, std::size_t value,
                               const EvalReport& r) {
  return variant + "\t" + axis + "\t" + std::to_string(value) + "\t" + num(r.auc) + "\t" + num(r.logloss) + "\t" +
         num(r.acc) + "\t" + std::to_string(r.scores.size()) + "\t" + num(r.mean_positions);
}

inline nlohmann::json report_json(const std::string& command, const std::string& variant, const std::string& axis,
                                  std::size_t value, const EvalReport& r) {
  return {{"command", command}, {"variant", variant}, {"axis", axis},     {"value", value},
          {"auc", r.auc},       {"logloss", r.logloss}, {"acc", r.acc},   {"samples", r.scores.size()},
          {"mean_positions", r.mean_positions}};
}

inline void print_report_table(std::ostream& os, const std::vector<std::pair<std::string, EvalReport>>& rows) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-14s %8s %8s %8s %8s %9s %8s\n", "row", "auc", "logloss", "acc", "samples",
                "positions", "seconds");
  os << buf;
  for (const auto& [name, r] : rows) {
    std::snprintf(buf, sizeof buf, "%-14s %8.4f %8.4f %8.4f %8zu %9.1f %8.1f\n", name.c_str(), r.auc, r.logloss, r.acc,
                  r.scores.size(), r.mean_positions, r.seconds);
    os << buf;
  }
}

inline std::string join_positions(const std::vector<std::size_t>& p) {
  std::string s;
  for (std::size_t i = 0; i < p.size(); ++i) s += (i ? "," : "") + std::to_string(p[i]);
  return s;
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_ingest(Session& s, std::ostream& os) {
  s.load_data();
  auto& ws = s.ws();
  std::ofstream f(s.dir() / "samples.tsv");
  write_samples(f, ws.samples);
  s.write_echo("ingest", {});
  s.write_digests(nullptr);
  os << "items " << ws.corpus.catalog.items.size() << ", users " << ws.corpus.catalog.users.size() << ", events "
     << ws.corpus.events.size() << ", samples " << ws.samples.size() << " (train " << ws.train.size() << ", test "
     << ws.test.size() << ")\n";
  if (ws.corpus.report.malformed)
    os << "skipped " << ws.corpus.report.malformed << " malformed lines (first: " << ws.corpus.report.problems.front()
       << ")\n";
  return kOk;
}

inline int cmd_encode(Session& s, std::ostream& os) {
  s.ensure_index();
  const auto& idx = s.ws().index;
  std::ofstream pf(s.dir() / "pca.txt");
  save_pca(pf, idx.pca);
  std::ofstream vf(s.dir() / "semantic.tsv");
  write_vector_file(vf, idx.ids, idx.reduced);
  s.write_echo("encode", {});
  s.write_digests(nullptr);
  os << "encoded " << idx.ids.size() << " items: " << idx.raw.cols() << " -> " << idx.reduced.cols() << " dims\n";
  return kOk;
}

inline int cmd_retrieve(Session& s, std::ostream& os, std::size_t samples) {
  s.ensure_index();
  auto& ws = s.ws();
  std::vector<std::string> rows;
  const std::size_t n = std::min(samples, ws.test.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& smp = ws.test[i];
    const auto h = smp.history.view();
    const auto recent = select_behaviors(h, smp.target_id, BehaviorMode::recent, s.config().k_text, nullptr);
    const auto retrieved = select_behaviors(h, smp.target_id, BehaviorMode::retrieved, s.config().k_text, &ws.index);
    std::string titles;
    for (std::size_t p : retrieved) titles += (titles.empty() ? "" : " | ") + ws.corpus.catalog.item(h[p].item_id).title;
    rows.push_back(std::to_string(i) + "\t" + std::to_string(smp.user_id) + "\t" + std::to_string(smp.target_id) + "\t" +
                   ws.corpus.catalog.item(smp.target_id).title + "\t" + join_positions(recent) + "\t" +
                   join_positions(retrieved) + "\t" + titles);
  }
  std::string text = "sample\tuser\ttarget\ttarget_title\trecent_positions\tretrieved_positions\tretrieved_titles\n";
  for (const auto& r : rows) text += r + "\n";
  write_file(s.dir() / "retrieve.tsv", text);
  s.write_echo("retrieve", {{"samples", std::to_string(samples)}});
  s.write_digests(nullptr);
  os << text;
  return kOk;
}

inline int cmd_heterogeneity(Session& s, std::ostream& os, const std::string& mode_name, std::vector<std::size_t> ks) {
  const BehaviorMode mode = parse_behavior_mode(mode_name);
  if (mode == BehaviorMode::retrieved) s.ensure_index();
  s.load_data();
  auto& ws = s.ws();
  if (ks.empty()) ks = {5, 10, 15, 20};
  std::vector<std::string> rows;
  for (std::size_t k : ks) {
    const auto r = mean_heterogeneity(ws.samples, ws.corpus.catalog, mode, k,
                                      mode == BehaviorMode::retrieved ? &ws.index : nullptr, s.config().field);
    rows.push_back(std::to_string(k) + "\t" + s.config().field + "\t" + num(r.mean_score) + "\t" + std::to_string(r.samples));
    os << "heterogeneity\t" << mode_name << "\t" << k << "\t" << num(r.mean_score) << "\t" << r.samples << "\n";
  }
  replace_rows(s.dir() / "heterogeneity.tsv", "mode\tk\tfield\tmean\tsamples", mode_name, rows);
  std::string klist;
  for (std::size_t k : ks) klist += (klist.empty() ? "" : ", ") + std::to_string(k);
  s.write_echo("heterogeneity", {{"mode", quoted(mode_name)}, {"k", "[" + klist + "]"}});
  s.write_digests(nullptr);
  return kOk;
}

inline int cmd_pretrain_lm(Session& s, std::ostream& os) {
  s.ensure_lm(true);
  const auto& l = s.ws().lm_losses;
  s.write_echo("pretrain-lm", {});
  s.write_digests(nullptr);
  if (!l.empty()) os << "lm pretraining: " << l.size() << " steps, loss " << num(l.front()) << " -> " << num(l.back()) << "\n";
  return kOk;
}

inline int cmd_pretrain_crm(Session& s, std::ostream& os) {
  s.ensure_crm(true);
  auto& ws = s.ws();
  std::vector<int> y;
  std::vector<double> p;
  for (const auto& t : s.test_set()) {
    y.push_back(t.label);
    p.push_back(crm_forward(ws.crm, crm_input(t, s.config().crm_history)).y_hat);
  }
  EvalReport r;
  r.auc = compute_auc(y, p);
  const auto la = compute_logloss_acc(y, p);
  r.logloss = la.logloss;
  r.acc = la.acc;
  r.scores = p;
  r.labels = y;
  replace_rows(s.dir() / "metrics.tsv", kMetricsHeader, "pretrain-crm", {metrics_row("crm", "none", 0, r)});
  s.write_echo("pretrain-crm", {});
  s.write_digests(nullptr);
  const auto& l = ws.crm_losses;
  if (!l.empty()) os << "crm pretraining: " << l.size() << " steps, loss " << num(l.front()) << " -> " << num(l.back()) << "\n";
  os << "crm test auc " << num(r.auc) << ", logloss " << num(r.logloss) << "\n";
  return kOk;
}

inline int cmd_train(Session& s, std::ostream& os) {
  const auto in = s.inputs();
  TunedParts tuned = s.fresh_tuned();
  const auto& rc = s.config();
  TrainConfig tc;
  tc.shots = rc.shots;
  tc.epochs = rc.epochs;
  tc.batch = rc.batch;
  tc.learning_rate = rc.learning_rate;
  tc.seed = rc.seed;
  tc.prompt = s.prompt();
  if (tc.shots > s.ws().train.size()) tc.shots = 0;  // fewer training samples than shots: use them all
  const TrainResult tr = train_rellax(tc, s.ws().train, in, tuned);
  Checkpoint ck = tuned_checkpoint(tuned);
  ck.set_meta("fingerprint", s.tuned_fingerprint());
  ck.set_meta("variant", rc.variant);
  ck.save((s.dir() / "tuned.ckpt").string());
  s.write_losses("train", tr.losses);

  const EvalReport r = evaluate(s.test_set(), in, tuned, tc.prompt);
  replace_rows(s.dir() / "metrics.tsv", kMetricsHeader, "train", {metrics_row(rc.variant, "none", 0, r)});
  write_file(s.dir() / "eval.jsonl", report_json("train", rc.variant, "none", 0, r).dump() + "\n");
  s.write_echo("train", {});
  s.write_digests(&tuned);
  os << "trained " << rc.variant << " on " << tr.samples_used << " samples, " << tr.losses.size() << " steps in "
     << num(tr.seconds) << " s\n";
  print_report_table(os, {{rc.variant, r}});
  return kOk;
}

inline TunedParts load_or_fresh(Session& s, bool zero_shot) {
  if (zero_shot) return s.fresh_tuned();
  const auto path = s.dir() / "tuned.ckpt";
  if (!std::filesystem::exists(path))
    throw ContractError("no trained parts in " + s.dir().string() + " (run train first, or pass --zero-shot)");
  const Checkpoint ck = Checkpoint::load(path.string());
  if (ck.meta("fingerprint") != s.tuned_fingerprint())
    throw ContractError("tuned.ckpt was trained with different settings (variant " + ck.meta("variant") + ")");
  s.inputs();
  return tuned_from_checkpoint(ck);
}

inline int cmd_eval(Session& s, std::ostream& os, bool zero_shot, const std::vector<std::size_t>& sweep_k,
                    const std::vector<std::size_t>& sweep_l) {
  const auto in = s.inputs();
  const TunedParts tuned = load_or_fresh(s, zero_shot);
  const auto& rc = s.config();
  const auto test = s.test_set();
  const std::string name = zero_shot ? rc.variant + "/zero-shot" : rc.variant;
  std::vector<std::string> rows;
  std::string jsonl;
  std::vector<std::pair<std::string, EvalReport>> table;
  auto add = [&](const std::string& axis, std::size_t value, const EvalReport& r) {
    rows.push_back(metrics_row(name, axis, value, r));
    jsonl += report_json("eval", name, axis, value, r).dump() + "\n";
    table.emplace_back(axis == "none" ? name : axis + "=" + std::to_string(value), r);
  };
  if (sweep_k.empty() && sweep_l.empty()) add("none", 0, evaluate(test, in, tuned, s.prompt()));
  for (const auto& row : evaluate_sweep(test, in, tuned, s.prompt(), SweepAxis::k_text, sweep_k))
    add("k_text", row.value, row.report);
  for (const auto& row : evaluate_sweep(test, in, tuned, s.prompt(), SweepAxis::l_id, sweep_l))
    add("l_id", row.value, row.report);
  replace_rows(s.dir() / "metrics.tsv", kMetricsHeader, "eval", rows);
  write_file(s.dir() / "eval.jsonl", jsonl);
  auto list = [](const std::vector<std::size_t>& v) {
    std::string t;
    for (std::size_t x : v) t += (t.empty() ? "" : ", ") + std::to_string(x);
    return "[" + t + "]";
  };
  s.write_echo("eval", {{"zero-shot", zero_shot ? "true" : "false"}, {"sweep-k", list(sweep_k)}, {"sweep-l", list(sweep_l)}});
  s.write_digests(&tuned);
  print_report_table(os, table);
  return kOk;
}

inline int cmd_case_study(Session& s, std::ostream& os, std::size_t samples, bool zero_shot) {
  const auto in = s.inputs();
  const TunedParts tuned = load_or_fresh(s, zero_shot);
  const auto test = s.test_set();
  std::string text = "sample\tuser\ttarget\tlabel\tscore\trank\titem\ttitle\trole\tattention\n";
  const std::size_t n = std::min(samples, test.size());
  for (std::size_t i = 0; i < n; ++i) {
    const CaseStudy cs = case_study(test[i], in, tuned, s.prompt());
    for (std::size_t j = 0; j < cs.item_ids.size(); ++j) {
      const bool target = j + 1 == cs.item_ids.size();
      text += std::to_string(i) + "\t" + std::to_string(cs.user_id) + "\t" + std::to_string(cs.target_id) + "\t" +
              std::to_string(cs.label) + "\t" + num(cs.score) + "\t" + std::to_string(j) + "\t" +
              std::to_string(cs.item_ids[j]) + "\t" + s.ws().corpus.catalog.item(cs.item_ids[j]).title + "\t" +
              (target ? "target" : "history") + "\t" + num(cs.attention.item_mass[j]) + "\n";
    }
  }
  write_file(s.dir() / "attention.tsv", text);
  s.write_echo("case-study", {{"samples", std::to_string(samples)}, {"zero-shot", zero_shot ? "true" : "false"}});
  s.write_digests(&tuned);
  os << text;
  return kOk;
}

inline int cmd_selftest(std::ostream& os) {
  bool ok = true;
  for (const auto& r : run_selftest()) {
    os << (r.passed ? "PASS  " : "FAIL  ") << r.name << "  (" << r.detail << ")\n";
    ok = ok && r.passed;
  }
  os << (ok ? "selftest: all checks passed\n" : "selftest: FAILED\n");
  return ok ? kOk : kFailure;
}

}  // namespace cli

// Parses argv and runs one subcommand. Returns the process exit status.
inline int run_command(int argc, const char* const* argv, std::ostream& os = std::cout, std::ostream& err = std::cerr) {
  RunConfig rc;
  CLI::App app{"rellax: semantic retrieval, soft prompts and CFLoRA adapters for CTR prediction", "rellax"};
  app.set_config("--config", "", "TOML/INI config file; command-line flags override it");
  app.fallthrough();
  app.require_subcommand(1);

  app.add_option("--out", rc.out, "Output directory")->capture_default_str();
  app.add_option("--seed", rc.seed, "Root seed, split by stage name")->capture_default_str();
  app.add_option("--data", rc.data_dir, "MovieLens-1M directory (ratings.dat, movies.dat, users.dat); synthetic if empty");
  app.add_option("--encoding", rc.encoding, "Text encoding of .dat files: latin1 or utf8")->capture_default_str();
  app.add_flag("--lenient", rc.lenient, "Count malformed lines instead of failing");
  app.add_option("--users", rc.synthetic.users, "Synthetic users")->capture_default_str();
  app.add_option("--items", rc.synthetic.items, "Synthetic items")->capture_default_str();
  app.add_option("--genres", rc.synthetic.genres, "Synthetic genres")->capture_default_str();
  app.add_option("--min-events", rc.synthetic.min_events, "Synthetic events per user, lower bound")->capture_default_str();
  app.add_option("--max-events", rc.synthetic.max_events, "Synthetic events per user, upper bound")->capture_default_str();
  app.add_option("--label-noise", rc.synthetic.label_noise, "Synthetic label flip rate")->capture_default_str();
  app.add_option("--data-seed", rc.synthetic.seed, "Synthetic corpus seed")->capture_default_str();
  app.add_option("--min-history", rc.min_history, "Earlier events required per sample")->capture_default_str();
  app.add_option("--lm-dim", rc.lm.dim, "Language model width")->capture_default_str();
  app.add_option("--lm-layers", rc.lm.layers, "Language model layers")->capture_default_str();
  app.add_option("--lm-heads", rc.lm.heads, "Attention heads")->capture_default_str();
  app.add_option("--lm-ffn", rc.lm.ffn_dim, "Feed-forward width")->capture_default_str();
  app.add_option("--lm-context", rc.lm.context, "Context limit in positions")->capture_default_str();
  app.add_option("--lm-epochs", rc.lm_epochs, "Base model pretraining epochs")->capture_default_str();
  app.add_option("--lm-prompts", rc.lm_prompts, "Prompts added to the pretraining text")->capture_default_str();
  app.add_option("--crm-embed-dim", rc.crm.embed_dim, "CRM embedding width")->capture_default_str();
  app.add_option("--crm-hidden-dim", rc.crm.hidden_dim, "CRM representation width")->capture_default_str();
  app.add_option("--crm-aggregator", rc.crm_aggregator, "target-attention or mean-pooling")->capture_default_str();
  app.add_option("--crm-epochs", rc.crm_epochs, "CRM pretraining epochs")->capture_default_str();
  app.add_option("--crm-history", rc.crm_history, "Behaviors the CRM sees during pretraining")->capture_default_str();
  app.add_option("--d-q", rc.d_q, "PCA output dimension for retrieval")->capture_default_str();
  app.add_option("--item-vectors", rc.item_vectors, "Imported item vectors (id<TAB>v1,v2,...) instead of the toy encoder");
  app.add_option("--field", rc.field, "Item attribute used for heterogeneity")->capture_default_str();
  app.add_option("--variant", rc.variant, "rellax, rella, identity-W (tallrec) or ilora")->capture_default_str();
  app.add_option("--rank", rc.adapter.rank, "Adapter rank")->capture_default_str();
  app.add_option("--alpha", rc.adapter.alpha, "Adapter alpha (scale = alpha / rank)")->capture_default_str();
  app.add_option("--blocks", rc.adapter.blocks, "Blocks of the block-diagonal W")->capture_default_str();
  app.add_option("--projector-hidden", rc.adapter.projector_hidden, "Hidden width of W projectors")->capture_default_str();
  app.add_option("--dropout", rc.adapter.dropout, "Adapter dropout during training")->capture_default_str();
  app.add_option("--spa-hidden", rc.spa_hidden, "Hidden width of the soft-prompt projector")->capture_default_str();
  app.add_option("--shots", rc.shots, "Few-shot training samples (0 = whole split)")->capture_default_str();
  app.add_option("--epochs", rc.epochs, "Training epochs")->capture_default_str();
  app.add_option("--batch", rc.batch, "Samples per optimizer step")->capture_default_str();
  app.add_option("--lr", rc.learning_rate, "Peak learning rate (linear decay to zero)")->capture_default_str();
  app.add_option("--k-text", rc.k_text, "Behaviors rendered as text")->capture_default_str();
  app.add_option("--l-id", rc.l_id, "Behaviors seen by the CRM")->capture_default_str();
  app.add_option("--test-limit", rc.test_limit, "Seeded random subset of the test split (0 = all)")->capture_default_str();

  app.add_subcommand("ingest", "Parse the data and cache samples.tsv");
  app.add_subcommand("encode", "Semantic item vectors and PCA");
  auto* retrieve = app.add_subcommand("retrieve", "Dump recent vs retrieved behaviors for test samples");
  std::size_t retrieve_n = 10;
  retrieve->add_option("--samples", retrieve_n, "Test samples to dump")->capture_default_str();
  auto* het = app.add_subcommand("heterogeneity", "Mean heterogeneity of behavior sequences");
  std::string het_mode = "recent";
  std::vector<std::size_t> het_k;
  het->add_option("--mode", het_mode, "recent or retrieved")->capture_default_str();
  het->add_option("--k", het_k, "Sequence lengths (default 5,10,15,20)")->delimiter(',');
  app.add_subcommand("pretrain-crm", "Pretrain the CRM");
  app.add_subcommand("pretrain-lm", "Pretrain the base language model");
  app.add_subcommand("train", "Train the tuned parts of one variant");
  auto* ev = app.add_subcommand("eval", "Evaluate the trained (or zero-shot) parts");
  bool zero_shot = false;
  std::vector<std::size_t> sweep_k, sweep_l;
  ev->add_flag("--zero-shot", zero_shot, "Evaluate freshly initialized parts");
  ev->add_option("--sweep-k", sweep_k, "Comma-separated K values")->delimiter(',');
  ev->add_option("--sweep-l", sweep_l, "Comma-separated L values")->delimiter(',');
  auto* cs = app.add_subcommand("case-study", "Attention mass on each rendered item");
  std::size_t cs_n = 3;
  bool cs_zero = false;
  cs->add_option("--samples", cs_n, "Test samples to report")->capture_default_str();
  cs->add_flag("--zero-shot", cs_zero, "Use freshly initialized parts");
  app.add_subcommand("selftest", "Run the invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    os << app.help();
    return cli::kOk;
  } catch (const CLI::CallForAllHelp& e) {
    os << app.help("", CLI::AppFormatMode::All);
    return cli::kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return cli::kUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "selftest") return cli::cmd_selftest(os);
    parse_variant(rc.variant);
    cli::Session s(rc);
    if (command == "ingest") return cli::cmd_ingest(s, os);
    if (command == "encode") return cli::cmd_encode(s, os);
    if (command == "retrieve") return cli::cmd_retrieve(s, os, retrieve_n);
    if (command == "heterogeneity") return cli::cmd_heterogeneity(s, os, het_mode, het_k);
    if (command == "pretrain-crm") return cli::cmd_pretrain_crm(s, os);
    if (command == "pretrain-lm") return cli::cmd_pretrain_lm(s, os);
    if (command == "train") return cli::cmd_train(s, os);
    if (command == "eval") return cli::cmd_eval(s, os, zero_shot, sweep_k, sweep_l);
    if (command == "case-study") return cli::cmd_case_study(s, os, cs_n, cs_zero);
  } catch (const std::exception& e) {
    err << "rellax " << command << ": " << e.what() << "\n";
    return cli::kFailure;
  }
  return cli::kUsage;
}

}  // namespace rellax
