#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpbert/smf.hpp"
#include "cpbert/synth.hpp"
#include "cpbert/text_score.hpp"
#include "cpbert/training.hpp"

namespace cpbert::cli {

namespace fs = std::filesystem;
using nlohmann::json;

/// Overrides shared by every command; unset fields leave the config alone.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;
  std::optional<std::size_t> max_seq_len;
  std::optional<std::string> mode;
  std::optional<std::string> ranges;  // "pos,pit,dur", each an integer or "inf"
};

/// CPBERT_LOG: 0 silent, 1 progress (default), 2 verbose.
inline int verbosity() {
  const char* v = std::getenv("CPBERT_LOG");
  return v ? std::atoi(v) : 1;
}

inline json load_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ValidationError("cannot open config " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("invalid JSON in " + p.string() + ": " + e.what());
  }
}

/// Relative paths in a config resolve against the config file's directory.
inline fs::path resolve(const fs::path& base_dir, const std::string& p) {
  fs::path q(p);
  return q.is_absolute() ? q : base_dir / q;
}

inline void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw ValidationError(what + " not found: " + p.string());
}

inline std::vector<int> parse_ranges(const std::string& s) {
  std::vector<int> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const std::string item = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (item == "inf") {
      out.push_back(kInfiniteRange);
    } else {
      try {
        std::size_t used = 0;
        const int v = std::stoi(item, &used);
        if (used != item.size()) throw std::invalid_argument(item);
        out.push_back(v);
      } catch (const std::exception&) {
        throw ValidationError("--ranges expects pos,pit,dur integers (or inf), got '" + s + "'");
      }
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.size() != 3) throw ValidationError("--ranges expects exactly three values");
  return out;
}

inline void apply_overrides(json& cfg, const Overrides& o) {
  if (o.seed) cfg["seed"] = *o.seed;
  if (o.out) cfg["out"] = o.out->string();
  if (o.max_seq_len) cfg["schedule"]["max_seq_len"] = *o.max_seq_len;
  if (o.mode) cfg["corruption"]["mode"] = to_string(corruption_mode_from_string(*o.mode));
  if (o.ranges) {
    const auto r = parse_ranges(*o.ranges);
    json arr = json::array();
    for (int v : r) arr.push_back(v >= kInfiniteRange ? json("inf") : json(v));
    cfg["corruption"]["ranges"] = arr;
  }
}

inline void echo_config(std::ostream& os, const std::string& command, const json& resolved) {
  os << "# resolved " << command << " config\n" << resolved.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// ingest

inline bool is_midi(const fs::path& p) {
  auto e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), ::tolower);
  return e == ".mid" || e == ".midi" || e == ".smf";
}

inline bool is_text_score(const fs::path& p) { return p.extension() == ".json"; }

inline Score load_score(const fs::path& p, std::vector<std::string>* warnings = nullptr) {
  if (is_midi(p)) return parse_smf_file(p, warnings);
  if (is_text_score(p)) return parse_text_score_file(p);
  throw ParseError("unsupported score file type: " + p.string());
}

/// Expands directories (recursively) into sorted score files.
inline std::vector<fs::path> collect_inputs(const std::vector<fs::path>& inputs) {
  std::set<fs::path> files;
  for (const auto& in : inputs) {
    if (!fs::exists(in)) throw ValidationError("input not found: " + in.string());
    if (fs::is_directory(in)) {
      for (const auto& e : fs::recursive_directory_iterator(in))
        if (e.is_regular_file() && (is_midi(e.path()) || is_text_score(e.path()))) files.insert(e.path());
    } else {
      files.insert(in);
    }
  }
  return {files.begin(), files.end()};
}

/// Score to tokens; seconds-unit scores go through the beat heuristic first.
inline std::vector<BarToken> score_tokens(const Score& s) {
  if (s.time_unit == TimeUnit::seconds) return tokenize_score(bp_preprocess(s).score);
  return tokenize_score(s);
}

struct IngestResult {
  json manifest;
  std::vector<std::string> errors;
};

inline IngestResult ingest(const std::vector<fs::path>& inputs, const fs::path& out_dir, std::ostream& log) {
  const auto files = collect_inputs(inputs);
  if (files.empty()) throw ValidationError("ingest: no score files found in the inputs");
  IngestResult res;
  std::vector<Piece> pieces;
  std::set<std::string> ids;
  for (const auto& f : files) {
    try {
      std::vector<std::string> warnings;
      const Score s = load_score(f, &warnings);
      for (const auto& w : warnings)
        if (verbosity() >= 2) log << "warning: " << f.string() << ": " << w << "\n";
      Piece p;
      p.id = f.stem().string();
      for (int k = 2; ids.count(p.id); ++k) p.id = f.stem().string() + "-" + std::to_string(k);
      ids.insert(p.id);
      p.source = f.filename().string();
      p.tokens = score_tokens(s);
      pieces.push_back(std::move(p));
    } catch (const std::exception& e) {
      res.errors.push_back(f.string() + ": " + e.what());
    }
  }
  if (!pieces.empty()) res.manifest = write_shards(out_dir, pieces);
  return res;
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainRun {
  json resolved;
  fs::path corpus;
  fs::path out;
  PretrainConfig config;
};

inline PretrainRun resolve_pretrain(const fs::path& config_path, const Overrides& o) {
  json cfg = load_json(config_path);
  apply_overrides(cfg, o);
  const fs::path base = config_path.parent_path();
  PretrainRun run;
  if (!cfg.contains("corpus")) throw ValidationError("pretrain config needs \"corpus\" (path to manifest.json)");
  if (!cfg.contains("seed")) throw ValidationError("pretrain config needs an explicit \"seed\"");
  run.corpus = resolve(base, cfg["corpus"].get<std::string>());
  if (fs::is_directory(run.corpus)) run.corpus /= "manifest.json";
  require_exists(run.corpus, "corpus manifest");
  run.out = resolve(base, cfg.value("out", std::string("pretrain_out")));
  run.config = cfg.get<PretrainConfig>();
  run.resolved = run.config;
  run.resolved["corpus"] = fs::absolute(run.corpus).lexically_normal().string();
  run.resolved["out"] = fs::absolute(run.out).lexically_normal().string();
  return run;
}

inline PretrainResult cmd_pretrain(const PretrainRun& run, std::ostream& out) {
  echo_config(out, "pretrain", run.resolved);
  const auto corpus = read_corpus(run.corpus);
  fs::create_directories(run.out);
  std::ofstream(run.out / "resolved_config.json") << run.resolved.dump(2) << "\n";
  std::ofstream log(run.out / "metrics.jsonl", std::ios::trunc);
  PretrainResult res = pretrain(corpus, run.config, &log);
  res.checkpoint().save(run.out / "checkpoint.ckpt");
  out << "best step " << res.best_step << ", validation reconstruction accuracy " << res.best_accuracy << "\n";
  out << "checkpoint: " << (run.out / "checkpoint.ckpt").string() << "\n";
  return res;
}

// ---------------------------------------------------------------------------
// finetune / eval

/// Dataset file: {"pieces": [{"id", "score", "labels"?}...]}. A piece without
/// "labels" takes velocity classes (VE) from its score.
inline std::vector<LabeledPiece> load_dataset(const fs::path& dataset_path, const TaskSpec& spec) {
  const json d = load_json(dataset_path);
  const fs::path base = dataset_path.parent_path();
  std::vector<LabeledPiece> out;
  for (const auto& e : d.at("pieces")) {
    LabeledPiece p;
    p.id = e.at("id").get<std::string>();
    const fs::path score_path = resolve(base, e.at("score").get<std::string>());
    require_exists(score_path, "score");
    Score s = load_score(score_path);
    std::vector<std::size_t> order;
    if (s.time_unit == TimeUnit::seconds) {
      auto bp = bp_preprocess(s);
      s = std::move(bp.score);
      order = std::move(bp.order);
    }
    p.tokens = tokenize_score(s);
    auto reorder = [&](std::vector<int> labels) {
      if (order.empty() || labels.size() != order.size()) return labels;
      std::vector<int> r;
      for (std::size_t i : order) r.push_back(labels[i]);
      return r;
    };
    if (e.contains("labels")) {
      const fs::path label_path = resolve(base, e["labels"].get<std::string>());
      require_exists(label_path, "label file");
      const LabelFile lf = parse_label_record(load_json(label_path));
      if (lf.piece != p.id) throw ValidationError("label file " + label_path.string() + " is for piece " + lf.piece);
      if (lf.level == LabelLevel::sequence) {
        if (lf.labels.size() != 1) throw ValidationError("sequence label file must hold one label: " + label_path.string());
        p.label = lf.labels[0];
      } else if (lf.level == LabelLevel::tatum) {
        p.tatum_labels = lf.labels;
        p.note_labels = project_tatum_labels(onset_tatums(p.tokens), lf.labels);
      } else {
        p.note_labels = reorder(lf.labels);
      }
    } else if (spec.name == "VE") {
      p.note_labels = velocity_labels(s);
    } else {
      throw ValidationError("piece " + p.id + " has no labels");
    }
    out.push_back(std::move(p));
  }
  validate_dataset(spec, out);
  return out;
}

struct TaskRun {
  json resolved;
  TaskSpec spec;
  FinetuneConfig config;
  fs::path checkpoint;
  fs::path dataset;
  fs::path out;
  SplitManifest split;
};

inline TaskRun resolve_task(const fs::path& config_path, const Overrides& o, bool need_checkpoint = true) {
  json cfg = load_json(config_path);
  apply_overrides(cfg, o);
  const fs::path base = config_path.parent_path();
  TaskRun run;
  if (!cfg.contains("seed")) throw ValidationError("config needs an explicit \"seed\"");
  if (!cfg.contains("task")) throw ValidationError("config needs a \"task\" section");
  run.spec = task_spec_from_json(cfg["task"]);
  run.config = cfg.get<FinetuneConfig>();
  if (need_checkpoint) {
    run.checkpoint = resolve(base, cfg.at("checkpoint").get<std::string>());
    require_exists(run.checkpoint, "checkpoint");
  }
  run.dataset = resolve(base, cfg.at("dataset").get<std::string>());
  require_exists(run.dataset, "dataset");
  if (cfg.contains("split")) {
    if (cfg["split"].is_string()) {
      const fs::path sp = resolve(base, cfg["split"].get<std::string>());
      require_exists(sp, "split manifest");
      run.split = parse_split_manifest(load_json(sp));
    } else {
      run.split = parse_split_manifest(cfg["split"]);
    }
  } else if (run.spec.folds >= 2) {
    run.split.folds = run.spec.folds;
    run.split.seed = run.spec.fold_seed;
  } else {
    throw ValidationError("config needs a \"split\" (fixed lists or {\"folds\", \"seed\"})");
  }
  run.out = resolve(base, cfg.value("out", std::string("finetune_out")));
  run.resolved = run.config;
  run.resolved["task"] = to_json(run.spec);
  if (need_checkpoint) run.resolved["checkpoint"] = fs::absolute(run.checkpoint).lexically_normal().string();
  run.resolved["dataset"] = fs::absolute(run.dataset).lexically_normal().string();
  run.resolved["out"] = fs::absolute(run.out).lexically_normal().string();
  if (run.split.folds) run.resolved["split"] = {{"folds", run.split.folds}, {"seed", run.split.seed}};
  else run.resolved["split"] = {{"train", run.split.train}, {"valid", run.split.valid}, {"test", run.split.test}};
  return run;
}

inline std::vector<LabeledPiece> select(const std::vector<LabeledPiece>& all, const std::vector<std::string>& ids) {
  std::map<std::string, const LabeledPiece*> by_id;
  for (const auto& p : all) by_id[p.id] = &p;
  std::vector<LabeledPiece> out;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ValidationError("split references unknown piece " + id);
    out.push_back(*it->second);
  }
  return out;
}

inline Checkpoint task_checkpoint(TaskModel<float>& m, const TaskSpec& spec, const json& run_config) {
  Checkpoint c;
  c.header["kind"] = "task";
  c.header["model_config"] = m.config;
  c.header["task"] = to_json(spec);
  c.header["run_config"] = run_config;
  c.store_module<float>(m);
  return c;
}

inline TaskModel<float> task_model_from_checkpoint(const Checkpoint& c) {
  if (c.header.value("kind", std::string()) != "task") throw ValidationError("not a task checkpoint");
  const TaskSpec spec = task_spec_from_json(c.header.at("task"));
  const ModelConfig mc = c.header.at("model_config").get<ModelConfig>();
  Rng rng(0);
  TaskModel<float> m = make_task_model(mc, EncoderWeights<float>::init(mc, rng), spec, 0);
  c.load_module<float>(m);
  return m;
}

struct FinetuneReport {
  std::vector<std::pair<std::string, MetricReport>> rows;
  double mean = 0.0;
};

inline FinetuneReport cmd_finetune(const TaskRun& run, std::ostream& out) {
  echo_config(out, "finetune", run.resolved);
  const Checkpoint ck = Checkpoint::load(run.checkpoint);
  const PretrainModel<float> pre = pretrain_model_from_checkpoint(ck);
  const auto pieces = load_dataset(run.dataset, run.spec);
  fs::create_directories(run.out);
  std::ofstream(run.out / "resolved_config.json") << run.resolved.dump(2) << "\n";
  std::ofstream log(run.out / "metrics.jsonl", std::ios::trunc);
  std::ofstream report(run.out / "report.jsonl", std::ios::trunc);
  FinetuneReport fr;
  if (run.split.folds >= 2) {
    std::vector<std::string> ids;
    for (const auto& p : pieces) ids.push_back(p.id);
    FoldResult r = finetune_kfold(pre.config, pre.encoder, run.spec, pieces, run.split.folds, run.split.seed, run.config, &log);
    for (std::size_t i = 0; i < r.folds.size(); ++i) {
      const std::string label = "fold" + std::to_string(i);
      fr.rows.emplace_back(label, r.folds[i].test_report);
      json j = to_json_record(r.folds[i].test_report, "test");
      j["fold"] = i;
      report << j.dump() << "\n";
      task_checkpoint(r.folds[i].best, run.spec, run.resolved).save(run.out / ("task_model_" + label + ".ckpt"));
    }
    MetricReport mean;
    mean.metric = to_string(run.spec.metric);
    mean.value = r.mean_test;
    for (const auto& f : r.folds) mean.support += f.test_report.support;
    fr.rows.emplace_back("mean", mean);
    report << json{{"fold", "mean"}, {"metric", mean.metric}, {"value", mean.value}, {"split", "test"}}.dump() << "\n";
    fr.mean = r.mean_test;
  } else {
    const auto train = select(pieces, run.split.train);
    const auto valid = select(pieces, run.split.valid);
    const auto test = select(pieces, run.split.test);
    FinetuneResult r = finetune(pre.config, pre.encoder, run.spec, train, valid, test, run.config, &log);
    fr.rows.emplace_back("valid", r.valid_report);
    report << to_json_record(r.valid_report, "valid").dump() << "\n";
    if (!test.empty()) {
      fr.rows.emplace_back("test", r.test_report);
      report << to_json_record(r.test_report, "test").dump() << "\n";
    }
    fr.mean = test.empty() ? r.best_valid : r.test_report.value;
    task_checkpoint(r.best, run.spec, run.resolved).save(run.out / "task_model.ckpt");
  }
  write_summary_table(out, fr.rows);
  return fr;
}

/// Scores a task checkpoint on the split named by "eval_split" (default test).
inline MetricReport cmd_eval(const fs::path& config_path, const Overrides& o, std::ostream& out) {
  json cfg = load_json(config_path);
  TaskRun run = resolve_task(config_path, o, true);
  const std::string which = cfg.value("eval_split", std::string("test"));
  run.resolved["eval_split"] = which;
  echo_config(out, "eval", run.resolved);
  const TaskModel<float> m = task_model_from_checkpoint(Checkpoint::load(run.checkpoint));
  const auto pieces = load_dataset(run.dataset, run.spec);
  std::vector<LabeledPiece> chosen;
  if (which == "all" || run.split.folds) chosen = pieces;
  else if (which == "train") chosen = select(pieces, run.split.train);
  else if (which == "valid") chosen = select(pieces, run.split.valid);
  else if (which == "test") chosen = select(pieces, run.split.test);
  else throw ValidationError("eval_split must be train, valid, test or all");
  const MetricReport r = evaluate_task(m, run.spec, chosen, run.config.schedule.max_seq_len);
  fs::create_directories(run.out);
  std::ofstream(run.out / "eval.jsonl", std::ios::trunc) << to_json_record(r, which).dump() << "\n";
  write_summary_table(out, {{which, r}});
  for (const auto& w : r.warnings) out << "warning: " << w << "\n";
  return r;
}

// ---------------------------------------------------------------------------
// inspect

struct InspectSummary {
  std::size_t pieces = 0;
  std::size_t notes = 0;
  std::size_t manifest_notes = 0;
  std::size_t parameters = 0;
  std::size_t expected_parameters = 0;
};

/// Column files: hist_<attr>.tsv (value count), corruption_<attr>.tsv
/// (delta count) and audit_summary.json.
inline InspectSummary inspect_shards(const fs::path& manifest_path, const CorruptionConfig& corruption,
                                     std::size_t max_seq_len, const fs::path& out_dir, std::ostream& out) {
  const auto manifest = read_manifest(manifest_path);
  const auto corpus = read_corpus(manifest_path);
  fs::create_directories(out_dir);
  InspectSummary s;
  s.pieces = corpus.size();
  s.manifest_notes = manifest.at("total_notes").get<std::size_t>();
  std::array<std::map<int, std::size_t>, kNumAttributes> hist;
  for (const auto& p : corpus)
    for (const auto& t : p.tokens) {
      ++s.notes;
      for (int a = 0; a < kNumAttributes; ++a) ++hist[a][t.token[a]];
    }
  for (int a = 0; a < kNumAttributes; ++a) {
    std::ofstream f(out_dir / (std::string("hist_") + kAttributeNames[a] + ".tsv"));
    f << "value\tcount\n";
    for (const auto& [v, c] : hist[a]) f << v << "\t" << c << "\n";
  }

  Rng rng(corruption.seed);
  std::array<std::map<int, std::size_t>, kNumAttributes> deltas;
  std::size_t segments = 0, corrupted = 0, changed = 0, masked = 0;
  for (const auto& p : corpus)
    for (const auto& seg : segment(p.tokens, max_seq_len, p.id)) {
      auto [c, rec] = corrupt(seg, corruption, rng);
      ++segments;
      corrupted += rec.corrupted_indices.size();
      for (std::size_t k = 0; k < rec.corrupted_indices.size(); ++k) {
        const CPToken& now = c.tokens[rec.corrupted_indices[k]];
        if (now == CPToken::mask()) {
          ++masked;
          continue;
        }
        for (int a = 0; a < kNumAttributes; ++a) {
          const int d = now[a] - rec.originals[k][a];
          ++deltas[a][d];
          changed += d != 0;
        }
      }
    }
  for (int a = 0; a < kNumAttributes; ++a) {
    std::ofstream f(out_dir / (std::string("corruption_") + kAttributeNames[a] + ".tsv"));
    f << "delta\tcount\n";
    for (const auto& [d, c] : deltas[a]) f << d << "\t" << c << "\n";
  }
  const json audit{{"segments", segments},
                   {"corrupted_notes", corrupted},
                   {"changed_attributes", changed},
                   {"masked_notes", masked},
                   {"corruption", corruption}};
  std::ofstream(out_dir / "audit_summary.json") << audit.dump(2) << "\n";
  out << "pieces " << s.pieces << "\nnotes " << s.notes << "\nmanifest total_notes " << s.manifest_notes << "\n";
  out << "corruption: " << audit.dump() << "\n";
  return s;
}

/// Parameter count of the stored model group versus the count implied by its config.
inline InspectSummary inspect_checkpoint(const fs::path& path, std::ostream& out) {
  const Checkpoint c = Checkpoint::load(path);
  InspectSummary s;
  for (const auto& t : c.tensors)
    if (t.group == "model") s.parameters += static_cast<std::size_t>(t.value.size());
  const ModelConfig mc = c.header.at("model_config").get<ModelConfig>();
  const std::string kind = c.header.value("kind", std::string("pretrain"));
  if (kind == "task") {
    TaskModel<float> m = task_model_from_checkpoint(c);
    s.expected_parameters = parameter_count<float>(m);
  } else {
    PretrainModel<float> m = PretrainModel<float>::init(mc, 0);
    s.expected_parameters = parameter_count<float>(m);
  }
  json h = c.header;
  h.erase("run_config");
  out << "kind " << kind << "\nparameters " << s.parameters << "\nexpected " << s.expected_parameters << "\n";
  out << "header " << h.dump() << "\n";
  return s;
}

/// Loss curves from a metrics log: one curve_<split>_<metric>.tsv per series.
inline std::size_t inspect_log(const fs::path& log_path, const fs::path& out_dir, std::ostream& out) {
  std::ifstream in(log_path);
  if (!in) throw ParseError("cannot open metrics log " + log_path.string());
  std::map<std::string, std::vector<std::pair<std::size_t, double>>> series;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError("metrics log line " + std::to_string(n + 1) + ": " + e.what());
    }
    series[j.at("split").get<std::string>() + "_" + j.at("metric").get<std::string>()].emplace_back(
        j.at("step").get<std::size_t>(), j.at("value").get<double>());
    ++n;
  }
  fs::create_directories(out_dir);
  for (const auto& [name, pts] : series) {
    std::ofstream f(out_dir / ("curve_" + name + ".tsv"));
    f << "step\tvalue\n";
    for (const auto& [step, v] : pts) f << step << "\t" << v << "\n";
  }
  out << "records " << n << "\nseries " << series.size() << "\n";
  return n;
}

// ---------------------------------------------------------------------------
// synth

inline std::size_t cmd_synth(std::size_t n_pieces, std::uint64_t seed, const fs::path& out_dir, std::ostream& out) {
  fs::create_directories(out_dir);
  Rng rng(seed);
  for (std::size_t i = 0; i < n_pieces; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "synth-%04zu.json", i);
    std::ofstream(out_dir / name) << write_text_score(synth_score(rng)) << "\n";
  }
  out << "wrote " << n_pieces << " scores to " << out_dir.string() << "\n";
  return n_pieces;
}

}  // namespace cpbert::cli
