#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpbert/error.hpp"
#include "cpbert/random.hpp"
#include "cpbert/score.hpp"
#include "cpbert/tokenizer.hpp"

namespace cpbert {

enum class TaskLevel { note, sequence };
enum class TaskMetric { accuracy, f1, csr };

inline std::string to_string(TaskMetric m) {
  return m == TaskMetric::accuracy ? "accuracy" : m == TaskMetric::f1 ? "f1" : "csr";
}

struct TaskSpec {
  std::string name;
  TaskLevel level = TaskLevel::note;
  int n_classes = 2;
  TaskMetric metric = TaskMetric::accuracy;
  int folds = 0;  // 0: fixed train/valid/test split; k >= 2: k-fold cross-validation
  std::uint64_t fold_seed = 0;
};

/// Built-in definitions of the benchmark tasks. CR/LK class counts are
/// overridable since they depend on the label vocabulary of the dataset.
inline TaskSpec task_spec(const std::string& name) {
  static const std::map<std::string, TaskSpec> table{
      {"SGC", {"SGC", TaskLevel::sequence, 5, TaskMetric::accuracy, 0, 0}},
      {"PS", {"PS", TaskLevel::sequence, 8, TaskMetric::accuracy, 5, 0}},
      {"ER", {"ER", TaskLevel::sequence, 4, TaskMetric::accuracy, 5, 0}},
      {"BP", {"BP", TaskLevel::note, 2, TaskMetric::f1, 0, 0}},
      {"DbP", {"DbP", TaskLevel::note, 2, TaskMetric::f1, 0, 0}},
      {"CR", {"CR", TaskLevel::note, 12, TaskMetric::csr, 0, 0}},
      {"LK", {"LK", TaskLevel::note, 24, TaskMetric::csr, 0, 0}},
      {"ME", {"ME", TaskLevel::note, 3, TaskMetric::accuracy, 0, 0}},
      {"VE", {"VE", TaskLevel::note, 6, TaskMetric::accuracy, 0, 0}},
      {"MNID", {"MNID", TaskLevel::note, 2, TaskMetric::f1, 5, 0}},
      {"VF", {"VF", TaskLevel::note, 240, TaskMetric::accuracy, 0, 0}},
  };
  auto it = table.find(name);
  if (it == table.end()) throw ValidationError("unknown task: " + name);
  return it->second;
}

inline void validate_task(const TaskSpec& t) {
  if (t.n_classes < 1) throw ValidationError("task " + t.name + ": n_classes must be >= 1");
  if (t.folds == 1 || t.folds < 0) throw ValidationError("task " + t.name + ": folds must be 0 or >= 2");
  if (t.metric == TaskMetric::f1 && t.n_classes != 2) throw ValidationError("task " + t.name + ": f1 needs 2 classes");
  static const std::map<std::string, TaskLevel> levels{
      {"SGC", TaskLevel::sequence}, {"PS", TaskLevel::sequence}, {"ER", TaskLevel::sequence},
      {"BP", TaskLevel::note},      {"DbP", TaskLevel::note},    {"CR", TaskLevel::note},
      {"LK", TaskLevel::note},      {"ME", TaskLevel::note},     {"VE", TaskLevel::note},
      {"MNID", TaskLevel::note},    {"VF", TaskLevel::note}};
  if (auto it = levels.find(t.name); it != levels.end() && it->second != t.level)
    throw ValidationError("task " + t.name + " has the wrong level");
}

inline TaskSpec task_spec_from_json(const nlohmann::json& j) {
  // Names outside the built-in table define a custom task, which must state its level.
  TaskSpec t;
  const std::string name = j.value("name", std::string());
  if (!name.empty() && !j.contains("level")) t = task_spec(name);
  else if (!name.empty()) {
    try {
      t = task_spec(name);
    } catch (const ValidationError&) {
      t.name = name;
    }
  }
  if (j.contains("level")) {
    const auto lv = j["level"].get<std::string>();
    if (lv == "note") t.level = TaskLevel::note;
    else if (lv == "sequence") t.level = TaskLevel::sequence;
    else throw ValidationError("unknown task level: " + lv);
  }
  t.n_classes = j.value("n_classes", t.n_classes);
  if (j.contains("metric")) {
    const auto m = j["metric"].get<std::string>();
    if (m == "accuracy") t.metric = TaskMetric::accuracy;
    else if (m == "f1") t.metric = TaskMetric::f1;
    else if (m == "csr") t.metric = TaskMetric::csr;
    else throw ValidationError("unknown metric: " + m);
  }
  t.folds = j.value("folds", t.folds);
  t.fold_seed = j.value("fold_seed", t.fold_seed);
  if (t.name.empty()) t.name = j.value("name", std::string("custom"));
  validate_task(t);
  return t;
}

inline nlohmann::json to_json(const TaskSpec& t) {
  return {{"name", t.name},
          {"level", t.level == TaskLevel::note ? "note" : "sequence"},
          {"n_classes", t.n_classes},
          {"metric", to_string(t.metric)},
          {"folds", t.folds},
          {"fold_seed", t.fold_seed}};
}

// ---------------------------------------------------------------------------
// Performance-MIDI pseudo-tokenization

struct BeatHeuristicOptions {
  double min_bpm = 40.0;
  double max_bpm = 200.0;
  /// Apply at most one doubling/halving instead of folding until in range.
  bool single_step = false;
};

struct BeatHeuristicResult {
  Score score;
  Rational tempo_bpm;
  Rational beat_seconds;
  std::vector<std::size_t> order;  // output note i came from input note order[i]
};

/// Tempo from the median note duration, folded by factors of 2 into
/// [40, 200] BPM, then a constant-tempo 4/4 quantization: onsets to 1/4 and
/// durations to 1/8 crotchet, downbeats every 4 crotchets from the first onset.
inline BeatHeuristicResult bp_preprocess(const Score& perf, const BeatHeuristicOptions& opt = {}) {
  if (perf.time_unit != TimeUnit::seconds) throw ValidationError("bp_preprocess: score must be in seconds");
  if (perf.notes.empty()) throw ValidationError("bp_preprocess: empty note list");
  std::vector<Rational> durs;
  for (const auto& n : perf.notes) {
    if (n.duration <= Rational(0)) throw ValidationError("bp_preprocess: non-positive duration");
    durs.push_back(n.duration);
  }
  std::sort(durs.begin(), durs.end());
  const std::size_t mid = durs.size() / 2;
  Rational beat = durs.size() % 2 ? durs[mid] : (durs[mid - 1] + durs[mid]) / Rational(2);
  // Bounded denominators keep the divisions below inside 64-bit rationals.
  auto snap = [](const Rational& x, std::int64_t max_den) {
    return x.den() > max_den ? Rational::from_double(x.to_double(), max_den) : x;
  };
  beat = snap(beat, 1 << 16);
  Rational tempo = Rational(60) / beat;
  const Rational lo = Rational::from_double(opt.min_bpm), hi = Rational::from_double(opt.max_bpm);
  for (int guard = 0; guard < 64 && (tempo < lo || tempo > hi); ++guard) {
    if (tempo < lo) tempo *= Rational(2);
    else tempo /= Rational(2);
    if (opt.single_step) break;
  }
  beat = Rational(60) / tempo;

  const Rational origin = std::min_element(perf.notes.begin(), perf.notes.end(), note_order)->onset;
  BeatHeuristicResult res;
  res.tempo_bpm = tempo;
  res.beat_seconds = beat;
  res.score.time_unit = TimeUnit::beats;
  res.score.source_meta = perf.source_meta;
  Rational last(0);
  std::vector<std::pair<Note, std::size_t>> quantized;
  for (std::size_t i = 0; i < perf.notes.size(); ++i) {
    Note q = perf.notes[i];
    const Rational on = snap(q.onset - origin, 1 << 20) / beat;
    q.onset = Rational((on * Rational(4)).round_half_up(), 4);
    q.duration = Rational(std::max<std::int64_t>(1, (snap(q.duration, 1 << 20) / beat * Rational(8)).round_half_up()), 8);
    last = std::max(last, q.onset);
    quantized.emplace_back(q, i);
  }
  std::stable_sort(quantized.begin(), quantized.end(),
                   [](const auto& a, const auto& b) { return note_order(a.first, b.first); });
  for (auto& [q, i] : quantized) {
    res.score.notes.push_back(q);
    res.order.push_back(i);
  }
  for (std::int64_t b = 0; Rational(4 * b) <= last; ++b) res.score.downbeats.push_back(Rational(4 * b));
  res.score = validate_score(std::move(res.score));
  return res;
}

// ---------------------------------------------------------------------------
// Velocity classes

/// Inclusive upper edges of pp, p, mp, mf, f; ff takes the rest up to 127.
struct VelocityBins {
  std::array<int, 5> upper{31, 47, 63, 79, 95};
};

inline int velocity_to_class(int velocity, const VelocityBins& bins = {}) {
  if (velocity < 1 || velocity > 127) throw ValidationError("velocity out of range [1,127]: " + std::to_string(velocity));
  for (int c = 0; c < 5; ++c)
    if (velocity <= bins.upper[c]) return c;
  return 5;
}

/// Note-level VE labels in score order; notes without a velocity are an error.
inline std::vector<int> velocity_labels(const Score& score, const VelocityBins& bins = {}) {
  std::vector<int> out;
  for (std::size_t i = 0; i < score.notes.size(); ++i) {
    if (!score.notes[i].velocity) throw ValidationError("note " + std::to_string(i) + " has no velocity");
    out.push_back(velocity_to_class(*score.notes[i].velocity, bins));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tatum <-> note label projection

inline std::int64_t onset_tatum(const BarToken& t) { return std::int64_t{kTatumsPerBar} * t.bar + t.token.pos; }

inline std::vector<std::int64_t> onset_tatums(const std::vector<BarToken>& tokens) {
  std::vector<std::int64_t> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(onset_tatum(t));
  return out;
}

/// Onset tatums of a 4/4-grid beat-unit score (round half up to 1/4 crotchet).
inline std::vector<std::int64_t> onset_tatums(const Score& score) {
  std::vector<std::int64_t> out;
  for (const auto& n : score.notes) out.push_back((n.onset * Rational(4)).round_half_up());
  return out;
}

/// Each note takes the label of its onset tatum.
inline std::vector<int> project_tatum_labels(const std::vector<std::int64_t>& note_tatums,
                                             const std::vector<int>& tatum_labels) {
  std::vector<int> out;
  out.reserve(note_tatums.size());
  for (std::size_t i = 0; i < note_tatums.size(); ++i) {
    const auto t = note_tatums[i];
    if (t < 0 || static_cast<std::size_t>(t) >= tatum_labels.size())
      throw ValidationError("tatum labels do not cover note " + std::to_string(i) + " (tatum " + std::to_string(t) + ")");
    out.push_back(tatum_labels[static_cast<std::size_t>(t)]);
  }
  return out;
}

inline std::vector<int> project_tatum_labels(const Score& score, const std::vector<int>& tatum_labels) {
  return project_tatum_labels(onset_tatums(score), tatum_labels);
}

/// Carries note predictions forward onto a tatum grid: tatum t takes the
/// prediction of the latest onset at or before t; simultaneous onsets vote
/// (majority, ties to the lowest class). Tatums before the first onset take
/// the first onset's prediction and add a warning.
inline std::vector<int> notes_to_tatum_predictions(const std::vector<int>& note_preds,
                                                   const std::vector<std::int64_t>& note_tatums, std::size_t n_tatums,
                                                   std::vector<std::string>* warnings = nullptr) {
  if (note_preds.size() != note_tatums.size()) throw ValidationError("notes_to_tatum_predictions: length mismatch");
  if (note_preds.empty()) throw ValidationError("notes_to_tatum_predictions: no notes");
  std::map<std::int64_t, std::map<int, int>> votes;
  for (std::size_t i = 0; i < note_preds.size(); ++i) ++votes[note_tatums[i]][note_preds[i]];
  std::map<std::int64_t, int> decided;
  for (const auto& [tatum, counts] : votes) {
    int best = counts.begin()->first, best_n = -1;
    for (const auto& [cls, n] : counts)
      if (n > best_n) {
        best = cls;
        best_n = n;
      }
    decided[tatum] = best;
  }
  std::vector<int> out(n_tatums);
  bool warned = false;
  for (std::size_t t = 0; t < n_tatums; ++t) {
    auto it = decided.upper_bound(static_cast<std::int64_t>(t));
    if (it == decided.begin()) {
      out[t] = decided.begin()->second;
      if (!warned && warnings) warnings->push_back("tatum before first onset takes the first note's prediction");
      warned = true;
    } else {
      out[t] = std::prev(it)->second;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Folds and label files

/// Seeded shuffle then round-robin assignment into k piece-level folds.
inline std::vector<std::vector<std::string>> make_folds(std::vector<std::string> piece_ids, int k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("make_folds: k must be >= 2");
  if (piece_ids.size() < static_cast<std::size_t>(k)) throw ValidationError("make_folds: too few pieces for k folds");
  Rng rng(seed);
  rng.shuffle(piece_ids);
  std::vector<std::vector<std::string>> folds(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < piece_ids.size(); ++i) folds[i % static_cast<std::size_t>(k)].push_back(piece_ids[i]);
  return folds;
}

enum class LabelLevel { note, sequence, tatum };

struct LabelFile {
  std::string piece;
  LabelLevel level = LabelLevel::note;
  std::vector<int> labels;
};

inline LabelFile parse_label_record(const nlohmann::json& j) {
  try {
    LabelFile f;
    f.piece = j.at("piece").get<std::string>();
    const auto lv = j.at("level").get<std::string>();
    if (lv == "note") f.level = LabelLevel::note;
    else if (lv == "sequence") f.level = LabelLevel::sequence;
    else if (lv == "tatum") f.level = LabelLevel::tatum;
    else throw ParseError("label file: unknown level " + lv);
    f.labels = j.at("labels").get<std::vector<int>>();
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("label file: ") + e.what());
  }
}

struct SplitManifest {
  std::vector<std::string> train, valid, test;
  int folds = 0;
  std::uint64_t seed = 0;
};

inline SplitManifest parse_split_manifest(const nlohmann::json& j) {
  SplitManifest s;
  try {
    if (j.contains("folds")) {
      s.folds = j.at("folds").get<int>();
      s.seed = j.value("seed", std::uint64_t{0});
      if (s.folds < 2) throw ParseError("split manifest: folds must be >= 2");
    } else {
      s.train = j.at("train").get<std::vector<std::string>>();
      s.valid = j.at("valid").get<std::vector<std::string>>();
      s.test = j.at("test").get<std::vector<std::string>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("split manifest: ") + e.what());
  }
  return s;
}

}  // namespace cpbert
