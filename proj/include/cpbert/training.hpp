#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpbert/checkpoint.hpp"
#include "cpbert/corruption.hpp"
#include "cpbert/metrics.hpp"
#include "cpbert/model.hpp"
#include "cpbert/optimizer.hpp"
#include "cpbert/shards.hpp"
#include "cpbert/tasks.hpp"

namespace cpbert {

// Stream ordinals for derive_seed(run_seed, ordinal).
namespace seed_stream {
inline constexpr std::uint64_t split = 1;
inline constexpr std::uint64_t init = 2;
inline constexpr std::uint64_t batch_order = 3;
inline constexpr std::uint64_t train_corruption = 4;
inline constexpr std::uint64_t valid_corruption = 5;
inline constexpr std::uint64_t dropout = 6;
}  // namespace seed_stream

struct ScheduleConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 12;
  std::size_t eval_interval = 100;
  std::size_t max_seq_len = 512;
  double valid_fraction = 0.15;
  std::size_t max_valid_segments = 0;  // 0 keeps all
  bool use_pianoroll = true;
  std::size_t log_interval = 1;

  void validate() const {
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (eval_interval < 1) throw ValidationError("eval_interval must be >= 1");
    if (max_seq_len < 1) throw ValidationError("max_seq_len must be >= 1");
    if (!(valid_fraction >= 0.0 && valid_fraction < 1.0)) throw ValidationError("valid_fraction must lie in [0,1)");
    if (log_interval < 1) throw ValidationError("log_interval must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const ScheduleConfig& s) {
  j = nlohmann::json{{"steps", s.steps},
                     {"batch_size", s.batch_size},
                     {"eval_interval", s.eval_interval},
                     {"max_seq_len", s.max_seq_len},
                     {"valid_fraction", s.valid_fraction},
                     {"max_valid_segments", s.max_valid_segments},
                     {"use_pianoroll", s.use_pianoroll},
                     {"log_interval", s.log_interval}};
}

inline void from_json(const nlohmann::json& j, ScheduleConfig& s) {
  s.steps = j.value("steps", s.steps);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.eval_interval = j.value("eval_interval", s.eval_interval);
  s.max_seq_len = j.value("max_seq_len", s.max_seq_len);
  s.valid_fraction = j.value("valid_fraction", s.valid_fraction);
  s.max_valid_segments = j.value("max_valid_segments", s.max_valid_segments);
  s.use_pianoroll = j.value("use_pianoroll", s.use_pianoroll);
  s.log_interval = j.value("log_interval", s.log_interval);
  s.validate();
}

struct PretrainConfig {
  ModelConfig model;
  OptimizerConfig optimizer;
  CorruptionConfig corruption;
  ScheduleConfig schedule;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = nlohmann::json{{"model", c.model},
                     {"optimizer", c.optimizer},
                     {"corruption", c.corruption},
                     {"schedule", c.schedule},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
  if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
  if (j.contains("optimizer")) c.optimizer = j["optimizer"].get<OptimizerConfig>();
  if (j.contains("corruption")) c.corruption = j["corruption"].get<CorruptionConfig>();
  if (j.contains("schedule")) c.schedule = j["schedule"].get<ScheduleConfig>();
  c.seed = j.value("seed", c.seed);
}

/// Line-delimited {step, split, metric, value} records.
class MetricsLog {
 public:
  explicit MetricsLog(std::ostream* os = nullptr) : os_(os) {}

  void record(std::size_t step, const std::string& split, const std::string& metric, double value) {
    nlohmann::json j{{"step", step}, {"split", split}, {"metric", metric}, {"value", value}};
    records_.push_back(j);
    if (os_) *os_ << j.dump() << "\n";
  }

  const std::vector<nlohmann::json>& records() const { return records_; }

 private:
  std::ostream* os_;
  std::vector<nlohmann::json> records_;
};

// ---------------------------------------------------------------------------
// Pre-training

struct PieceSplit {
  std::vector<std::size_t> train, valid;
  bool valid_is_train = false;
};

/// Seeded piece-level split. With fewer than two pieces the training set
/// doubles as the validation set.
inline PieceSplit split_pieces(std::size_t n_pieces, double valid_fraction, std::uint64_t seed) {
  PieceSplit s;
  std::vector<std::size_t> order(n_pieces);
  for (std::size_t i = 0; i < n_pieces; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::size_t n_valid = 0;
  if (n_pieces >= 2 && valid_fraction > 0.0) {
    n_valid = static_cast<std::size_t>(std::llround(valid_fraction * static_cast<double>(n_pieces)));
    n_valid = std::clamp<std::size_t>(n_valid, 1, n_pieces - 1);
  }
  s.valid.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_valid));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_valid), order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.valid.begin(), s.valid.end());
  if (s.valid.empty()) {
    s.valid = s.train;
    s.valid_is_train = true;
  }
  return s;
}

/// A corrupted segment with its record and pianoroll targets.
struct CorruptedItem {
  std::vector<CPToken> input;
  CorruptionRecord record;
  std::vector<PianorollTarget> targets;
};

inline CorruptedItem make_corrupted_item(const Segment& seg, const CorruptionConfig& config, Rng& rng) {
  auto [corrupted, record] = corrupt(seg, config, rng);
  return {std::move(corrupted.tokens), std::move(record), build_targets(seg)};
}

struct PretrainEval {
  std::size_t step = 0;
  double loss = 0;
  double token_loss = 0;
  double pianoroll_loss = 0;
  ReconstructionStats stats;
};

/// Loss and reconstruction accuracy over a fixed set of corrupted items,
/// averaged over all corrupted tokens / notes of the set.
template <class T>
PretrainEval evaluate_pretrain(const PretrainModel<T>& m, const std::vector<CorruptedItem>& items,
                               bool use_pianoroll = true) {
  LossNormalizer norm;
  for (const auto& it : items) {
    norm.corrupted += it.record.corrupted_indices.size();
    norm.notes += it.targets.size();
  }
  PretrainEval e;
  for (const auto& it : items) {
    const LossComponents lc =
        pretrain_segment_loss<T>(m, it.input, it.record, it.targets, nullptr, norm, {}, use_pianoroll, &e.stats);
    e.token_loss += lc.token;
    e.pianoroll_loss += lc.pianoroll;
  }
  e.loss = e.token_loss + e.pianoroll_loss;
  return e;
}

struct PretrainResult {
  PretrainConfig config;
  PretrainModel<float> best;
  AdamState<float> best_optimizer;
  std::size_t best_step = 0;
  double best_accuracy = -1.0;
  std::size_t steps_run = 0;
  std::size_t skipped_steps = 0;
  std::vector<PretrainEval> history;
  PieceSplit split;

  Checkpoint checkpoint() {
    Checkpoint c;
    c.header["kind"] = "pretrain";
    c.header["model_config"] = config.model;
    c.header["run_config"] = config;
    c.header["seed"] = config.seed;
    c.header["best_step"] = best_step;
    c.header["best_valid_accuracy"] = best_accuracy;
    c.store_module<float>(best);
    c.store_optimizer<float>(collect_params<float>(best), best_optimizer);
    return c;
  }
};

/// Pre-training loop: seeded 85/15 piece split, per step corrupt -> forward ->
/// loss -> StableAdamW, validation at step 0 and every eval_interval steps on
/// a fixed corrupted validation set, keeping the weights with the highest
/// corrupted-token reconstruction accuracy (earliest on ties).
inline PretrainResult pretrain(const std::vector<Piece>& corpus, PretrainConfig config, std::ostream* log = nullptr) {
  if (corpus.empty()) throw ValidationError("pretrain: empty corpus");
  config.model.validate();
  config.optimizer.validate();
  config.corruption.validate();
  config.schedule.validate();
  const auto& sched = config.schedule;
  config.model.init_seed = derive_seed(config.seed, seed_stream::init);

  PretrainResult res;
  res.config = config;
  res.split = split_pieces(corpus.size(), sched.valid_fraction, derive_seed(config.seed, seed_stream::split));

  std::vector<Segment> train_segs, valid_segs;
  for (std::size_t i : res.split.train)
    for (auto& s : segment(corpus[i].tokens, sched.max_seq_len, corpus[i].id)) train_segs.push_back(std::move(s));
  for (std::size_t i : res.split.valid)
    for (auto& s : segment(corpus[i].tokens, sched.max_seq_len, corpus[i].id)) valid_segs.push_back(std::move(s));
  if (train_segs.empty()) throw ValidationError("pretrain: corpus has no notes");
  if (sched.max_valid_segments && valid_segs.size() > sched.max_valid_segments) valid_segs.resize(sched.max_valid_segments);

  // Validation corruption is drawn once per segment from its own stream so
  // every evaluation sees the same inputs.
  std::vector<CorruptedItem> valid_items;
  const std::uint64_t valid_base = derive_seed(config.seed, seed_stream::valid_corruption);
  for (std::size_t j = 0; j < valid_segs.size(); ++j) {
    Rng r(derive_seed(valid_base, j));
    valid_items.push_back(make_corrupted_item(valid_segs[j], config.corruption, r));
  }

  PretrainModel<float> model = PretrainModel<float>::init(config.model, config.model.init_seed);
  auto params = collect_params<float>(model);
  AdamState<float> opt = AdamState<float>::zeros_for(params);
  PretrainModel<float> grad = zeros_like<float>(model);
  auto grad_params = collect_params<float>(grad);

  Rng order_rng(derive_seed(config.seed, seed_stream::batch_order));
  Rng corrupt_rng(derive_seed(config.seed, seed_stream::train_corruption));
  Rng dropout_rng(derive_seed(config.seed, seed_stream::dropout));
  std::vector<std::size_t> order(train_segs.size());
  std::size_t cursor = order.size();
  auto next_segment = [&]() -> const Segment& {
    if (cursor == order.size()) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      order_rng.shuffle(order);
      cursor = 0;
    }
    return train_segs[order[cursor++]];
  };

  MetricsLog mlog(log);
  auto run_eval = [&](std::size_t step) {
    PretrainEval e = evaluate_pretrain(model, valid_items, sched.use_pianoroll);
    e.step = step;
    mlog.record(step, "valid", "loss", e.loss);
    mlog.record(step, "valid", "token_loss", e.token_loss);
    mlog.record(step, "valid", "pianoroll_loss", e.pianoroll_loss);
    mlog.record(step, "valid", "accuracy", e.stats.accuracy());
    for (int a = 0; a < kNumAttributes; ++a)
      mlog.record(step, "valid", std::string("accuracy_") + kAttributeNames[a], e.stats.attr_accuracy(a));
    res.history.push_back(e);
    if (e.stats.accuracy() > res.best_accuracy) {
      res.best_accuracy = e.stats.accuracy();
      res.best_step = step;
      res.best = model;
      res.best_optimizer = opt;
    }
  };

  run_eval(0);
  int consecutive_bad = 0;
  for (std::size_t step = 1; step <= sched.steps; ++step) {
    std::vector<CorruptedItem> batch;
    LossNormalizer norm;
    for (std::size_t b = 0; b < sched.batch_size; ++b) {
      batch.push_back(make_corrupted_item(next_segment(), config.corruption, corrupt_rng));
      norm.corrupted += batch.back().record.corrupted_indices.size();
      norm.notes += batch.back().targets.size();
    }
    grad.visit([](const std::string&, Matrix<float>& g) { g.setZero(); });
    double total = 0, token = 0;
    bool finite = true;
    ForwardOptions fo;
    fo.training = true;
    fo.rng = &dropout_rng;
    try {
      for (const auto& it : batch) {
        const LossComponents lc = pretrain_segment_loss<float>(model, it.input, it.record, it.targets, &grad, norm, fo,
                                                               sched.use_pianoroll);
        total += lc.total;
        token += lc.token;
      }
    } catch (const DivergenceError&) {
      finite = false;
    }
    finite = finite && std::isfinite(total);
    StepReport rep;
    if (finite) rep = stable_adamw_step(params, grad_params, opt, config.optimizer);
    if (!finite || !rep.applied) {
      ++res.skipped_steps;
      mlog.record(step, "train", "skipped", 1.0);
      if (++consecutive_bad >= 2) throw DivergenceError("pretrain diverged: non-finite loss at step " + std::to_string(step));
    } else {
      consecutive_bad = 0;
      if (step % sched.log_interval == 0) {
        mlog.record(step, "train", "loss", total);
        mlog.record(step, "train", "token_loss", token);
      }
    }
    res.steps_run = step;
    if (step % sched.eval_interval == 0 || step == sched.steps) run_eval(step);
  }
  return res;
}

inline PretrainModel<float> pretrain_model_from_checkpoint(const Checkpoint& c) {
  PretrainModel<float> m;
  m.config = c.header.at("model_config").get<ModelConfig>();
  Rng rng(0);
  m.encoder = EncoderWeights<float>::init(m.config, rng);
  m.heads = PretrainHeads<float>::init(m.config.d_model, rng);
  c.load_module<float>(m);
  return m;
}

// ---------------------------------------------------------------------------
// Fine-tuning

/// One piece of a downstream dataset: tokens in note order plus either
/// per-note labels (note level) or a single label (sequence level).
/// tatum_labels, when present, are the CSR ground truth on the tatum grid.
struct LabeledPiece {
  std::string id;
  std::vector<BarToken> tokens;
  std::vector<int> note_labels;
  int label = -1;
  std::vector<int> tatum_labels;
};

inline void validate_dataset(const TaskSpec& spec, const std::vector<LabeledPiece>& pieces) {
  for (const auto& p : pieces) {
    if (p.tokens.empty()) throw ValidationError("piece " + p.id + " has no notes");
    if (spec.level == TaskLevel::note) {
      if (p.note_labels.size() != p.tokens.size())
        throw ValidationError("piece " + p.id + ": label/note count mismatch (" + std::to_string(p.note_labels.size()) +
                              " labels, " + std::to_string(p.tokens.size()) + " notes)");
      for (int l : p.note_labels)
        if (l < 0 || l >= spec.n_classes) throw ValidationError("piece " + p.id + ": label out of range");
    } else {
      if (p.label < 0 || p.label >= spec.n_classes) throw ValidationError("piece " + p.id + ": missing or out-of-range label");
    }
  }
}

struct FinetuneConfig {
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const FinetuneConfig& c) {
  j = nlohmann::json{{"optimizer", c.optimizer}, {"schedule", c.schedule}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, FinetuneConfig& c) {
  if (j.contains("optimizer")) c.optimizer = j["optimizer"].get<OptimizerConfig>();
  if (j.contains("schedule")) c.schedule = j["schedule"].get<ScheduleConfig>();
  c.seed = j.value("seed", c.seed);
}

/// Drops the pre-training heads and attaches a fresh task head.
inline TaskModel<float> make_task_model(const ModelConfig& config, const EncoderWeights<float>& encoder,
                                        const TaskSpec& spec, std::uint64_t seed) {
  validate_task(spec);
  TaskModel<float> m;
  m.config = config;
  m.encoder = encoder;
  m.sequence_level = spec.level == TaskLevel::sequence;
  Rng rng(seed);
  if (m.sequence_level) m.seq_head = SeqHead<float>::init(config.d_model, spec.n_classes, rng);
  else m.note_head = NoteHead<float>::init(config.d_model, spec.n_classes, rng);
  return m;
}

struct TaskExample {
  std::vector<CPToken> tokens;
  std::vector<int> labels;  // per note, or one entry for sequence level
};

inline std::vector<TaskExample> task_examples(const TaskSpec& spec, const LabeledPiece& p, std::size_t max_len) {
  std::vector<TaskExample> out;
  std::size_t start = 0;
  for (auto& s : segment(p.tokens, max_len, p.id)) {
    TaskExample ex;
    ex.tokens = std::move(s.tokens);
    if (spec.level == TaskLevel::note)
      ex.labels.assign(p.note_labels.begin() + static_cast<std::ptrdiff_t>(start),
                       p.note_labels.begin() + static_cast<std::ptrdiff_t>(start + ex.tokens.size()));
    else
      ex.labels = {p.label};
    start += ex.tokens.size();
    out.push_back(std::move(ex));
  }
  return out;
}

/// Logits for one example: n x C (note level) or 1 x C (sequence level).
template <class T>
Matrix<T> task_forward(const TaskModel<T>& m, const std::vector<CPToken>& tokens, EncoderCache<T>* cache = nullptr,
                       typename SeqHead<T>::Cache* seq_cache = nullptr, Matrix<T>* hidden = nullptr,
                       const ForwardOptions& opt = {}) {
  Matrix<T> h = forward(m.config, m.encoder, tokens, cache, opt);
  Matrix<T> logits;
  if (m.sequence_level) {
    std::vector<bool> pad(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) pad[i] = tokens[i].is_pad();
    logits = m.seq_head.forward(h, pad, seq_cache);
  } else {
    logits = m.note_head.forward(h);
  }
  if (hidden) *hidden = std::move(h);
  return logits;
}

/// Loss for one example with gradients accumulated into grad; the loss is
/// divided by `denominator` (labelled rows in the batch).
template <class T>
double task_example_loss(const TaskModel<T>& m, const TaskExample& ex, TaskModel<T>* grad, std::size_t denominator,
                         const ForwardOptions& opt = {}) {
  EncoderCache<T> cache;
  typename SeqHead<T>::Cache sc;
  Matrix<T> h;
  Matrix<T> logits = task_forward(m, ex.tokens, &cache, &sc, &h, opt);
  if (!grad) return classification_loss<T>(logits, ex.labels, nullptr, denominator);
  Matrix<T> dlogits;
  const double loss = classification_loss<T>(logits, ex.labels, &dlogits, denominator);
  Matrix<T> dh = m.sequence_level ? m.seq_head.backward(h, sc, dlogits, grad->seq_head)
                                  : m.note_head.backward(h, dlogits, grad->note_head);
  backward(m.config, m.encoder, cache, dh, grad->encoder);
  return loss;
}

template <class T>
std::vector<double> softmax_row(const Matrix<T>& logits, Eigen::Index r) {
  std::vector<double> p(static_cast<std::size_t>(logits.cols()));
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < logits.cols(); ++k) mx = std::max(mx, static_cast<double>(logits(r, k)));
  double sum = 0;
  for (Eigen::Index k = 0; k < logits.cols(); ++k) sum += p[k] = std::exp(static_cast<double>(logits(r, k)) - mx);
  for (auto& v : p) v /= sum;
  return p;
}

inline int argmax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Note-level predictions for a piece, or a single-element vector holding the
/// piece prediction (argmax of the segment-averaged class distribution).
template <class T>
std::vector<int> predict_piece(const TaskModel<T>& m, const TaskSpec& spec, const LabeledPiece& p, std::size_t max_len) {
  std::vector<int> out;
  std::vector<double> mean(static_cast<std::size_t>(spec.n_classes), 0.0);
  std::size_t n_seg = 0;
  for (const auto& s : segment(p.tokens, max_len, p.id)) {
    Matrix<T> logits = task_forward(m, s.tokens);
    if (spec.level == TaskLevel::note) {
      for (Eigen::Index r = 0; r < logits.rows(); ++r) out.push_back(argmax(softmax_row(logits, r)));
    } else {
      const auto pr = softmax_row(logits, 0);
      for (std::size_t k = 0; k < pr.size(); ++k) mean[k] += pr[k];
      ++n_seg;
    }
  }
  if (spec.level == TaskLevel::sequence) out = {argmax(mean)};
  return out;
}

/// Task metric over a set of pieces (micro-averaged over notes, tatums or pieces).
template <class T>
MetricReport evaluate_task(const TaskModel<T>& m, const TaskSpec& spec, const std::vector<LabeledPiece>& pieces,
                           std::size_t max_len) {
  if (pieces.empty()) throw ValidationError("evaluate_task: no pieces");
  std::vector<int> pred, gt;
  std::vector<std::string> warnings;
  for (const auto& p : pieces) {
    const auto pp = predict_piece(m, spec, p, max_len);
    if (spec.level == TaskLevel::sequence) {
      pred.push_back(pp[0]);
      gt.push_back(p.label);
    } else if (spec.metric == TaskMetric::csr) {
      const auto tatums = onset_tatums(p.tokens);
      std::vector<int> truth = p.tatum_labels;
      if (truth.empty())
        truth = notes_to_tatum_predictions(p.note_labels, tatums,
                                           static_cast<std::size_t>(*std::max_element(tatums.begin(), tatums.end()) + 1));
      const auto tp = notes_to_tatum_predictions(pp, tatums, truth.size(), &warnings);
      pred.insert(pred.end(), tp.begin(), tp.end());
      gt.insert(gt.end(), truth.begin(), truth.end());
    } else {
      pred.insert(pred.end(), pp.begin(), pp.end());
      gt.insert(gt.end(), p.note_labels.begin(), p.note_labels.end());
    }
  }
  MetricReport r = spec.metric == TaskMetric::f1 ? f1_report(pred, gt)
                   : spec.metric == TaskMetric::csr ? csr_report(pred, gt)
                                                     : accuracy_report(pred, gt);
  r.warnings.insert(r.warnings.end(), warnings.begin(), warnings.end());
  return r;
}

struct FinetuneResult {
  TaskModel<float> best;
  std::size_t best_step = 0;
  double best_valid = -1.0;
  MetricReport valid_report;
  MetricReport test_report;
  std::vector<std::pair<std::size_t, double>> valid_history;
};

/// Joint optimization of backbone and task head with best-validation
/// selection under the task metric; the selected model is scored on `test`.
inline FinetuneResult finetune(const ModelConfig& model_config, const EncoderWeights<float>& encoder,
                               const TaskSpec& spec, const std::vector<LabeledPiece>& train,
                               const std::vector<LabeledPiece>& valid, const std::vector<LabeledPiece>& test,
                               const FinetuneConfig& config, std::ostream* log = nullptr) {
  validate_task(spec);
  config.optimizer.validate();
  config.schedule.validate();
  if (train.empty()) throw ValidationError("finetune: empty training set");
  validate_dataset(spec, train);
  validate_dataset(spec, valid);
  validate_dataset(spec, test);
  const auto& sched = config.schedule;

  std::vector<TaskExample> examples;
  for (const auto& p : train)
    for (auto& ex : task_examples(spec, p, sched.max_seq_len)) examples.push_back(std::move(ex));

  FinetuneResult res;
  TaskModel<float> model = make_task_model(model_config, encoder, spec, derive_seed(config.seed, seed_stream::init));
  auto params = collect_params<float>(model);
  AdamState<float> opt = AdamState<float>::zeros_for(params);
  TaskModel<float> grad = zeros_like<float>(model);
  auto grad_params = collect_params<float>(grad);
  const auto& valid_set = valid.empty() ? train : valid;

  MetricsLog mlog(log);
  auto run_eval = [&](std::size_t step) {
    MetricReport r = evaluate_task(model, spec, valid_set, sched.max_seq_len);
    mlog.record(step, "valid", r.metric, r.value);
    res.valid_history.emplace_back(step, r.value);
    if (r.value > res.best_valid) {
      res.best_valid = r.value;
      res.best_step = step;
      res.best = model;
      res.valid_report = r;
    }
  };

  Rng order_rng(derive_seed(config.seed, seed_stream::batch_order));
  Rng dropout_rng(derive_seed(config.seed, seed_stream::dropout));
  std::vector<std::size_t> order(examples.size());
  std::size_t cursor = order.size();
  run_eval(0);
  int consecutive_bad = 0;
  for (std::size_t step = 1; step <= sched.steps; ++step) {
    std::vector<const TaskExample*> batch;
    std::size_t denom = 0;
    for (std::size_t b = 0; b < sched.batch_size; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        order_rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(&examples[order[cursor++]]);
      denom += batch.back()->labels.size();
    }
    grad.visit([](const std::string&, Matrix<float>& g) { g.setZero(); });
    ForwardOptions fo;
    fo.training = true;
    fo.rng = &dropout_rng;
    double loss = 0;
    bool finite = true;
    try {
      for (const auto* ex : batch) loss += task_example_loss<float>(model, *ex, &grad, denom, fo);
    } catch (const DivergenceError&) {
      finite = false;
    }
    finite = finite && std::isfinite(loss);
    StepReport rep;
    if (finite) rep = stable_adamw_step(params, grad_params, opt, config.optimizer);
    if (!finite || !rep.applied) {
      if (++consecutive_bad >= 2) throw DivergenceError("finetune diverged at step " + std::to_string(step));
    } else {
      consecutive_bad = 0;
      if (step % sched.log_interval == 0) mlog.record(step, "train", "loss", loss);
    }
    if (step % sched.eval_interval == 0 || step == sched.steps) run_eval(step);
  }
  if (!test.empty()) {
    res.test_report = evaluate_task(res.best, spec, test, sched.max_seq_len);
    mlog.record(res.best_step, "test", res.test_report.metric, res.test_report.value);
  }
  return res;
}

struct FoldResult {
  std::vector<FinetuneResult> folds;
  double mean_test = 0.0;
};

/// k-fold protocol: fold i is the test set, fold (i+1) mod k validates, the rest train.
inline FoldResult finetune_kfold(const ModelConfig& model_config, const EncoderWeights<float>& encoder,
                                 const TaskSpec& spec, const std::vector<LabeledPiece>& pieces, int k,
                                 std::uint64_t fold_seed, const FinetuneConfig& config, std::ostream* log = nullptr) {
  std::vector<std::string> ids;
  for (const auto& p : pieces) ids.push_back(p.id);
  const auto folds = make_folds(ids, k, fold_seed);
  std::map<std::string, const LabeledPiece*> by_id;
  for (const auto& p : pieces) by_id[p.id] = &p;
  auto gather = [&](const std::vector<std::string>& fold_ids, std::vector<LabeledPiece>& out) {
    for (const auto& id : fold_ids) out.push_back(*by_id.at(id));
  };
  FoldResult fr;
  for (int i = 0; i < k; ++i) {
    std::vector<LabeledPiece> train, valid, test;
    gather(folds[static_cast<std::size_t>(i)], test);
    gather(folds[static_cast<std::size_t>((i + 1) % k)], valid);
    for (int j = 0; j < k; ++j)
      if (j != i && j != (i + 1) % k) gather(folds[static_cast<std::size_t>(j)], train);
    if (train.empty()) train = valid;
    fr.folds.push_back(finetune(model_config, encoder, spec, train, valid, test, config, log));
    fr.mean_test += fr.folds.back().test_report.value;
  }
  fr.mean_test /= static_cast<double>(k);
  return fr;
}

}  // namespace cpbert
