#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "cpbert/corruption.hpp"
#include "cpbert/heads.hpp"
#include "cpbert/pianoroll.hpp"

namespace cpbert {

/// Writes softmax(x) - onehot(target) into grad (scaled) and returns -log softmax(x)[target].
template <class T, class In, class Out>
T softmax_cross_entropy(const In& logits, int target, Out&& grad, T grad_scale) {
  const T mx = logits.maxCoeff();
  T sum = 0;
  for (Eigen::Index k = 0; k < logits.size(); ++k) sum += std::exp(logits(k) - mx);
  const T log_z = mx + std::log(sum);
  if (grad.size()) {
    for (Eigen::Index k = 0; k < logits.size(); ++k)
      grad(k) += grad_scale * (std::exp(logits(k) - log_z) - (k == target ? T(1) : T(0)));
  }
  return log_z - logits(target);
}

struct LossComponents {
  double total = 0;
  double token = 0;
  double pianoroll = 0;
  std::size_t n_corrupted = 0;
  std::size_t n_notes = 0;
  bool empty_corruption = false;
};

/// Denominators of the two averages. Zero means "this segment's own count",
/// which batch assembly overrides with batch-wide counts.
struct LossNormalizer {
  std::size_t corrupted = 0;
  std::size_t notes = 0;
};

/// Pre-training loss for one segment.
///
/// token: mean over corrupted notes of the summed cross-entropies of the
/// four attributes against the clean token.
/// pianoroll: mean over all notes of MSE(PR) + MSE(CM) + MSE(PR[pos]) + MSE(CM[pos]).
/// Notes are rows [0, targets.size()); trailing rows are padding and ignored.
/// When `grad` is given, dLoss/d(outputs) is accumulated into it.
template <class T>
LossComponents pretrain_loss(const HeadOutputs<T>& out, const CorruptionRecord& record,
                             const std::vector<PianorollTarget>& targets, HeadOutputs<T>* grad = nullptr,
                             LossNormalizer norm = {}) {
  LossComponents lc;
  lc.n_corrupted = record.corrupted_indices.size();
  lc.n_notes = targets.size();
  lc.empty_corruption = lc.n_corrupted == 0;
  const std::size_t tok_den = norm.corrupted ? norm.corrupted : lc.n_corrupted;
  const std::size_t note_den = norm.notes ? norm.notes : lc.n_notes;

  if (grad) {
    if (grad->token_logits.rows() != out.token_logits.rows()) {
      grad->token_logits = Matrix<T>::Zero(out.token_logits.rows(), out.token_logits.cols());
      grad->pr = Matrix<T>::Zero(out.pr.rows(), out.pr.cols());
      grad->cm = Matrix<T>::Zero(out.cm.rows(), out.cm.cols());
    }
  }

  T token_sum = 0;
  if (tok_den > 0) {
    const T scale = T(1) / static_cast<T>(tok_den);
    for (std::size_t k = 0; k < record.corrupted_indices.size(); ++k) {
      const auto i = static_cast<Eigen::Index>(record.corrupted_indices[k]);
      const CPToken& clean = record.originals[k];
      for (int a = 0; a < kNumAttributes; ++a) {
        const auto off = VocabSpec::logit_offset[a];
        const auto card = VocabSpec::cardinality[a];
        auto logits = out.token_logits.row(i).segment(off, card);
        if (grad) {
          token_sum += softmax_cross_entropy<T>(logits, clean.id(a), grad->token_logits.row(i).segment(off, card), scale);
        } else {
          Vector<T> none;
          token_sum += softmax_cross_entropy<T>(logits, clean.id(a), none, scale);
        }
      }
    }
    lc.token = static_cast<double>(token_sum) / static_cast<double>(tok_den);
  }

  T pr_sum = 0;
  if (note_den > 0) {
    const T scale = T(1) / static_cast<T>(note_den);
    const T w_pr = T(1) / T(kPianorollWidth), w_cm = T(1) / T(kChromagramWidth);
    const T w_prl = T(1) / T(kPitchCount), w_cml = T(1) / T(kPitchClasses);
    for (std::size_t n = 0; n < targets.size(); ++n) {
      const auto i = static_cast<Eigen::Index>(n);
      const PianorollTarget& tg = targets[n];
      const int pos = tg.pos;
      for (int c = 0; c < kPianorollWidth; ++c) {
        const T d = out.pr(i, c) - static_cast<T>(tg.pr[c]);
        const bool local = c / kPitchCount == pos;
        pr_sum += d * d * (w_pr + (local ? w_prl : T(0)));
        if (grad) grad->pr(i, c) += scale * T(2) * d * (w_pr + (local ? w_prl : T(0)));
      }
      for (int c = 0; c < kChromagramWidth; ++c) {
        const T d = out.cm(i, c) - static_cast<T>(tg.cm[c]);
        const bool local = c / kPitchClasses == pos;
        pr_sum += d * d * (w_cm + (local ? w_cml : T(0)));
        if (grad) grad->cm(i, c) += scale * T(2) * d * (w_cm + (local ? w_cml : T(0)));
      }
    }
    lc.pianoroll = static_cast<double>(pr_sum) / static_cast<double>(note_den);
  }
  lc.total = lc.token + lc.pianoroll;
  return lc;
}

/// Corrupted-token reconstruction counts (argmax of each logit block).
struct ReconstructionStats {
  std::size_t n = 0;
  std::size_t all_correct = 0;
  std::array<std::size_t, kNumAttributes> attr_correct{};

  void merge(const ReconstructionStats& o) {
    n += o.n;
    all_correct += o.all_correct;
    for (int a = 0; a < kNumAttributes; ++a) attr_correct[a] += o.attr_correct[a];
  }
  double accuracy() const { return n ? static_cast<double>(all_correct) / static_cast<double>(n) : 0.0; }
  double attr_accuracy(int a) const { return n ? static_cast<double>(attr_correct[a]) / static_cast<double>(n) : 0.0; }
};

template <class T>
ReconstructionStats reconstruction_stats(const HeadOutputs<T>& out, const CorruptionRecord& record) {
  ReconstructionStats s;
  for (std::size_t k = 0; k < record.corrupted_indices.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(record.corrupted_indices[k]);
    bool all = true;
    for (int a = 0; a < kNumAttributes; ++a) {
      Eigen::Index best;
      out.logits_block(i, a).maxCoeff(&best);
      const bool ok = static_cast<int>(best) == record.originals[k].id(a);
      s.attr_correct[a] += ok;
      all = all && ok;
    }
    s.all_correct += all;
    ++s.n;
  }
  return s;
}

/// Mean cross-entropy of each row's logits against labels; rows with label < 0 are skipped.
template <class T>
double classification_loss(const Matrix<T>& logits, const std::vector<int>& labels, Matrix<T>* grad,
                           std::size_t denominator) {
  if (grad && grad->rows() != logits.rows()) *grad = Matrix<T>::Zero(logits.rows(), logits.cols());
  T sum = 0;
  const T scale = T(1) / static_cast<T>(denominator);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    const auto r = static_cast<Eigen::Index>(i);
    if (grad) {
      sum += softmax_cross_entropy<T>(logits.row(r), labels[i], grad->row(r), scale);
    } else {
      Vector<T> none;
      sum += softmax_cross_entropy<T>(logits.row(r), labels[i], none, scale);
    }
  }
  return static_cast<double>(sum) / static_cast<double>(denominator);
}

}  // namespace cpbert
