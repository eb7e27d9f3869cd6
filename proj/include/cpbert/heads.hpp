#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "cpbert/encoder.hpp"
#include "cpbert/pianoroll.hpp"

namespace cpbert {

inline constexpr int kPianorollWidth = kTatumsPerBar * kPitchCount;     // 1376
inline constexpr int kChromagramWidth = kTatumsPerBar * kPitchClasses;  // 192

/// Pre-training head G (token logits) and the pianoroll/chromagram regressors.
template <class T>
struct PretrainHeads {
  Matrix<T> token_w, token_b, pr_w, pr_b, cm_w, cm_b;

  template <class F>
  void visit(F&& f) {
    f("head.token.w", token_w);
    f("head.token.b", token_b);
    f("head.pianoroll.w", pr_w);
    f("head.pianoroll.b", pr_b);
    f("head.chroma.w", cm_w);
    f("head.chroma.b", cm_b);
  }

  static PretrainHeads init(int d_model, Rng& rng) {
    PretrainHeads h;
    h.token_w = init_linear<T>(d_model, VocabSpec::logit_width, rng);
    h.token_b = Matrix<T>::Zero(1, VocabSpec::logit_width);
    h.pr_w = init_linear<T>(d_model, kPianorollWidth, rng);
    h.pr_b = Matrix<T>::Zero(1, kPianorollWidth);
    h.cm_w = init_linear<T>(d_model, kChromagramWidth, rng);
    h.cm_b = Matrix<T>::Zero(1, kChromagramWidth);
    return h;
  }
};

/// Per-note outputs: token logits split into blocks of 2/16/86/64, and the
/// bar-level PR (16 x 86) and CM (16 x 12) predictions flattened row-major.
template <class T>
struct HeadOutputs {
  Matrix<T> token_logits;
  Matrix<T> pr;
  Matrix<T> cm;

  auto logits_block(Eigen::Index note, int attribute) const {
    return token_logits.row(note).segment(VocabSpec::logit_offset[attribute], VocabSpec::cardinality[attribute]);
  }
  /// Local prediction PR^_n[pos_n]: one row of the bar-level prediction.
  auto pr_row(Eigen::Index note, int tatum) const { return pr.row(note).segment(tatum * kPitchCount, kPitchCount); }
  auto cm_row(Eigen::Index note, int tatum) const {
    return cm.row(note).segment(tatum * kPitchClasses, kPitchClasses);
  }
};

/// Token head G: one shared linear map to 168 logits per note.
template <class T>
Matrix<T> token_head(const PretrainHeads<T>& w, const Matrix<T>& h) {
  Matrix<T> out = h * w.token_w;
  out.rowwise() += w.token_b.row(0);
  return out;
}

/// Pianoroll and chromagram regressors (no activation).
template <class T>
std::pair<Matrix<T>, Matrix<T>> pianoroll_head(const PretrainHeads<T>& w, const Matrix<T>& h) {
  Matrix<T> pr = h * w.pr_w;
  pr.rowwise() += w.pr_b.row(0);
  Matrix<T> cm = h * w.cm_w;
  cm.rowwise() += w.cm_b.row(0);
  return {std::move(pr), std::move(cm)};
}

template <class T>
HeadOutputs<T> pretrain_heads_forward(const PretrainHeads<T>& w, const Matrix<T>& h) {
  HeadOutputs<T> o;
  o.token_logits = token_head(w, h);
  std::tie(o.pr, o.cm) = pianoroll_head(w, h);
  return o;
}

/// Accumulates head gradients and returns dL/dH.
template <class T>
Matrix<T> pretrain_heads_backward(const PretrainHeads<T>& w, const Matrix<T>& h, const HeadOutputs<T>& d_out,
                                  PretrainHeads<T>& grad) {
  grad.token_w.noalias() += h.transpose() * d_out.token_logits;
  grad.token_b.row(0) += d_out.token_logits.colwise().sum();
  grad.pr_w.noalias() += h.transpose() * d_out.pr;
  grad.pr_b.row(0) += d_out.pr.colwise().sum();
  grad.cm_w.noalias() += h.transpose() * d_out.cm;
  grad.cm_b.row(0) += d_out.cm.colwise().sum();
  Matrix<T> dh = d_out.token_logits * w.token_w.transpose();
  dh.noalias() += d_out.pr * w.pr_w.transpose();
  dh.noalias() += d_out.cm * w.cm_w.transpose();
  return dh;
}

/// Note-level fine-tuning head H: a single linear layer (softmax applied by the loss).
template <class T>
struct NoteHead {
  Matrix<T> w, b;

  template <class F>
  void visit(F&& f) {
    f("note_head.w", w);
    f("note_head.b", b);
  }

  static NoteHead init(int d_model, int n_classes, Rng& rng) {
    return {init_linear<T>(d_model, n_classes, rng), Matrix<T>::Zero(1, n_classes)};
  }

  Matrix<T> forward(const Matrix<T>& h) const {
    Matrix<T> out = h * w;
    out.rowwise() += b.row(0);
    return out;
  }

  Matrix<T> backward(const Matrix<T>& h, const Matrix<T>& d_logits, NoteHead& grad) const {
    grad.w.noalias() += h.transpose() * d_logits;
    grad.b.row(0) += d_logits.colwise().sum();
    return d_logits * w.transpose();
  }
};

/// Sequence-level head H: attention-weighted average of note states followed
/// by a linear classifier. score_i = u . tanh(W h_i + c), weights are the
/// softmax of the scores over non-pad notes.
template <class T>
struct SeqHead {
  Matrix<T> att_w, att_b, att_u, cls_w, cls_b;

  template <class F>
  void visit(F&& f) {
    f("seq_head.att.w", att_w);
    f("seq_head.att.b", att_b);
    f("seq_head.att.u", att_u);
    f("seq_head.cls.w", cls_w);
    f("seq_head.cls.b", cls_b);
  }

  static SeqHead init(int d_model, int n_classes, Rng& rng, int att_dim = 0) {
    if (att_dim <= 0) att_dim = d_model;
    SeqHead s;
    s.att_w = init_linear<T>(d_model, att_dim, rng);
    s.att_b = Matrix<T>::Zero(1, att_dim);
    s.att_u = init_linear<T>(att_dim, 1, rng);
    s.cls_w = init_linear<T>(d_model, n_classes, rng);
    s.cls_b = Matrix<T>::Zero(1, n_classes);
    return s;
  }

  struct Cache {
    Matrix<T> act;       // tanh(W h + c), n x att_dim
    Vector<T> weights;   // n
    Matrix<T> pooled;    // 1 x d
  };

  /// Returns 1 x n_classes logits. Throws when every note is padding.
  Matrix<T> forward(const Matrix<T>& h, const std::vector<bool>& pad, Cache* cache = nullptr) const {
    const Eigen::Index n = h.rows();
    Matrix<T> z = h * att_w;
    z.rowwise() += att_b.row(0);
    Matrix<T> act = z.array().tanh();
    Vector<T> score = act * att_u.col(0);
    T mx = -std::numeric_limits<T>::infinity();
    for (Eigen::Index i = 0; i < n; ++i)
      if (!pad[i]) mx = std::max(mx, score(i));
    if (mx == -std::numeric_limits<T>::infinity()) throw ValidationError("sequence head: all-pad input");
    Vector<T> wts(n);
    T sum = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      wts(i) = pad[i] ? T(0) : std::exp(score(i) - mx);
      sum += wts(i);
    }
    wts /= sum;
    Matrix<T> pooled = wts.transpose() * h;
    Matrix<T> logits = pooled * cls_w;
    logits.row(0) += cls_b.row(0);
    if (cache) {
      cache->act = std::move(act);
      cache->weights = std::move(wts);
      cache->pooled = std::move(pooled);
    }
    return logits;
  }

  Matrix<T> backward(const Matrix<T>& h, const Cache& c, const Matrix<T>& d_logits, SeqHead& grad) const {
    grad.cls_w.noalias() += c.pooled.transpose() * d_logits;
    grad.cls_b.row(0) += d_logits.row(0);
    Matrix<T> d_pooled = d_logits * cls_w.transpose();  // 1 x d
    Matrix<T> dh = c.weights * d_pooled;                 // n x d
    Vector<T> dw = h * d_pooled.row(0).transpose();      // n
    const T mean = c.weights.dot(dw);
    Vector<T> ds = c.weights.array() * (dw.array() - mean);
    grad.att_u.col(0).noalias() += c.act.transpose() * ds;
    Matrix<T> dz = (ds * att_u.col(0).transpose()).array() * (T(1) - c.act.array().square());
    grad.att_w.noalias() += h.transpose() * dz;
    grad.att_b.row(0) += dz.colwise().sum();
    dh.noalias() += dz * att_w.transpose();
    return dh;
  }
};

}  // namespace cpbert
