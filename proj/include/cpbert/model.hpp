#pragma once

#include <string>
#include <vector>

#include "cpbert/encoder.hpp"
#include "cpbert/heads.hpp"
#include "cpbert/loss.hpp"

namespace cpbert {

/// Backbone F plus pre-training head G and the pianoroll regressors.
template <class T>
struct PretrainModel {
  ModelConfig config;
  EncoderWeights<T> encoder;
  PretrainHeads<T> heads;

  template <class F>
  void visit(F&& f) {
    encoder.visit(f);
    heads.visit(f);
  }

  static PretrainModel init(const ModelConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    PretrainModel m;
    m.config = config;
    m.encoder = EncoderWeights<T>::init(config, rng);
    m.heads = PretrainHeads<T>::init(config.d_model, rng);
    return m;
  }
};

template <class T>
struct PretrainPass {
  EncoderCache<T> cache;
  Matrix<T> hidden;
  HeadOutputs<T> outputs;
};

template <class T>
PretrainPass<T> pretrain_forward(const PretrainModel<T>& m, const std::vector<CPToken>& tokens,
                                 const ForwardOptions& opt = {}) {
  PretrainPass<T> p;
  p.hidden = forward(m.config, m.encoder, tokens, &p.cache, opt);
  p.outputs = pretrain_heads_forward(m.heads, p.hidden);
  return p;
}

template <class T>
void pretrain_backward(const PretrainModel<T>& m, const PretrainPass<T>& p, const HeadOutputs<T>& d_out,
                       PretrainModel<T>& grad) {
  Matrix<T> dh = pretrain_heads_backward(m.heads, p.hidden, d_out, grad.heads);
  backward(m.config, m.encoder, p.cache, dh, grad.encoder);
}

/// Loss and (optionally) gradients for one corrupted segment; trailing pads
/// beyond `targets.size()` are ignored by the loss.
template <class T>
LossComponents pretrain_segment_loss(const PretrainModel<T>& m, const std::vector<CPToken>& input,
                                     const CorruptionRecord& record, const std::vector<PianorollTarget>& targets,
                                     PretrainModel<T>* grad = nullptr, LossNormalizer norm = {},
                                     const ForwardOptions& opt = {}, bool use_pianoroll = true,
                                     ReconstructionStats* stats = nullptr) {
  PretrainPass<T> p = pretrain_forward(m, input, opt);
  static const std::vector<PianorollTarget> kNoTargets;
  const auto& tg = use_pianoroll ? targets : kNoTargets;
  if (stats) stats->merge(reconstruction_stats(p.outputs, record));
  if (!grad) return pretrain_loss<T>(p.outputs, record, tg, nullptr, norm);
  HeadOutputs<T> d_out;
  LossComponents lc = pretrain_loss<T>(p.outputs, record, tg, &d_out, norm);
  pretrain_backward(m, p, d_out, *grad);
  return lc;
}

/// Fine-tuning model: backbone F with a fresh note-level or sequence-level head H.
template <class T>
struct TaskModel {
  ModelConfig config;
  EncoderWeights<T> encoder;
  bool sequence_level = false;
  NoteHead<T> note_head;
  SeqHead<T> seq_head;

  template <class F>
  void visit(F&& f) {
    encoder.visit(f);
    if (sequence_level) seq_head.visit(f);
    else note_head.visit(f);
  }
};

}  // namespace cpbert
