#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpbert/error.hpp"
#include "cpbert/random.hpp"
#include "cpbert/tensor.hpp"
#include "cpbert/tokenizer.hpp"

namespace cpbert {

struct ModelConfig {
  int n_layers = 12;
  int d_model = 768;
  int n_heads = 12;
  int ffn_dim = 1152;
  double rope_base = 10000.0;
  /// When > 0, odd layers attend only to keys with |i - j| <= local_window / 2.
  int local_window = 0;
  double dropout = 0.0;
  std::array<int, kNumAttributes> embed_dims{256, 256, 256, 256};
  std::uint64_t init_seed = 0;

  int head_dim() const { return d_model / n_heads; }
  int embed_total() const { return embed_dims[0] + embed_dims[1] + embed_dims[2] + embed_dims[3]; }

  void validate() const {
    if (n_layers < 0) throw ValidationError("n_layers must be >= 0");
    if (d_model < 1 || n_heads < 1 || ffn_dim < 1) throw ValidationError("model dims must be >= 1");
    if (d_model % n_heads != 0) throw ValidationError("d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0) throw ValidationError("head dim must be even for rotary encoding");
    for (int e : embed_dims)
      if (e < 1) throw ValidationError("embedding dims must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must lie in [0,1)");
    if (local_window < 0) throw ValidationError("local_window must be >= 0");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},       {"d_model", c.d_model},       {"n_heads", c.n_heads},
                     {"ffn_dim", c.ffn_dim},         {"rope_base", c.rope_base},   {"local_window", c.local_window},
                     {"dropout", c.dropout},         {"embed_dims", c.embed_dims}, {"init_seed", c.init_seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.rope_base = j.value("rope_base", c.rope_base);
  c.local_window = j.value("local_window", c.local_window);
  c.dropout = j.value("dropout", c.dropout);
  if (j.contains("embed_dims")) {
    if (j["embed_dims"].is_number_integer()) c.embed_dims.fill(j["embed_dims"].get<int>());
    else c.embed_dims = j["embed_dims"].get<std::array<int, kNumAttributes>>();
  }
  c.init_seed = j.value("init_seed", c.init_seed);
  c.validate();
}

template <class T>
struct LayerWeights {
  Matrix<T> ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w_up, w_down;

  template <class F>
  void visit(F&& f, const std::string& prefix) {
    f(prefix + "attn_norm.gain", ln1_gain);
    f(prefix + "attn_norm.bias", ln1_bias);
    f(prefix + "attn.wq", wq);
    f(prefix + "attn.wk", wk);
    f(prefix + "attn.wv", wv);
    f(prefix + "attn.wo", wo);
    f(prefix + "mlp_norm.gain", ln2_gain);
    f(prefix + "mlp_norm.bias", ln2_bias);
    f(prefix + "mlp.w_up", w_up);
    f(prefix + "mlp.w_down", w_down);
  }
};

/// Backbone weights: attribute embeddings, input projection and transformer layers.
template <class T>
struct EncoderWeights {
  std::array<Matrix<T>, kNumAttributes> embed;
  Matrix<T> in_w, in_b;
  std::vector<LayerWeights<T>> layers;

  template <class F>
  void visit(F&& f) {
    for (int a = 0; a < kNumAttributes; ++a) f(std::string("embed.") + kAttributeNames[a], embed[a]);
    f("embed.proj.w", in_w);
    f("embed.proj.b", in_b);
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].visit(f, "layers." + std::to_string(l) + ".");
  }

  static EncoderWeights init(const ModelConfig& c, Rng& rng) {
    c.validate();
    EncoderWeights w;
    for (int a = 0; a < kNumAttributes; ++a)
      w.embed[a] = init_normal<T>(VocabSpec::embedding_rows(a), c.embed_dims[a], 0.02, rng);
    w.in_w = init_linear<T>(c.embed_total(), c.d_model, rng);
    w.in_b = Matrix<T>::Zero(1, c.d_model);
    for (int l = 0; l < c.n_layers; ++l) {
      LayerWeights<T> lw;
      lw.ln1_gain = Matrix<T>::Ones(1, c.d_model);
      lw.ln1_bias = Matrix<T>::Zero(1, c.d_model);
      lw.wq = init_linear<T>(c.d_model, c.d_model, rng);
      lw.wk = init_linear<T>(c.d_model, c.d_model, rng);
      lw.wv = init_linear<T>(c.d_model, c.d_model, rng);
      lw.wo = init_linear<T>(c.d_model, c.d_model, rng);
      lw.ln2_gain = Matrix<T>::Ones(1, c.d_model);
      lw.ln2_bias = Matrix<T>::Zero(1, c.d_model);
      lw.w_up = init_linear<T>(c.d_model, 2 * c.ffn_dim, rng);
      lw.w_down = init_linear<T>(c.ffn_dim, c.d_model, rng);
      w.layers.push_back(std::move(lw));
    }
    return w;
  }
};

/// Rotates interleaved (even, odd) pairs of every head by angle
/// (position + offset) * base^(-2j/head_dim). inverse applies the transpose.
template <class T>
void apply_rotary(Matrix<T>& x, int n_heads, double base, int position_offset = 0, bool inverse = false) {
  const Eigen::Index n = x.rows();
  const int dh = static_cast<int>(x.cols()) / n_heads;
  const int half = dh / 2;
  std::vector<double> inv_freq(half);
  for (int j = 0; j < half; ++j) inv_freq[j] = std::pow(base, -2.0 * j / dh);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double p = static_cast<double>(i + position_offset);
    for (int j = 0; j < half; ++j) {
      const double ang = p * inv_freq[j];
      const T c = static_cast<T>(std::cos(ang));
      const T s = static_cast<T>(inverse ? -std::sin(ang) : std::sin(ang));
      for (int h = 0; h < n_heads; ++h) {
        T* v = x.row(i).data() + h * dh + 2 * j;
        const T v0 = v[0], v1 = v[1];
        v[0] = v0 * c - v1 * s;
        v[1] = v0 * s + v1 * c;
      }
    }
  }
}

namespace encoder_detail {

template <class T>
struct LayerNormCache {
  Matrix<T> xhat;
  Vector<T> rstd;
};

template <class T>
Matrix<T> layer_norm(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias, LayerNormCache<T>& cache) {
  constexpr double eps = 1e-5;
  const Eigen::Index n = x.rows();
  cache.xhat.resize(x.rows(), x.cols());
  cache.rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
    cache.rstd(i) = rstd;
    cache.xhat.row(i) = (x.row(i).array() - mean) * rstd;
  }
  Matrix<T> y = cache.xhat.array().rowwise() * gain.row(0).array();
  y.array().rowwise() += bias.row(0).array();
  return y;
}

template <class T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const Matrix<T>& gain, const LayerNormCache<T>& cache,
                              Matrix<T>& dgain, Matrix<T>& dbias) {
  dgain.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  Matrix<T> dxhat = dy.array().rowwise() * gain.row(0).array();
  Matrix<T> dx(dy.rows(), dy.cols());
  const T inv_d = T(1) / static_cast<T>(dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const T m1 = dxhat.row(i).sum() * inv_d;
    const T m2 = dxhat.row(i).dot(cache.xhat.row(i)) * inv_d;
    dx.row(i) = cache.rstd(i) * (dxhat.row(i).array() - m1 - cache.xhat.row(i).array() * m2);
  }
  return dx;
}

template <class T>
T gelu(T x) {
  return static_cast<T>(0.5) * x * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = static_cast<T>(0.5) * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(static_cast<T>(-0.5) * x * x) * static_cast<T>(1.0 / std::sqrt(2.0 * std::numbers::pi));
  return cdf + x * pdf;
}

template <class T>
Matrix<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  Matrix<T> m(rows, cols);
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < rate ? T(0) : keep;
  return m;
}

}  // namespace encoder_detail

template <class T>
struct LayerCache {
  Matrix<T> x_in;
  encoder_detail::LayerNormCache<T> ln1, ln2;
  Matrix<T> a1, q, k, v, ctx, a2, up, z;
  std::vector<Matrix<T>> probs;  // per head, n x n
  Matrix<T> attn_drop, mlp_drop;
};

template <class T>
struct EncoderCache {
  std::vector<std::array<int, kNumAttributes>> ids;
  std::vector<bool> pad;
  Matrix<T> x_cat;
  Matrix<T> embed_drop;
  std::vector<LayerCache<T>> layers;
  int position_offset = 0;
};

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // dropout masks; required when training with dropout > 0
  int position_offset = 0;
};

/// Per-attribute lookup, concatenation and projection to d_model.
/// Pad tokens are flagged in `pad` for attention masking.
template <class T>
Matrix<T> embed(const ModelConfig& config, const EncoderWeights<T>& w, const std::vector<CPToken>& tokens,
                EncoderCache<T>* cache = nullptr) {
  const auto n = static_cast<Eigen::Index>(tokens.size());
  Matrix<T> x_cat(n, config.embed_total());
  std::vector<std::array<int, kNumAttributes>> ids(tokens.size());
  std::vector<bool> pad(tokens.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const CPToken& t = tokens[i];
    pad[i] = t.is_pad();
    int col = 0;
    for (int a = 0; a < kNumAttributes; ++a) {
      const int id = t.id(a);
      if (id < 0 || id >= VocabSpec::embedding_rows(a))
        throw ValidationError(std::string("embed: ") + kAttributeNames[a] + " id " + std::to_string(id) +
                              " outside vocabulary");
      ids[i][a] = id;
      x_cat.row(i).segment(col, config.embed_dims[a]) = w.embed[a].row(id);
      col += config.embed_dims[a];
    }
  }
  Matrix<T> h = x_cat * w.in_w;
  h.rowwise() += w.in_b.row(0);
  if (cache) {
    cache->ids = std::move(ids);
    cache->pad = std::move(pad);
    cache->x_cat = std::move(x_cat);
  }
  return h;
}

/// Bidirectional pre-norm transformer over the embedded tokens.
///
/// Each layer: h += Wo * Attn(RoPE(LN(h) Wq), RoPE(LN(h) Wk), LN(h) Wv), then
/// h += Wdown (gelu(gate) * value) with [gate, value] = LN(h) Wup. Pad keys
/// are masked; a query with no visible key gets a zero context vector.
template <class T>
Matrix<T> forward(const ModelConfig& config, const EncoderWeights<T>& w, const std::vector<CPToken>& tokens,
                  EncoderCache<T>* cache = nullptr, const ForwardOptions& opt = {}) {
  using namespace encoder_detail;
  EncoderCache<T> local;
  EncoderCache<T>& c = cache ? *cache : local;
  Matrix<T> h = embed(config, w, tokens, &c);
  const bool drop = opt.training && config.dropout > 0.0;
  if (drop && !opt.rng) throw ValidationError("forward: dropout requires an rng");
  if (drop) {
    c.embed_drop = dropout_mask<T>(h.rows(), h.cols(), config.dropout, *opt.rng);
    h.array() *= c.embed_drop.array();
  }
  const Eigen::Index n = h.rows();
  const int nh = config.n_heads;
  const int dh = config.head_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const int f = config.ffn_dim;
  c.layers.assign(w.layers.size(), {});
  c.position_offset = opt.position_offset;

  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const LayerWeights<T>& lw = w.layers[l];
    LayerCache<T>& lc = c.layers[l];
    const bool local_layer = config.local_window > 0 && (l % 2 == 1);
    const int radius = config.local_window / 2;
    lc.x_in = h;

    lc.a1 = layer_norm(h, lw.ln1_gain, lw.ln1_bias, lc.ln1);
    lc.q = lc.a1 * lw.wq;
    lc.k = lc.a1 * lw.wk;
    lc.v = lc.a1 * lw.wv;
    apply_rotary(lc.q, nh, config.rope_base, opt.position_offset);
    apply_rotary(lc.k, nh, config.rope_base, opt.position_offset);
    lc.ctx = Matrix<T>::Zero(n, config.d_model);
    lc.probs.assign(nh, Matrix<T>());
    for (int hd = 0; hd < nh; ++hd) {
      Matrix<T> s = (lc.q.middleCols(hd * dh, dh) * lc.k.middleCols(hd * dh, dh).transpose()) * scale;
      for (Eigen::Index i = 0; i < n; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index j = 0; j < n; ++j) {
          const bool visible = !c.pad[j] && (!local_layer || std::abs(static_cast<long>(i - j)) <= radius);
          if (!visible) s(i, j) = -std::numeric_limits<T>::infinity();
          else mx = std::max(mx, s(i, j));
        }
        if (mx == -std::numeric_limits<T>::infinity()) {
          s.row(i).setZero();
          continue;
        }
        T sum = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
          const T e = s(i, j) == -std::numeric_limits<T>::infinity() ? T(0) : std::exp(s(i, j) - mx);
          s(i, j) = e;
          sum += e;
        }
        s.row(i) /= sum;
      }
      lc.ctx.middleCols(hd * dh, dh) = s * lc.v.middleCols(hd * dh, dh);
      lc.probs[hd] = std::move(s);
    }
    Matrix<T> attn_out = lc.ctx * lw.wo;
    if (drop) {
      lc.attn_drop = dropout_mask<T>(n, config.d_model, config.dropout, *opt.rng);
      attn_out.array() *= lc.attn_drop.array();
    }
    h += attn_out;

    lc.a2 = layer_norm(h, lw.ln2_gain, lw.ln2_bias, lc.ln2);
    lc.up = lc.a2 * lw.w_up;
    lc.z.resize(n, f);
    for (Eigen::Index i = 0; i < n; ++i)
      for (int j = 0; j < f; ++j) lc.z(i, j) = gelu(lc.up(i, j)) * lc.up(i, f + j);
    Matrix<T> mlp_out = lc.z * lw.w_down;
    if (drop) {
      lc.mlp_drop = dropout_mask<T>(n, config.d_model, config.dropout, *opt.rng);
      mlp_out.array() *= lc.mlp_drop.array();
    }
    h += mlp_out;
  }
  if (!h.allFinite()) throw DivergenceError("forward: non-finite activations");
  return h;
}

/// Accumulates parameter gradients of the backbone into `grad` given dL/dH.
template <class T>
void backward(const ModelConfig& config, const EncoderWeights<T>& w, const EncoderCache<T>& c, const Matrix<T>& d_out,
              EncoderWeights<T>& grad) {
  using namespace encoder_detail;
  Matrix<T> dh = d_out;
  const Eigen::Index n = dh.rows();
  const int nh = config.n_heads;
  const int dhd = config.head_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dhd)));
  const int f = config.ffn_dim;

  for (std::size_t li = w.layers.size(); li-- > 0;) {
    const LayerWeights<T>& lw = w.layers[li];
    const LayerCache<T>& lc = c.layers[li];
    LayerWeights<T>& g = grad.layers[li];

    // feed-forward block
    Matrix<T> d_mlp = dh;
    if (lc.mlp_drop.size()) d_mlp.array() *= lc.mlp_drop.array();
    g.w_down.noalias() += lc.z.transpose() * d_mlp;
    Matrix<T> dz = d_mlp * lw.w_down.transpose();
    Matrix<T> dup(n, 2 * f);
    for (Eigen::Index i = 0; i < n; ++i)
      for (int j = 0; j < f; ++j) {
        const T gate = lc.up(i, j), val = lc.up(i, f + j);
        dup(i, j) = dz(i, j) * val * gelu_grad(gate);
        dup(i, f + j) = dz(i, j) * gelu(gate);
      }
    g.w_up.noalias() += lc.a2.transpose() * dup;
    Matrix<T> da2 = dup * lw.w_up.transpose();
    dh += layer_norm_backward(da2, lw.ln2_gain, lc.ln2, g.ln2_gain, g.ln2_bias);

    // attention block
    Matrix<T> d_attn = dh;
    if (lc.attn_drop.size()) d_attn.array() *= lc.attn_drop.array();
    g.wo.noalias() += lc.ctx.transpose() * d_attn;
    Matrix<T> dctx = d_attn * lw.wo.transpose();
    Matrix<T> dq(n, config.d_model), dk(n, config.d_model), dv(n, config.d_model);
    for (int hd = 0; hd < nh; ++hd) {
      const Matrix<T>& p = lc.probs[hd];
      auto dctx_h = dctx.middleCols(hd * dhd, dhd);
      dv.middleCols(hd * dhd, dhd) = p.transpose() * dctx_h;
      Matrix<T> dp = dctx_h * lc.v.middleCols(hd * dhd, dhd).transpose();
      Vector<T> rowdot = (dp.array() * p.array()).rowwise().sum();
      Matrix<T> ds = p.array() * (dp.array().colwise() - rowdot.array());
      dq.middleCols(hd * dhd, dhd) = (ds * lc.k.middleCols(hd * dhd, dhd)) * scale;
      dk.middleCols(hd * dhd, dhd) = (ds.transpose() * lc.q.middleCols(hd * dhd, dhd)) * scale;
    }
    apply_rotary(dq, nh, config.rope_base, c.position_offset, true);
    apply_rotary(dk, nh, config.rope_base, c.position_offset, true);
    g.wq.noalias() += lc.a1.transpose() * dq;
    g.wk.noalias() += lc.a1.transpose() * dk;
    g.wv.noalias() += lc.a1.transpose() * dv;
    Matrix<T> da1 = dq * lw.wq.transpose() + dk * lw.wk.transpose() + dv * lw.wv.transpose();
    dh += layer_norm_backward(da1, lw.ln1_gain, lc.ln1, g.ln1_gain, g.ln1_bias);
  }

  if (c.embed_drop.size()) dh.array() *= c.embed_drop.array();
  grad.in_w.noalias() += c.x_cat.transpose() * dh;
  grad.in_b.row(0) += dh.colwise().sum();
  Matrix<T> dx = dh * w.in_w.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    int col = 0;
    for (int a = 0; a < kNumAttributes; ++a) {
      grad.embed[a].row(c.ids[i][a]) += dx.row(i).segment(col, config.embed_dims[a]);
      col += config.embed_dims[a];
    }
  }
}

}  // namespace cpbert
