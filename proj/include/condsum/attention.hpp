#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "condsum/autodiff.hpp"
#include "condsum/core.hpp"

namespace condsum {

struct AttentionConfig {
  int d_m = 64;   // token width
  int d = 64;     // attention width
  int d_f = 128;  // FFN hidden width
  int d_v = 64;   // visual feature width
  int d_x = 64;   // fused output width
  int kappa = 0;  // 0 selects ceil(n / 2)

  // Ablation switches.
  bool use_topk = true;          // false keeps every logit (kappa = n)
  bool single_stage = false;     // sparse map times V instead of times V_new
  bool use_text_gate = true;
  bool use_visual_gate = true;

  int effective_kappa(int n) const {
    if (!use_topk) return n;
    const int k = kappa > 0 ? kappa : (n + 1) / 2;
    return std::clamp(k, 1, n);
  }
};

/// Handles onto the "cam." entries of a ParamStore.
struct AttentionParams {
  ad::Var W_q, W_k, W_v;
  ad::Var ln_gain, ln_bias;
  ad::Var ffn_W1, ffn_b1, ffn_W2, ffn_b2;
  ad::Var text_gate, visual_gate;
  ad::Var fc_W, fc_b;                // (d + d_v) -> d_x
  ad::Var fc_visual_W, fc_visual_b;  // d_v -> d_x, used when no query is present

  static AttentionParams view(ad::ParamStore& store, const std::string& prefix = "cam.") {
    AttentionParams p;
    p.W_q = store.at(prefix + "W_q");
    p.W_k = store.at(prefix + "W_k");
    p.W_v = store.at(prefix + "W_v");
    p.ln_gain = store.at(prefix + "ln.gain");
    p.ln_bias = store.at(prefix + "ln.bias");
    p.ffn_W1 = store.at(prefix + "ffn.W1");
    p.ffn_b1 = store.at(prefix + "ffn.b1");
    p.ffn_W2 = store.at(prefix + "ffn.W2");
    p.ffn_b2 = store.at(prefix + "ffn.b2");
    p.text_gate = store.at(prefix + "text_gate");
    p.visual_gate = store.at(prefix + "visual_gate");
    p.fc_W = store.at(prefix + "fc.W");
    p.fc_b = store.at(prefix + "fc.b");
    p.fc_visual_W = store.at(prefix + "fc_visual.W");
    p.fc_visual_b = store.at(prefix + "fc_visual.b");
    return p;
  }

  void validate() const {
    for (const ad::Var* v : {&W_q, &W_k, &W_v, &ln_gain, &ln_bias, &ffn_W1, &ffn_b1, &ffn_W2, &ffn_b2, &text_gate,
                             &visual_gate, &fc_W, &fc_b, &fc_visual_W, &fc_visual_b})
      if (!v->value().allFinite()) throw ValidationError("attention parameters contain non-finite values");
  }
};

/// Glorot-uniform weight matrix.
inline Matrix glorot(Rng& rng, Eigen::Index fan_in, Eigen::Index fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return rng.uniform_matrix(fan_in, fan_out, -a, a);
}

inline void add_attention_params(ad::ParamStore& store, const AttentionConfig& c, Rng& rng,
                                 const std::string& prefix = "cam.") {
  store.add(prefix + "W_q", glorot(rng, c.d_m, c.d));
  store.add(prefix + "W_k", glorot(rng, c.d_m, c.d));
  store.add(prefix + "W_v", glorot(rng, c.d_m, c.d));
  store.add(prefix + "ln.gain", Matrix::Ones(1, c.d));
  store.add(prefix + "ln.bias", Matrix::Zero(1, c.d));
  store.add(prefix + "ffn.W1", glorot(rng, c.d, c.d_f));
  store.add(prefix + "ffn.b1", Matrix::Zero(1, c.d_f));
  store.add(prefix + "ffn.W2", glorot(rng, c.d_f, c.d));
  store.add(prefix + "ffn.b2", Matrix::Zero(1, c.d));
  store.add(prefix + "text_gate", Matrix::Ones(1, c.d));
  store.add(prefix + "visual_gate", Matrix::Ones(1, c.d_v));
  store.add(prefix + "fc.W", glorot(rng, c.d + c.d_v, c.d_x));
  store.add(prefix + "fc.b", Matrix::Zero(1, c.d_x));
  store.add(prefix + "fc_visual.W", glorot(rng, c.d_v, c.d_x));
  store.add(prefix + "fc_visual.b", Matrix::Zero(1, c.d_x));
}

/// Intermediate values of one forward pass, kept for inspection.
struct AttentionWorkspace {
  Matrix T, Q, K, V;
  Matrix logits;         // S = Q K^T / sqrt(d)
  Matrix A;              // softmax(S)
  Matrix masked_logits;  // S with non-top-kappa entries at -inf
  Matrix sparse_weights; // softmax(masked_logits)
  Matrix V_new, V_kappa;
  Matrix Z_ta;           // 1 x d
  Matrix Z_va;           // n_frames x d_v
  Matrix X_mul;          // n_frames x d_x
  int kappa = 0;
};

/// Row-wise top-kappa selection. Ties at the boundary keep the lower column index.
inline ad::KeepMask topk_mask(const Matrix& logits, int kappa) {
  const Eigen::Index n = logits.rows(), m = logits.cols();
  ad::KeepMask keep = ad::KeepMask::Constant(n, m, false);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return logits(i, a) > logits(i, b); });
    for (int k = 0; k < std::min<Eigen::Index>(kappa, m); ++k) keep(i, order[k]) = true;
  }
  return keep;
}

struct TopkResult {
  ad::Var v_kappa;
  AttentionWorkspace workspace;
};

/// Dense attention followed by the top-kappa product:
///   V_new   = softmax(S) V
///   V_kappa = softmax(tau_kappa(S)) V_new      (or ... V with single_stage)
inline TopkResult topk_attention(const ad::Var& tokens, const AttentionParams& p, const AttentionConfig& c) {
  if (tokens.rows() < 1) throw ArgumentError("topk_attention: empty token matrix");
  if (tokens.cols() != p.W_q.rows())
    throw ArgumentError("topk_attention: token width " + std::to_string(tokens.cols()) + " does not match d_m " +
                        std::to_string(p.W_q.rows()));
  for (const ad::Var* v : {&p.W_q, &p.W_k, &p.W_v})
    if (!v->value().allFinite()) throw ValidationError("topk_attention: non-finite projection weights");
  if (c.use_topk && c.kappa < 0) throw ArgumentError("topk_attention: kappa must be >= 1");

  const int n = static_cast<int>(tokens.rows());
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.W_q.cols()));
  ad::Var Q = ad::matmul(tokens, p.W_q);
  ad::Var K = ad::matmul(tokens, p.W_k);
  ad::Var V = ad::matmul(tokens, p.W_v);
  ad::Var S = ad::scale(ad::matmul(Q, ad::transpose(K)), inv_sqrt_d);
  ad::Var A = ad::softmax_rows(S);
  ad::Var V_new = ad::matmul(A, V);

  const int kappa = c.effective_kappa(n);
  const ad::KeepMask keep = topk_mask(S.value(), kappa);
  ad::Var sparse = ad::softmax_rows(S, &keep);
  ad::Var V_kappa = ad::matmul(sparse, c.single_stage ? V : V_new);

  TopkResult r{V_kappa, {}};
  auto& ws = r.workspace;
  ws.T = tokens.value();
  ws.Q = Q.value();
  ws.K = K.value();
  ws.V = V.value();
  ws.logits = S.value();
  ws.A = A.value();
  ws.masked_logits = S.value();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (!keep(i, j)) ws.masked_logits(i, j) = -std::numeric_limits<double>::infinity();
  ws.sparse_weights = sparse.value();
  ws.V_new = V_new.value();
  ws.V_kappa = V_kappa.value();
  ws.kappa = kappa;
  return r;
}

inline TopkResult topk_attention(const Matrix& tokens, const AttentionParams& p, const AttentionConfig& c) {
  return topk_attention(ad::constant(tokens), p, c);
}

/// Row-wise layer normalization with learned gain and bias.
inline ad::Var layer_norm(const ad::Var& x, const ad::Var& gain, const ad::Var& bias, double eps = 1e-5) {
  ad::Var centered = ad::add_col(x, ad::scale(ad::row_mean(x), -1.0));
  ad::Var inv_std = ad::reciprocal(ad::sqrt(ad::add_scalar(ad::row_mean(ad::square(centered)), eps)));
  return ad::add_row(ad::mul_row(ad::mul_col(centered, inv_std), gain), bias);
}

/// Query side of the fusion: a token matrix routed through top-kappa
/// attention, or a bag-of-words row that bypasses it.
struct QueryInput {
  enum class Mode { tokens, bow };
  Mode mode = Mode::tokens;
  ad::Var matrix;
};

/// Fuses per-frame visual features with the (optional) query:
///   Z_ta  = TextAtten(FFN(LayerNorm(V_kappa)))   gate, then mean over tokens
///   Z_va  = VisualAtten(features)                gate per frame
///   X_mul = FC([Z_ta, Z_va])                     one row per frame
/// Without a query, X_mul = FC_visual(Z_va).
inline ad::Var conditional_attention_forward(const Matrix& video_features, const std::optional<QueryInput>& query,
                                             const AttentionParams& p, const AttentionConfig& c,
                                             AttentionWorkspace* workspace = nullptr) {
  if (video_features.cols() != p.visual_gate.cols())
    throw ArgumentError("conditional_attention_forward: feature width " + std::to_string(video_features.cols()) +
                        " does not match d_v " + std::to_string(p.visual_gate.cols()));
  const Eigen::Index n_frames = video_features.rows();
  ad::Var features = ad::constant(video_features);
  ad::Var z_va = c.use_visual_gate ? ad::mul_row(features, p.visual_gate) : features;

  AttentionWorkspace local;
  AttentionWorkspace& ws = workspace ? *workspace : local;
  ad::Var x_mul;
  if (!query) {
    x_mul = ad::add_row(ad::matmul(z_va, p.fc_visual_W), p.fc_visual_b);
  } else {
    if (query->matrix.cols() != p.W_v.rows())
      throw ArgumentError("conditional_attention_forward: token width " + std::to_string(query->matrix.cols()) +
                          " does not match d_m " + std::to_string(p.W_v.rows()));
    ad::Var text;
    if (query->mode == QueryInput::Mode::tokens) {
      TopkResult r = topk_attention(query->matrix, p, c);
      ws = r.workspace;
      ad::Var h = layer_norm(r.v_kappa, p.ln_gain, p.ln_bias);
      h = ad::add_row(ad::matmul(ad::tanh(ad::add_row(ad::matmul(h, p.ffn_W1), p.ffn_b1)), p.ffn_W2), p.ffn_b2);
      text = h;
    } else {
      ws.T = query->matrix.value();
      text = ad::matmul(query->matrix, p.W_v);
    }
    if (c.use_text_gate) text = ad::mul_row(text, p.text_gate);
    ad::Var z_ta = ad::mean_rows(text);
    ws.Z_ta = z_ta.value();
    x_mul = ad::add_row(ad::matmul(ad::concat_cols(ad::repeat_rows(z_ta, n_frames), z_va), p.fc_W), p.fc_b);
  }
  ws.Z_va = z_va.value();
  ws.X_mul = x_mul.value();
  return x_mul;
}

}  // namespace condsum
