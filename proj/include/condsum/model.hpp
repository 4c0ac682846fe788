#pragma once

#include <optional>
#include <string>
#include <vector>

#include "condsum/attention.hpp"
#include "condsum/autodiff.hpp"
#include "condsum/core.hpp"
#include "condsum/dataset.hpp"
#include "condsum/encoding.hpp"

namespace condsum {

inline constexpr double kProbFloor = 1e-12;
inline constexpr double kVarianceFloor = 1e-12;
inline const double kLog2Pi = std::log(2.0 * M_PI);

/// Switches mirroring the ablation rows (each true means "component on",
/// except use_bow which swaps the query path for a bag of words).
struct AblationFlags {
  bool use_conditional_model = true;
  bool use_helpers = true;
  bool use_cam = true;
  bool use_3d_encoder = true;
  bool use_bow = false;
  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

struct ModelConfig {
  AttentionConfig attention;
  int d_z = 16;
  int hidden = 64;
  int n_classes = 2;
  EncoderKind encoder = EncoderKind::spatiotemporal;
  std::uint64_t encoder_seed = 0;
  AblationFlags ablation;
  // false treats the fused x as a fixed observation in log p(x|z), so the
  // reconstruction term does not train the attention stack
  bool recon_through_features = true;

  int d_x() const { return attention.d_x; }

  /// Encoder after applying the 2D-encoder ablation.
  EncoderKind effective_encoder() const {
    if (!ablation.use_3d_encoder && encoder == EncoderKind::spatiotemporal) return EncoderKind::per_frame_2d;
    return encoder;
  }
};

/// Two-layer perceptron: out = W2 tanh(W1 x + b1) + b2.
inline void add_mlp(ad::ParamStore& store, const std::string& name, int in, int hidden, int out, Rng& rng) {
  store.add(name + ".l1.W", glorot(rng, in, hidden));
  store.add(name + ".l1.b", Matrix::Zero(1, hidden));
  store.add(name + ".l2.W", glorot(rng, hidden, out));
  store.add(name + ".l2.b", Matrix::Zero(1, out));
}

inline ad::Var mlp(const ad::ParamStore& store, const std::string& name, const ad::Var& x) {
  ad::Var h = ad::tanh(ad::add_row(ad::matmul(x, store.at(name + ".l1.W")), store.at(name + ".l1.b")));
  return ad::add_row(ad::matmul(h, store.at(name + ".l2.W")), store.at(name + ".l2.b"));
}

/// Names of every sub-network, grouped by role.
namespace nets {
inline const std::string f1 = "prior.f1";        // z -> intervention logit
inline const std::string f2 = "prior.f2";        // z -> outcome logits, t = 1
inline const std::string f3 = "prior.f3";        // z -> outcome logits, t = 0
inline const std::string recon = "prior.recon";  // z -> mean of x
inline const std::string g0 = "post.g0";         // (x, onehot y) -> shared
inline const std::string g1 = "post.g1";         // mean, t = 0
inline const std::string g2 = "post.g2";         // variance logit, t = 0
inline const std::string g3 = "post.g3";         // mean, t = 1
inline const std::string g4 = "post.g4";         // variance logit, t = 1
inline const std::string g5 = "helper.g5";       // x -> intervention logit
inline const std::string g6 = "helper.g6";       // x -> outcome logits, t = 1
inline const std::string g7 = "helper.g7";       // x -> outcome logits, t = 0
}  // namespace nets

class Model {
 public:
  Model() = default;

  static Model create(const ModelConfig& config, Vocabulary vocab, std::uint64_t seed) {
    if (config.d_z < 1 || config.hidden < 1 || config.n_classes < 2) throw ArgumentError("Model: invalid dimensions");
    Model m;
    m.config_ = config;
    m.vocab_ = std::move(vocab);
    Rng rng(mix_seed(seed, "model-init"));
    const auto& a = config.attention;
    const int C = config.n_classes, h = config.hidden, dz = config.d_z, dx = a.d_x;
    m.params_.add("embed.table", init_embedding_table(m.vocab_.size(), a.d_m, seed));
    add_attention_params(m.params_, a, rng);
    add_mlp(m.params_, nets::f1, dz, h, 1, rng);
    add_mlp(m.params_, nets::f2, dz, h, C, rng);
    add_mlp(m.params_, nets::f3, dz, h, C, rng);
    add_mlp(m.params_, nets::recon, dz, h, dx, rng);
    add_mlp(m.params_, nets::g0, dx + C, h, h, rng);
    add_mlp(m.params_, nets::g1, h, h, dz, rng);
    add_mlp(m.params_, nets::g2, h, h, dz, rng);
    add_mlp(m.params_, nets::g3, h, h, dz, rng);
    add_mlp(m.params_, nets::g4, h, h, dz, rng);
    add_mlp(m.params_, nets::g5, dx, h, 1, rng);
    add_mlp(m.params_, nets::g6, dx, h, C, rng);
    add_mlp(m.params_, nets::g7, dx, h, C, rng);
    return m;
  }

  static Model from_parts(ModelConfig config, Vocabulary vocab, ad::ParamStore params) {
    Model m;
    m.config_ = std::move(config);
    m.vocab_ = std::move(vocab);
    m.params_ = std::move(params);
    return m;
  }

  Model clone() const { return from_parts(config_, vocab_, params_.clone()); }

  bool ready() const { return params_.size() != 0; }
  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  AttentionParams attention() const { return AttentionParams::view(const_cast<ad::ParamStore&>(params_)); }

  ad::Var net(const std::string& name, const ad::Var& x) const { return mlp(params_, name, x); }

  /// Query representation for the fusion step; empty when the query is
  /// absent or the CAM ablation removes it.
  std::optional<QueryInput> query_input(const std::optional<std::string>& query) const {
    if (!config_.ablation.use_cam || !query || tokenize(*query).empty()) return std::nullopt;
    if (config_.ablation.use_bow)
      return QueryInput{QueryInput::Mode::bow,
                        ad::constant(embed_query_bow(*query, vocab_, config_.attention.d_m).tokens)};
    return QueryInput{QueryInput::Mode::tokens, embed_tokens(params_.at("embed.table"), vocab_.encode(*query))};
  }

  /// X_mul for every frame of one video.
  ad::Var fuse(const Matrix& features, const std::optional<std::string>& query,
               AttentionWorkspace* workspace = nullptr) const {
    return conditional_attention_forward(features, query_input(query), attention(), config_.attention, workspace);
  }

 private:
  ModelConfig config_;
  Vocabulary vocab_;
  ad::ParamStore params_;
};

// ------------------------------------------------------------ log terms

inline Matrix column(const std::vector<int>& v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = v[i];
  return m;
}

inline Matrix one_hot(const std::vector<int>& y, int n_classes) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(y.size()), n_classes);
  for (std::size_t i = 0; i < y.size(); ++i) m(static_cast<Eigen::Index>(i), y[i]) = 1.0;
  return m;
}

inline void check_labels(const std::vector<int>& t, const std::vector<int>& y, int n_classes) {
  for (int v : t)
    if (v != 0 && v != 1) throw ArgumentError("intervention label must be 0 or 1");
  for (int v : y)
    if (v < 0 || v >= n_classes) throw ArgumentError("outcome class " + std::to_string(v) + " outside [0, " + std::to_string(n_classes) + ")");
}

/// t * a + (1 - t) * b, row-wise with t an n x 1 column of 0/1.
inline ad::Var select_branch(const ad::Var& t, const ad::Var& on_one, const ad::Var& on_zero) {
  return ad::add(ad::mul_col(on_one, t), ad::mul_col(on_zero, ad::rsub_scalar(1.0, t)));
}

/// Per-row log N(x | mean, 1) summed over columns.
inline ad::Var log_unit_normal(const ad::Var& x, const ad::Var& mean) {
  return ad::scale(ad::add_scalar(ad::row_sum(ad::square(ad::sub(x, mean))), kLog2Pi * x.cols()), -0.5);
}

inline ad::Var log_standard_normal(const ad::Var& z) {
  return ad::scale(ad::add_scalar(ad::row_sum(ad::square(z)), kLog2Pi * z.cols()), -0.5);
}

/// Per-row log N(z | mu, diag(var)).
inline ad::Var log_diag_normal(const ad::Var& z, const ad::Var& mu, const ad::Var& var) {
  ad::Var v = ad::clamp(var, kVarianceFloor, std::numeric_limits<double>::infinity());
  ad::Var quad = ad::row_sum(ad::mul(ad::square(ad::sub(z, mu)), ad::reciprocal(v)));
  ad::Var logdet = ad::row_sum(ad::log(v));
  return ad::scale(ad::add_scalar(ad::add(quad, logdet), kLog2Pi * z.cols()), -0.5);
}

inline ad::Var clamped_log(const ad::Var& p) { return ad::log(ad::clamp(p, kProbFloor, 1.0 - kProbFloor)); }

/// log Bernoulli(t | p) per row.
inline ad::Var log_bernoulli(const ad::Var& p, const ad::Var& t) {
  return ad::add(ad::mul(t, clamped_log(p)), ad::mul(ad::rsub_scalar(1.0, t), clamped_log(ad::rsub_scalar(1.0, p))));
}

inline ad::Var log_categorical(const ad::Var& probs, const std::vector<int>& y) {
  return clamped_log(ad::pick(probs, y));
}

struct PriorTerms {
  ad::Var log_pz, log_px, log_pt, log_py;  // each n x 1
};

/// Generative-side log terms for a batch of rows.
inline PriorTerms prior_terms(const Model& m, const ad::Var& z, const ad::Var& x, const std::vector<int>& t,
                              const std::vector<int>& y) {
  check_labels(t, y, m.config().n_classes);
  ad::Var tcol = ad::constant(column(t));
  PriorTerms out;
  out.log_pz = log_standard_normal(z);
  out.log_px = log_unit_normal(x, m.net(nets::recon, z));
  out.log_pt = log_bernoulli(ad::logistic(m.net(nets::f1, z)), tcol);
  ad::Var logits = select_branch(tcol, m.net(nets::f2, z), m.net(nets::f3, z));
  out.log_py = log_categorical(ad::softmax_rows(logits), y);
  return out;
}

struct PriorLogTerms {
  double log_pz = 0, log_px = 0, log_pt = 0, log_py = 0;
};

inline PriorLogTerms prior_log_terms(const Vector& z, const Vector& x, int t, int y, const Model& m) {
  if (z.size() != m.config().d_z || x.size() != m.config().d_x()) throw ArgumentError("prior_log_terms: shape mismatch");
  const auto terms = prior_terms(m, ad::constant(z.transpose()), ad::constant(x.transpose()), {t}, {y});
  return {terms.log_pz.scalar(), terms.log_px.scalar(), terms.log_pt.scalar(), terms.log_py.scalar()};
}

struct LatentVar {
  ad::Var mu, var;  // n x d_z
};

/// q(z | x, y, t): shared trunk on (x, onehot y), t-selected Gaussian branch.
inline LatentVar posterior(const Model& m, const ad::Var& x, const std::vector<int>& y, const std::vector<int>& t) {
  check_labels(t, y, m.config().n_classes);
  ad::Var shared = m.net(nets::g0, ad::concat_cols(x, ad::constant(one_hot(y, m.config().n_classes))));
  ad::Var tcol = ad::constant(column(t));
  LatentVar out;
  out.mu = select_branch(tcol, m.net(nets::g3, shared), m.net(nets::g1, shared));
  out.var = select_branch(tcol, ad::logistic(m.net(nets::g4, shared)), ad::logistic(m.net(nets::g2, shared)));
  return out;
}

struct GaussianLatent {
  Vector mu;
  Vector var;
};

inline GaussianLatent posterior_infer(const Vector& x, int y, int t, const Model& m) {
  if (t != 0 && t != 1) throw ArgumentError("posterior_infer: t must be 0 or 1");
  if (x.size() != m.config().d_x()) throw ArgumentError("posterior_infer: shape mismatch");
  const auto q = posterior(m, ad::constant(x.transpose()), {y}, {t});
  return {q.mu.value().row(0).transpose(), q.var.value().row(0).transpose()};
}

/// z = mu + sqrt(var) * eps with var floored at 1e-12.
inline ad::Var reparameterize(const ad::Var& mu, const ad::Var& var, const Matrix& eps) {
  return ad::add(mu, ad::mul(ad::sqrt(ad::clamp(var, kVarianceFloor, std::numeric_limits<double>::infinity())),
                             ad::constant(eps)));
}

inline Vector sample_latent(const GaussianLatent& g, std::uint64_t seed) {
  if (g.mu.size() != g.var.size()) throw ArgumentError("sample_latent: mean and variance sizes differ");
  if ((g.var.array() < 0).any() || !g.mu.allFinite() || !g.var.allFinite())
    throw ArgumentError("sample_latent: invalid Gaussian");
  Rng rng(seed);
  Vector z(g.mu.size());
  for (Eigen::Index j = 0; j < z.size(); ++j) z(j) = g.mu(j) + std::sqrt(std::max(g.var(j), kVarianceFloor)) * rng.normal();
  return z;
}

/// Closed-form KL(N(mu, var) || N(0, I)) per row.
inline Vector kl_to_standard_normal(const Matrix& mu, const Matrix& var) {
  return 0.5 * (var.array() + mu.array().square() - 1.0 - var.array().log()).rowwise().sum().matrix();
}

struct HelperVar {
  ad::Var p_t1;     // n x 1
  ad::Var q_y_t0;   // n x C
  ad::Var q_y_t1;   // n x C
};

inline HelperVar helper_terms(const Model& m, const ad::Var& x) {
  HelperVar h;
  h.p_t1 = ad::logistic(m.net(nets::g5, x));
  h.q_y_t1 = ad::softmax_rows(m.net(nets::g6, x));
  h.q_y_t0 = ad::softmax_rows(m.net(nets::g7, x));
  return h;
}

/// q(y | x, t) for given per-row t.
inline ad::Var helper_outcome(const Model& m, const ad::Var& x, const std::vector<int>& t) {
  ad::Var tcol = ad::constant(column(t));
  return ad::softmax_rows(select_branch(tcol, m.net(nets::g6, x), m.net(nets::g7, x)));
}

struct HelperPrediction {
  double p_t1 = 0;
  Vector q_y_t0;
  Vector q_y_t1;
};

inline HelperPrediction helper_predict(const Vector& x, const Model& m) {
  if (x.size() != m.config().d_x()) throw ArgumentError("helper_predict: shape mismatch");
  const auto h = helper_terms(m, ad::constant(x.transpose()));
  return {h.p_t1.scalar(), h.q_y_t0.value().row(0).transpose(), h.q_y_t1.value().row(0).transpose()};
}

// -------------------------------------------------------------- inference

struct FramePrediction {
  Matrix class_probs;  // n_frames x C
  Vector importance;   // expected class index per frame
  std::vector<int> t_hat;
};

/// Deterministic per-frame outcome distribution from fused features.
///
/// Helpers supply t_hat (q(t=1|x) > 0.5, unless teacher-forced) and
/// y_tilde = argmax q(y|x, t_hat); the posterior mean under (x, y_tilde,
/// t_hat) is scored by the t_hat branch of the prior outcome head. When the
/// helpers are untrained (helper or conditional-model ablation) t_hat is 0;
/// without helpers the prior head is averaged over every candidate y_tilde,
/// and without the conditional model the helper outcome head scores directly.
inline FramePrediction predict_from_fused(const Model& m, const ad::Var& x,
                                          const std::optional<std::vector<int>>& teacher_t = std::nullopt) {
  const auto n = static_cast<std::size_t>(x.rows());
  const int C = m.config().n_classes;
  const auto& flags = m.config().ablation;
  FramePrediction out;

  if (teacher_t) {
    if (teacher_t->size() != n) throw ArgumentError("teacher-forced labels must match frame count");
    out.t_hat = *teacher_t;
  } else if (flags.use_helpers && flags.use_conditional_model) {
    const Matrix p = ad::logistic(m.net(nets::g5, x)).value();
    out.t_hat.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.t_hat[i] = p(static_cast<Eigen::Index>(i), 0) > 0.5 ? 1 : 0;
  } else {
    out.t_hat.assign(n, 0);
  }

  if (!flags.use_conditional_model) {
    out.class_probs = helper_outcome(m, x, out.t_hat).value();
  } else if (!flags.use_helpers) {
    out.class_probs = Matrix::Zero(static_cast<Eigen::Index>(n), C);
    for (int c = 0; c < C; ++c) {
      const std::vector<int> y(n, c);
      const auto q = posterior(m, x, y, out.t_hat);
      ad::Var logits = select_branch(ad::constant(column(out.t_hat)), m.net(nets::f2, q.mu), m.net(nets::f3, q.mu));
      out.class_probs += ad::softmax_rows(logits).value() / static_cast<double>(C);
    }
  } else {
    const Matrix q_y = helper_outcome(m, x, out.t_hat).value();
    std::vector<int> y_tilde(n);
    for (std::size_t i = 0; i < n; ++i) q_y.row(static_cast<Eigen::Index>(i)).maxCoeff(&y_tilde[i]);
    const auto q = posterior(m, x, y_tilde, out.t_hat);
    ad::Var logits = select_branch(ad::constant(column(out.t_hat)), m.net(nets::f2, q.mu), m.net(nets::f3, q.mu));
    out.class_probs = ad::softmax_rows(logits).value();
  }

  RowVector levels(C);
  for (int c = 0; c < C; ++c) levels(c) = c;
  out.importance = out.class_probs * levels.transpose();
  return out;
}

inline FramePrediction predict_frame_scores(const Model& m, const Matrix& features, const std::optional<std::string>& query,
                                            const std::optional<std::vector<int>>& teacher_t = std::nullopt) {
  if (!m.ready()) throw StateError("predict_frame_scores: model has no parameters");
  return predict_from_fused(m, m.fuse(features, query), teacher_t);
}

inline FramePrediction predict_frame_scores(const Model& m, const VideoRecord& record,
                                            const std::optional<std::vector<int>>& teacher_t = std::nullopt) {
  if (!m.ready()) throw StateError("predict_frame_scores: model has no parameters");
  const auto features = VideoEncoder(m.config().effective_encoder(), m.config().attention.d_v, m.config().encoder_seed).encode(record);
  return predict_frame_scores(m, features.features, record.query, teacher_t);
}

}  // namespace condsum
