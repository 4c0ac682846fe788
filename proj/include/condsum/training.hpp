#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "condsum/autodiff.hpp"
#include "condsum/binary_io.hpp"
#include "condsum/core.hpp"
#include "condsum/dataset.hpp"
#include "condsum/encoding.hpp"
#include "condsum/evaluation.hpp"
#include "condsum/intervention.hpp"
#include "condsum/model.hpp"

namespace condsum {

struct TrainConfig {
  int epochs = 60;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 1;       // videos per optimizer step
  int max_steps = 0;        // 0 means no cap
  std::uint64_t seed = 0;
  int mc_samples = 1;
  bool segment_labels = false;  // train on 2-second segment means
  double budget_fraction = 0.15;  // for validation F1
  ModelConfig model;

  /// Full-scale optimizer settings (60 epochs at 1e-6).
  static TrainConfig full_scale() {
    TrainConfig c;
    c.epochs = 60;
    c.learning_rate = 1e-6;
    return c;
  }

  void validate() const {
    if (epochs < 0) throw ArgumentError("epochs must be non-negative");
    if (!(learning_rate > 0)) throw ArgumentError("learning rate must be positive");
    if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
    if (mc_samples < 1) throw ArgumentError("mc_samples must be >= 1");
    if (max_steps < 0) throw ArgumentError("max_steps must be non-negative");
  }
};

/// Negated objective terms; every field is a loss (lower is better).
struct LossReport {
  double total = 0;
  double helper_t = 0;      // -sum log q(t* | x)
  double helper_y = 0;      // -sum log q(y* | x, t*)
  double recon = 0;         // -E log p(x | z)
  double outcome = 0;       // -E log p(y | t, z)
  double intervention = 0;  // -E log p(t | z)
  double kl_mc = 0;         // E [log q(z | .) - log p(z)]
  long step = 0;

  LossReport& operator+=(const LossReport& o) {
    total += o.total;
    helper_t += o.helper_t;
    helper_y += o.helper_y;
    recon += o.recon;
    outcome += o.outcome;
    intervention += o.intervention;
    kl_mc += o.kl_mc;
    return *this;
  }
};

struct Loss {
  ad::Var total;
  LossReport report;
};

struct ConditionalInstance {
  Vector x;
  int t = 0;
  int y = 0;
  int frame_index = 0;
  std::string video_id;
};

/// Standard-normal draws for the reparameterized samples, one matrix per
/// Monte-Carlo sample.
inline std::vector<Matrix> draw_noise(std::uint64_t seed, int mc_samples, Eigen::Index rows, Eigen::Index d_z) {
  Rng rng(mix_seed(seed, "latent-noise"));
  std::vector<Matrix> out;
  for (int s = 0; s < mc_samples; ++s) out.push_back(rng.normal_matrix(rows, d_z));
  return out;
}

namespace detail {
inline void check_finite_term(double v, const char* name) {
  if (!std::isfinite(v)) throw NumericalError(std::string("non-finite loss term '") + name + "'");
}
}  // namespace detail

/// Negated conditional objective for a batch of fused rows x with observed
/// (t*, y*). The expectation terms average over noise.size() samples.
inline Loss loss_from_fused(const Model& m, const ad::Var& x, const std::vector<int>& t, const std::vector<int>& y,
                            const std::vector<Matrix>& noise) {
  if (x.rows() == 0) throw ArgumentError("compute_loss: empty batch");
  if (static_cast<Eigen::Index>(t.size()) != x.rows() || static_cast<Eigen::Index>(y.size()) != x.rows())
    throw ArgumentError("compute_loss: label count differs from row count");
  check_labels(t, y, m.config().n_classes);
  const auto& flags = m.config().ablation;
  Loss out;

  if (!flags.use_conditional_model) {
    ad::Var helper_y = ad::scale(ad::sum(log_categorical(helper_outcome(m, x, t), y)), -1.0);
    out.total = helper_y;
    out.report.helper_y = helper_y.scalar();
    out.report.total = out.report.helper_y;
    detail::check_finite_term(out.report.total, "helper_y");
    return out;
  }
  if (noise.empty()) throw ArgumentError("compute_loss: need at least one noise sample");

  std::vector<ad::Var> parts;
  if (flags.use_helpers) {
    const HelperVar h = helper_terms(m, x);
    ad::Var helper_t = ad::scale(ad::sum(log_bernoulli(h.p_t1, ad::constant(column(t)))), -1.0);
    ad::Var helper_y = ad::scale(ad::sum(log_categorical(helper_outcome(m, x, t), y)), -1.0);
    out.report.helper_t = helper_t.scalar();
    out.report.helper_y = helper_y.scalar();
    parts.push_back(helper_t);
    parts.push_back(helper_y);
  }

  const LatentVar q = posterior(m, x, y, t);
  const ad::Var x_obs = m.config().recon_through_features ? x : ad::constant(x.value());
  const double inv_s = 1.0 / static_cast<double>(noise.size());
  for (const Matrix& eps : noise) {
    if (eps.rows() != x.rows() || eps.cols() != m.config().d_z) throw ArgumentError("compute_loss: noise shape mismatch");
    ad::Var z = reparameterize(q.mu, q.var, eps);
    const PriorTerms p = prior_terms(m, z, x_obs, t, y);
    ad::Var recon = ad::scale(ad::sum(p.log_px), -inv_s);
    ad::Var intervention = ad::scale(ad::sum(p.log_pt), -inv_s);
    ad::Var outcome = ad::scale(ad::sum(p.log_py), -inv_s);
    ad::Var kl = ad::scale(ad::sum(ad::sub(log_diag_normal(z, q.mu, q.var), p.log_pz)), inv_s);
    out.report.recon += recon.scalar();
    out.report.intervention += intervention.scalar();
    out.report.outcome += outcome.scalar();
    out.report.kl_mc += kl.scalar();
    parts.insert(parts.end(), {recon, intervention, outcome, kl});
  }

  ad::Var total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) total = ad::add(total, parts[i]);
  out.total = total;
  const auto& r = out.report;
  detail::check_finite_term(r.helper_t, "helper_t");
  detail::check_finite_term(r.helper_y, "helper_y");
  detail::check_finite_term(r.recon, "recon");
  detail::check_finite_term(r.intervention, "intervention");
  detail::check_finite_term(r.outcome, "outcome");
  detail::check_finite_term(r.kl_mc, "kl_mc");
  out.report.total = total.scalar();
  return out;
}

/// Loss over instances whose fused features are fixed inputs.
inline Loss compute_loss(std::span<const ConditionalInstance> batch, const Model& m, std::uint64_t seed, int mc_samples = 1) {
  if (batch.empty()) throw ArgumentError("compute_loss: empty batch");
  Matrix x(static_cast<Eigen::Index>(batch.size()), m.config().d_x());
  std::vector<int> t, y;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].x.size() != m.config().d_x()) throw ArgumentError("compute_loss: instance width mismatch");
    x.row(static_cast<Eigen::Index>(i)) = batch[i].x.transpose();
    t.push_back(batch[i].t);
    y.push_back(batch[i].y);
  }
  return loss_from_fused(m, ad::constant(x), t, y, draw_noise(seed, mc_samples, x.rows(), m.config().d_z));
}

// ------------------------------------------------------------ prepared data

/// One video ready for training or scoring: frozen-encoder features plus
/// observed intervention labels and outcome classes.
struct PreparedVideo {
  std::string video_id;
  Matrix features;
  std::optional<std::string> query;
  std::vector<int> t;
  std::vector<int> y;
  std::vector<AnnotationTrack> annotations;
};

inline std::vector<int> outcome_classes(const VideoRecord& r, const DatasetSpec& spec, bool segment_labels) {
  if (!segment_labels) return frame_classes(r, spec);
  const auto seg = derive_segment_scores(r.mean_scores(), r.fps);
  const auto expanded = expand_segment_scores(seg, static_cast<std::size_t>(r.n_frames), r.fps);
  std::vector<int> out;
  for (double s : expanded) out.push_back(spec.class_of(s));
  return out;
}

/// Encodes every record once with the model's frozen encoder. Videos without
/// a sidecar entry get t = 0 everywhere.
inline std::vector<PreparedVideo> prepare_videos(const std::vector<VideoRecord>& records,
                                                 const std::vector<InterventionAssignment>& assignments,
                                                 const DatasetSpec& spec, const ModelConfig& config,
                                                 bool segment_labels = false) {
  const VideoEncoder encoder(config.effective_encoder(), config.attention.d_v, config.encoder_seed);
  std::vector<PreparedVideo> out;
  for (const auto& r : records) {
    PreparedVideo v;
    v.video_id = r.video_id;
    v.features = encoder.encode(r).features;
    v.query = r.query;
    v.t.assign(static_cast<std::size_t>(r.n_frames), 0);
    auto it = std::find_if(assignments.begin(), assignments.end(),
                           [&](const InterventionAssignment& a) { return a.video_id == r.video_id; });
    if (it != assignments.end()) {
      if (static_cast<int>(it->frame_flags.size()) != r.n_frames)
        throw ValidationError("intervention sidecar for " + r.video_id + " has wrong frame count");
      v.t = it->labels();
    }
    v.y = outcome_classes(r, spec, segment_labels);
    v.annotations = r.annotations;
    out.push_back(std::move(v));
  }
  return out;
}

inline Vocabulary vocabulary_for(const std::vector<PreparedVideo>& videos) {
  std::vector<std::string> queries;
  for (const auto& v : videos)
    if (v.query) queries.push_back(*v.query);
  return Vocabulary(queries);
}

inline Loss video_loss(const Model& m, const PreparedVideo& v, const std::vector<Matrix>& noise) {
  return loss_from_fused(m, m.fuse(v.features, v.query), v.t, v.y, noise);
}

inline std::vector<double> video_importance(const Model& m, const PreparedVideo& v) {
  const auto pred = predict_frame_scores(m, v.features, v.query);
  return {pred.importance.data(), pred.importance.data() + pred.importance.size()};
}

/// Mean per-video F1 of model summaries against the annotators.
inline double mean_f1(const Model& m, std::span<const PreparedVideo> videos, double budget_fraction,
                      Aggregation aggregation = Aggregation::mean) {
  if (videos.empty()) return 0.0;
  double total = 0.0;
  for (const auto& v : videos) total += score_against_annotators(video_importance(m, v), v.annotations, budget_fraction, aggregation).f1;
  return total / static_cast<double>(videos.size());
}

// ------------------------------------------------------------- checkpoints

inline constexpr std::string_view kCheckpointMagic{"CSCKPT\0\0", 8};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const ModelConfig& c) {
  const auto& a = c.attention;
  return {{"d_m", a.d_m}, {"d", a.d}, {"d_f", a.d_f}, {"d_v", a.d_v}, {"d_x", a.d_x}, {"kappa", a.kappa},
          {"use_topk", a.use_topk}, {"single_stage", a.single_stage}, {"use_text_gate", a.use_text_gate},
          {"use_visual_gate", a.use_visual_gate}, {"d_z", c.d_z}, {"hidden", c.hidden},
          {"n_classes", c.n_classes}, {"encoder", to_string(c.encoder)}, {"encoder_seed", c.encoder_seed},
          {"use_conditional_model", c.ablation.use_conditional_model}, {"use_helpers", c.ablation.use_helpers},
          {"use_cam", c.ablation.use_cam}, {"use_3d_encoder", c.ablation.use_3d_encoder},
          {"use_bow", c.ablation.use_bow}, {"recon_through_features", c.recon_through_features}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  auto& a = c.attention;
  a.d_m = j.at("d_m");
  a.d = j.at("d");
  a.d_f = j.at("d_f");
  a.d_v = j.at("d_v");
  a.d_x = j.at("d_x");
  a.kappa = j.at("kappa");
  a.use_topk = j.at("use_topk");
  a.single_stage = j.at("single_stage");
  a.use_text_gate = j.at("use_text_gate");
  a.use_visual_gate = j.at("use_visual_gate");
  c.d_z = j.at("d_z");
  c.hidden = j.at("hidden");
  c.n_classes = j.at("n_classes");
  c.encoder = parse_encoder_kind(j.at("encoder"));
  c.encoder_seed = j.at("encoder_seed");
  c.ablation.use_conditional_model = j.at("use_conditional_model");
  c.ablation.use_helpers = j.at("use_helpers");
  c.ablation.use_cam = j.at("use_cam");
  c.ablation.use_3d_encoder = j.at("use_3d_encoder");
  c.ablation.use_bow = j.at("use_bow");
  c.recon_through_features = j.value("recon_through_features", true);
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs}, {"learning_rate", c.learning_rate}, {"beta1", c.beta1}, {"beta2", c.beta2},
          {"epsilon", c.epsilon}, {"batch_size", c.batch_size}, {"max_steps", c.max_steps}, {"seed", c.seed},
          {"mc_samples", c.mc_samples}, {"segment_labels", c.segment_labels},
          {"budget_fraction", c.budget_fraction}, {"model", to_json(c.model)}};
}

/// Parameters as float32 arrays plus JSON metadata (model config, vocabulary,
/// and whatever the caller adds: train config, step, validation F1).
inline void save_checkpoint(const std::filesystem::path& path, const Model& m, nlohmann::json metadata = nlohmann::json::object()) {
  io::Container c;
  c.version = kCheckpointVersion;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, var] : m.params()) {
    tensors.push_back({{"name", name}, {"rows", var.rows()}, {"cols", var.cols()}, {"offset", c.payload.size()}});
    io::append_matrix(c.payload, var.value());
  }
  metadata["model"] = to_json(m.config());
  metadata["vocabulary"] = m.vocab().tokens();
  c.header = {{"format", "condsum-checkpoint"}, {"metadata", metadata}, {"tensors", tensors}};
  io::write_container(path, kCheckpointMagic, c);
}

struct Checkpoint {
  Model model;
  nlohmann::json metadata;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw StateError("missing checkpoint " + path.string());
  const io::Container c = io::read_container(path, kCheckpointMagic);
  if (c.version != kCheckpointVersion) throw LoadError("unsupported checkpoint version in " + path.string());
  try {
    const auto& meta = c.header.at("metadata");
    ad::ParamStore params;
    for (const auto& t : c.header.at("tensors"))
      params.add(t.at("name").get<std::string>(),
                 io::read_matrix(c.payload, t.at("offset").get<std::size_t>(), t.at("rows").get<Eigen::Index>(),
                                 t.at("cols").get<Eigen::Index>()));
    return {Model::from_parts(model_config_from_json(meta.at("model")),
                              Vocabulary::from_tokens(meta.at("vocabulary").get<std::vector<std::string>>()),
                              std::move(params)),
            meta};
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed checkpoint " + path.string() + ": " + e.what());
  }
}

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<LossReport>& history) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << "step,total,helper_t,helper_y,recon,outcome,intervention,kl_mc\n";
  char buf[256];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%ld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.total, r.helper_t, r.helper_y,
                  r.recon, r.outcome, r.intervention, r.kl_mc);
    out << buf;
  }
}

// ---------------------------------------------------------------- training

struct TrainResult {
  Model model;                // after the last step
  Model best;                 // best validation F1 (final model when no validation set)
  double best_validation_f1 = -1;
  std::vector<LossReport> history;
};

struct CheckpointPaths {
  std::filesystem::path final_path;
  std::filesystem::path best_path;
};

/// Adam over the negated objective. Videos are shuffled per epoch; each step
/// consumes batch_size videos. With checkpoint paths, the final model is
/// saved at the end, the best-validation model whenever it improves, and the
/// last good parameters if the loss diverges.
inline TrainResult train(const std::vector<PreparedVideo>& train_set, const std::vector<PreparedVideo>& validation,
                         const TrainConfig& config, const std::optional<CheckpointPaths>& checkpoints = std::nullopt,
                         std::optional<Model> initial = std::nullopt) {
  config.validate();
  if (train_set.empty()) throw ArgumentError("train: empty training set");
  TrainResult result;
  result.model = initial ? std::move(*initial) : Model::create(config.model, vocabulary_for(train_set), config.seed);
  ad::Adam adam({config.learning_rate, config.beta1, config.beta2, config.epsilon});
  Rng shuffle_rng(mix_seed(config.seed, "shuffle"));

  const auto metadata = [&](long step, double f1) {
    return nlohmann::json{{"train_config", to_json(config)}, {"step", step}, {"validation_f1", f1}};
  };

  long step = 0;
  bool stop = false;
  for (int epoch = 0; epoch < config.epochs && !stop; ++epoch) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      if (config.max_steps > 0 && step >= config.max_steps) {
        stop = true;
        break;
      }
      auto& params = result.model.params();
      params.zero_grad();
      LossReport report;
      ad::Var total;
      try {
        for (std::size_t b = start; b < std::min(order.size(), start + config.batch_size); ++b) {
          const auto& v = train_set[order[b]];
          const std::uint64_t stream = mix_seed(mix_seed(config.seed, v.video_id), static_cast<std::uint64_t>(step));
          const auto noise = draw_noise(stream, config.mc_samples, v.features.rows(), config.model.d_z);
          Loss l = video_loss(result.model, v, noise);
          report += l.report;
          total = total.defined() ? ad::add(total, l.total) : l.total;
        }
      } catch (const NumericalError&) {
        if (checkpoints) save_checkpoint(checkpoints->final_path, result.model, metadata(step, result.best_validation_f1));
        throw;
      }
      total.backward();
      for (auto& [name, var] : params) {
        if (var.grad().allFinite()) continue;
        if (checkpoints) save_checkpoint(checkpoints->final_path, result.model, metadata(step, result.best_validation_f1));
        throw NumericalError("train: non-finite gradient for " + name + " at step " + std::to_string(step));
      }
      adam.step(params);
      report.step = step++;
      result.history.push_back(report);
    }
    if (!validation.empty()) {
      const double f1 = mean_f1(result.model, validation, config.budget_fraction);
      if (f1 > result.best_validation_f1) {
        result.best_validation_f1 = f1;
        result.best = result.model.clone();
        if (checkpoints) save_checkpoint(checkpoints->best_path, result.best, metadata(step, f1));
      }
    }
  }
  if (!result.best.ready()) result.best = result.model.clone();
  if (checkpoints) {
    save_checkpoint(checkpoints->final_path, result.model, metadata(step, result.best_validation_f1));
    if (validation.empty() || result.best_validation_f1 < 0)
      save_checkpoint(checkpoints->best_path, result.best, metadata(step, result.best_validation_f1));
  }
  return result;
}

/// Trailing moving average of the total loss (window w, first w-1 entries
/// average what is available).
inline std::vector<double> smoothed_loss(const std::vector<LossReport>& history, std::size_t window) {
  std::vector<double> out;
  double acc = 0.0;
  for (std::size_t i = 0; i < history.size(); ++i) {
    acc += history[i].total;
    if (i >= window) acc -= history[i - window].total;
    out.push_back(acc / static_cast<double>(std::min(window, i + 1)));
  }
  return out;
}

// ------------------------------------------------------------ grad checking

struct GradCheckReport {
  double max_relative_error = 0;
  std::string worst_parameter;
  Eigen::Index worst_index = -1;
  double analytic = 0;
  double numeric = 0;
  std::size_t checked = 0;
  bool passed = true;
};

/// Central finite differences against backpropagated gradients for every
/// scalar of every parameter. The loss must be a deterministic function of
/// the parameters (fixed noise). Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheckReport gradient_check(Model& m, const std::function<ad::Var(const Model&)>& loss, double tolerance = 1e-4,
                                      double step = 1e-5, double floor = 1e-6) {
  GradCheckReport report;
  auto& params = m.params();
  params.zero_grad();
  loss(m).backward();
  std::vector<std::pair<std::string, Matrix>> analytic;
  for (auto& [name, var] : params) analytic.emplace_back(name, var.grad());

  std::size_t k = 0;
  for (auto& [name, var] : params) {
    Matrix& value = var.mutable_value();
    const Matrix& grad = analytic[k++].second;
    for (Eigen::Index i = 0; i < value.size(); ++i) {
      const double original = value(i);
      value(i) = original + step;
      const double up = loss(m).scalar();
      value(i) = original - step;
      const double down = loss(m).scalar();
      value(i) = original;
      const double numeric = (up - down) / (2 * step);
      const double a = grad(i);
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++report.checked;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_parameter = name;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  params.zero_grad();
  report.passed = report.max_relative_error < tolerance;
  return report;
}

}  // namespace condsum
