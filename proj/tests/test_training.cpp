#include <gtest/gtest.h>

#include <fstream>

#include "condsum/training.hpp"

using namespace condsum;

namespace {

ModelConfig small_config(int d_z = 4, int d_x = 8, int C = 2) {
  ModelConfig c;
  c.attention.d_m = 6;
  c.attention.d = 5;
  c.attention.d_f = 7;
  c.attention.d_v = 16;
  c.attention.d_x = d_x;
  c.d_z = d_z;
  c.hidden = 8;
  c.n_classes = C;
  c.encoder = EncoderKind::toy;
  return c;
}

void zero_all(Model& m) {
  for (auto& [name, v] : m.params()) v.mutable_value().setZero();
}

std::vector<ConditionalInstance> random_batch(int n, int d_x, int C, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ConditionalInstance> out;
  for (int i = 0; i < n; ++i)
    out.push_back({rng.uniform_matrix(d_x, 1, -1, 1), static_cast<int>(rng.index(2)), static_cast<int>(rng.index(C)), i, "v"});
  return out;
}

std::vector<PreparedVideo> synthetic_videos(int n_videos, int n_frames, const ModelConfig& config, std::uint64_t seed) {
  const auto records = generate_synthetic(n_videos, n_frames, true, seed, 24);
  const auto spec = DatasetSpec::synthetic(true);
  const auto cd = build_conditional_dataset(records, spec, 0.5, 0.3, seed);
  return prepare_videos(cd.records, cd.assignments, spec, config);
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Loss, HandComputedGoldenWithZeroNets) {
  // d_z = 1 and every weight zero: logistic(0) = 1/2, uniform softmax,
  // posterior N(0, 1/2), recon mean 0. With z = eps / sqrt(2):
  //   kl_mc = log N(z; 0, 1/2) - log N(z; 0, 1) = ln2 / 2 - eps^2 / 4
  const int C = 3, d_x = 5;
  Model m = Model::create(small_config(1, d_x, C), Vocabulary{}, 0);
  zero_all(m);
  const std::vector<ConditionalInstance> batch{{(Vector(5) << 0.5, -1.0, 2.0, 0.0, 0.25).finished(), 1, 2, 0, "v"}};
  const auto r = compute_loss(batch, m, 42).report;
  const double eps = draw_noise(42, 1, 1, 1)[0](0, 0);
  const double ln2 = std::log(2.0), log2pi = std::log(2 * M_PI);
  EXPECT_NEAR(r.helper_t, ln2, 1e-12);
  EXPECT_NEAR(r.helper_y, std::log(3.0), 1e-12);
  EXPECT_NEAR(r.intervention, ln2, 1e-12);
  EXPECT_NEAR(r.outcome, std::log(3.0), 1e-12);
  EXPECT_NEAR(r.recon, 0.5 * (0.25 + 1 + 4 + 0 + 0.0625) + 0.5 * d_x * log2pi, 1e-12);
  EXPECT_NEAR(r.kl_mc, 0.5 * ln2 - 0.25 * eps * eps, 1e-12);
  const double total = 2 * ln2 + 2 * std::log(3.0) + 0.5 * 5.3125 + 2.5 * log2pi + 0.5 * ln2 - 0.25 * eps * eps;
  EXPECT_NEAR(r.total, total, 1e-6);
}

TEST(Loss, TotalIsSumOfTerms) {
  Model m = Model::create(small_config(), Vocabulary{}, 3);
  const auto batch = random_batch(6, 8, 2, 4);
  const auto r = compute_loss(batch, m, 5, 3).report;
  EXPECT_NEAR(r.total, r.helper_t + r.helper_y + r.recon + r.outcome + r.intervention + r.kl_mc, 1e-9);
  EXPECT_GE(r.helper_t, 0.0);
  EXPECT_GE(r.helper_y, 0.0);
}

TEST(Loss, MonteCarloAveragesSingleSampleLosses) {
  Model m = Model::create(small_config(), Vocabulary{}, 3);
  const auto batch = random_batch(4, 8, 2, 6);
  Matrix x(4, 8);
  std::vector<int> t, y;
  for (int i = 0; i < 4; ++i) {
    x.row(i) = batch[i].x.transpose();
    t.push_back(batch[i].t);
    y.push_back(batch[i].y);
  }
  const auto noise = draw_noise(9, 4, 4, 4);
  const auto full = loss_from_fused(m, ad::constant(x), t, y, noise).report;
  double recon = 0, kl = 0;
  for (const auto& eps : noise) {
    const auto one = loss_from_fused(m, ad::constant(x), t, y, {eps}).report;
    recon += one.recon / 4;
    kl += one.kl_mc / 4;
  }
  EXPECT_NEAR(full.recon, recon, 1e-9);
  EXPECT_NEAR(full.kl_mc, kl, 1e-9);
}

TEST(Loss, PerfectHelpersCostNothing) {
  Model m = Model::create(small_config(), Vocabulary{}, 1);
  auto batch = random_batch(3, 8, 2, 7);
  for (auto& b : batch) b.t = 1, b.y = 0;
  // Saturate the helpers toward t = 1 and, on the t = 1 branch, class 0.
  m.params().at(nets::g5 + ".l2.b").mutable_value().setConstant(100);
  m.params().at(nets::g6 + ".l2.b").mutable_value() << 100, -100;
  const auto r = compute_loss(batch, m, 1).report;
  EXPECT_NEAR(r.helper_t, 0.0, 1e-9);
  EXPECT_NEAR(r.helper_y, 0.0, 1e-9);
}

TEST(Loss, PosteriorEqualToPriorHasZeroExpectedKl) {
  const int n = 10000;
  const Matrix eps = Rng(2).normal_matrix(n, 3);
  ad::Var mu = ad::constant(Matrix::Zero(n, 3)), var = ad::constant(Matrix::Ones(n, 3));
  ad::Var z = reparameterize(mu, var, eps);
  const Vector d = (log_diag_normal(z, mu, var).value() - log_standard_normal(z).value()).col(0);
  EXPECT_LT(std::abs(d.mean()), 3 * std::sqrt(d.array().square().mean() / n) + 1e-12);
}

TEST(Loss, SignCoherence) {
  // Moving x toward the reconstruction mean raises log p(x|z) and lowers the loss.
  Model m = Model::create(small_config(1, 4, 2), Vocabulary{}, 0);
  zero_all(m);
  std::vector<ConditionalInstance> near{{Vector::Constant(4, 0.1), 0, 1, 0, "v"}};
  std::vector<ConditionalInstance> far{{Vector::Constant(4, 2.0), 0, 1, 0, "v"}};
  EXPECT_LT(compute_loss(near, m, 3).report.total, compute_loss(far, m, 3).report.total);
}

TEST(Loss, Errors) {
  Model m = Model::create(small_config(), Vocabulary{}, 0);
  EXPECT_THROW(compute_loss(std::span<const ConditionalInstance>{}, m, 0), ArgumentError);
  auto batch = random_batch(2, 8, 2, 1);
  batch[0].y = 2;
  EXPECT_THROW(compute_loss(batch, m, 0), ArgumentError);
  batch = random_batch(2, 8, 2, 1);
  batch[1].x(3) = 1e200;
  try {
    compute_loss(batch, m, 0);
    FAIL() << "expected a numerical error";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("recon"), std::string::npos) << e.what();
  }
}

TEST(Loss, HelperAblationContainsGradients) {
  ModelConfig c = small_config();
  c.ablation.use_helpers = false;
  Model m = Model::create(c, Vocabulary{}, 2);
  const auto batch = random_batch(5, 8, 2, 3);
  m.params().zero_grad();
  const auto l = compute_loss(batch, m, 1);
  EXPECT_EQ(l.report.helper_t, 0.0);
  EXPECT_EQ(l.report.helper_y, 0.0);
  l.total.backward();
  for (auto& [name, v] : m.params())
    if (name.rfind("helper.", 0) == 0) EXPECT_TRUE(v.grad().isZero(0.0)) << name;
}

TEST(Loss, WithoutConditionalModelIsCrossEntropy) {
  ModelConfig c = small_config(4, 8, 3);
  c.ablation.use_conditional_model = false;
  Model m = Model::create(c, Vocabulary{}, 2);
  const auto batch = random_batch(4, 8, 3, 5);
  const auto r = compute_loss(batch, m, 1).report;
  double ce = 0;
  for (const auto& b : batch) {
    const auto h = helper_predict(b.x, m);
    ce -= std::log((b.t ? h.q_y_t1 : h.q_y_t0)(b.y));
  }
  EXPECT_NEAR(r.total, ce, 1e-10);
  EXPECT_EQ(r.recon, 0.0);
  EXPECT_EQ(r.kl_mc, 0.0);
}

TEST(Loss, ObservedFeaturesStopReconGradient) {
  ModelConfig c = small_config();
  c.ablation.use_helpers = false;
  auto videos = synthetic_videos(1, 8, c, 12);
  const auto noise = draw_noise(3, 1, 8, c.d_z);
  Model joint = Model::create(c, vocabulary_for(videos), 1);
  c.recon_through_features = false;
  Model observed = Model::create(c, vocabulary_for(videos), 1);
  const auto a = video_loss(joint, videos[0], noise), b = video_loss(observed, videos[0], noise);
  EXPECT_EQ(a.report.total, b.report.total);
  a.total.backward();
  b.total.backward();
  EXPECT_FALSE(joint.params().at("cam.fc.W").grad().isApprox(observed.params().at("cam.fc.W").grad()));
  EXPECT_TRUE(joint.params().at(nets::recon + ".l1.W").grad().isApprox(observed.params().at(nets::recon + ".l1.W").grad()));
}

TEST(GradCheck, FullModelThroughAttention) {
  ModelConfig c = small_config(4, 8, 2);
  auto videos = synthetic_videos(1, 8, c, 11);
  Model m = Model::create(c, vocabulary_for(videos), 4);
  const auto noise = draw_noise(5, 1, videos[0].features.rows(), c.d_z);
  const auto report = gradient_check(m, [&](const Model& mm) { return video_loss(mm, videos[0], noise).total; });
  EXPECT_TRUE(report.passed) << report.worst_parameter << "[" << report.worst_index << "] rel " << report.max_relative_error;
  EXPECT_EQ(report.checked, m.params().scalar_count());
}

TEST(GradCheck, QuadraticReconRegionIsNearlyExact) {
  Model m = Model::create(small_config(1, 4, 2), Vocabulary{}, 0);
  const Matrix x = Rng(3).uniform_matrix(3, 4, -1, 1), z = Rng(4).uniform_matrix(3, 1, -1, 1);
  const auto report = gradient_check(
      m, [&](const Model& mm) { return ad::scale(ad::sum(log_unit_normal(ad::constant(x), mm.net(nets::recon, ad::constant(z)))), -1.0); },
      1e-6);
  EXPECT_LT(report.max_relative_error, 1e-6) << report.worst_parameter;
}

TEST(GradCheck, ReportsBrokenGradientWithoutThrowing) {
  Model m = Model::create(small_config(), Vocabulary{}, 0);
  // The loss reads a parameter through a constant, so backprop misses it.
  const auto report = gradient_check(m, [](const Model& mm) {
    return ad::sum(ad::square(ad::constant(mm.params().at(nets::f1 + ".l1.W").value())));
  });
  EXPECT_FALSE(report.passed);
  EXPECT_EQ(report.worst_parameter, nets::f1 + ".l1.W");
}

TEST(Train, ZeroEpochsReturnsInitialParameters) {
  TrainConfig cfg;
  cfg.model = small_config();
  cfg.epochs = 0;
  const auto videos = synthetic_videos(2, 8, cfg.model, 1);
  const auto r = train(videos, {}, cfg);
  const Model init = Model::create(cfg.model, vocabulary_for(videos), cfg.seed);
  EXPECT_TRUE(r.history.empty());
  for (const auto& [name, v] : init.params()) EXPECT_EQ(r.model.params().at(name).value(), v.value()) << name;
}

TEST(Train, DeterministicUnderSeed) {
  TrainConfig cfg;
  cfg.model = small_config();
  cfg.epochs = 3;
  cfg.seed = 7;
  const auto videos = synthetic_videos(3, 8, cfg.model, 2);
  const auto a = train(videos, {}, cfg), b = train(videos, {}, cfg);
  ASSERT_EQ(a.history.size(), 9u);
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].total, b.history[i].total);
  for (const auto& [name, v] : a.model.params()) EXPECT_EQ(b.model.params().at(name).value(), v.value()) << name;
  cfg.seed = 8;
  EXPECT_NE(train(videos, {}, cfg).history.back().total, a.history.back().total);
}

TEST(Train, StepCapAndBatching) {
  TrainConfig cfg;
  cfg.model = small_config();
  cfg.epochs = 10;
  cfg.batch_size = 2;
  cfg.max_steps = 5;
  const auto videos = synthetic_videos(3, 8, cfg.model, 3);
  const auto r = train(videos, {}, cfg);
  ASSERT_EQ(r.history.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(r.history[i].step, static_cast<long>(i));
  cfg.batch_size = 0;
  EXPECT_THROW(train(videos, {}, cfg), ArgumentError);
  cfg.batch_size = 1;
  cfg.mc_samples = 0;
  EXPECT_THROW(train(videos, {}, cfg), ArgumentError);
  EXPECT_THROW(train({}, {}, TrainConfig{}), ArgumentError);
}

namespace {

struct OneVideoFit {
  PreparedVideo video;
  Model model;
};

OneVideoFit fit_one_video(bool recon_through_features) {
  TrainConfig cfg;
  cfg.model.encoder = EncoderKind::toy;
  cfg.model.recon_through_features = recon_through_features;
  cfg.epochs = 150;
  cfg.seed = 1;
  auto videos = synthetic_videos(1, 32, cfg.model, 4);
  auto r = train(videos, {}, cfg);
  return {videos[0], std::move(r.model)};
}

int argmax_hits(const Matrix& probs, const std::vector<int>& y) {
  int hits = 0;
  for (Eigen::Index f = 0; f < probs.rows(); ++f) {
    Eigen::Index c;
    probs.row(f).maxCoeff(&c);
    hits += static_cast<int>(c) == y[static_cast<std::size_t>(f)];
  }
  return hits;
}

}  // namespace

TEST(Train, OverfitOneVideoObservedFeatures) {
  const auto fit = fit_one_video(false);
  const auto pred = predict_frame_scores(fit.model, fit.video.features, fit.video.query);
  const int hits = argmax_hits(pred.class_probs, fit.video.y);
  EXPECT_GE(hits, 31) << "correct frames " << hits << " / 32";
}

TEST(Train, OverfitOneVideoJointRanksBlockFirst) {
  // Joint training shrinks the fused features, so prior-head probabilities
  // stay below 0.5 inside the block; the ranking is still exact.
  const auto fit = fit_one_video(true);
  const auto scores = video_importance(fit.model, fit.video);
  const auto& y = fit.video.y;
  double lowest_block = 1e9, highest_rest = -1e9;
  for (std::size_t f = 0; f < y.size(); ++f) {
    if (y[f]) lowest_block = std::min(lowest_block, scores[f]);
    else highest_rest = std::max(highest_rest, scores[f]);
  }
  EXPECT_GT(lowest_block, highest_rest);
  const Matrix x = fit.model.fuse(fit.video.features, fit.video.query).value();
  EXPECT_GE(argmax_hits(helper_outcome(fit.model, ad::constant(x), fit.video.t).value(), y), 31);
}

TEST(Train, CheckpointsFinalAndBest) {
  const auto dir = temp_dir("condsum_train_ckpt");
  TrainConfig cfg;
  cfg.model = small_config();
  cfg.epochs = 3;
  const auto videos = synthetic_videos(4, 8, cfg.model, 5);
  const std::vector<PreparedVideo> tr(videos.begin(), videos.begin() + 3), va(videos.begin() + 3, videos.end());
  const auto r = train(tr, va, cfg, CheckpointPaths{dir / "final.bin", dir / "best.bin"});
  ASSERT_TRUE(std::filesystem::exists(dir / "final.bin"));
  ASSERT_TRUE(std::filesystem::exists(dir / "best.bin"));
  const auto best = load_checkpoint(dir / "best.bin");
  EXPECT_DOUBLE_EQ(best.metadata.at("validation_f1").get<double>(), r.best_validation_f1);
  EXPECT_GE(r.best_validation_f1, 0.0);
  const auto final_ckpt = load_checkpoint(dir / "final.bin");
  EXPECT_EQ(final_ckpt.metadata.at("step").get<long>(), 9);
  EXPECT_EQ(final_ckpt.metadata.at("train_config").at("epochs"), 3);
  std::filesystem::remove_all(dir);
}

TEST(Train, DivergenceKeepsLastCheckpoint) {
  const auto dir = temp_dir("condsum_train_nan");
  TrainConfig cfg;
  cfg.model = small_config();
  cfg.epochs = 1;
  const auto videos = synthetic_videos(1, 8, cfg.model, 6);
  Model init = Model::create(cfg.model, vocabulary_for(videos), 0);
  init.params().at(nets::recon + ".l2.b").mutable_value()(0, 0) = std::nan("");
  EXPECT_THROW(train(videos, {}, cfg, CheckpointPaths{dir / "final.bin", dir / "best.bin"}, init), NumericalError);
  EXPECT_TRUE(std::filesystem::exists(dir / "final.bin"));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RoundTripAtFloatPrecision) {
  const auto dir = temp_dir("condsum_ckpt_rt");
  const ModelConfig c = small_config(4, 8, 3);
  const Model m = Model::create(c, Vocabulary({"dog park"}), 9);
  save_checkpoint(dir / "m.bin", m, {{"note", "x"}});
  const auto back = load_checkpoint(dir / "m.bin");
  EXPECT_EQ(back.metadata.at("note"), "x");
  EXPECT_EQ(back.model.vocab().tokens(), m.vocab().tokens());
  EXPECT_EQ(back.model.config().n_classes, 3);
  EXPECT_EQ(back.model.config().attention.d_x, 8);
  EXPECT_EQ(back.model.config().ablation, c.ablation);
  ASSERT_EQ(back.model.params().size(), m.params().size());
  for (const auto& [name, v] : m.params())
    EXPECT_EQ(back.model.params().at(name).value(), v.value().cast<float>().cast<double>().eval()) << name;
  // Saving the reloaded model is a fixed point.
  save_checkpoint(dir / "m2.bin", back.model, back.metadata);
  const auto again = load_checkpoint(dir / "m2.bin");
  for (const auto& [name, v] : back.model.params()) EXPECT_EQ(again.model.params().at(name).value(), v.value());
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, MissingAndCorrupt) {
  const auto dir = temp_dir("condsum_ckpt_bad");
  EXPECT_THROW(load_checkpoint(dir / "none.bin"), StateError);
  {
    std::ofstream out(dir / "junk.bin", std::ios::binary);
    out << "not a checkpoint at all";
  }
  EXPECT_THROW(load_checkpoint(dir / "junk.bin"), LoadError);
  std::filesystem::remove_all(dir);
}

TEST(LossCsv, HeaderAndRows) {
  const auto dir = temp_dir("condsum_loss_csv");
  LossReport r;
  r.total = 1.5;
  r.recon = 1.5;
  r.step = 3;
  write_loss_csv(dir / "loss.csv", {r});
  std::ifstream in(dir / "loss.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "step,total,helper_t,helper_y,recon,outcome,intervention,kl_mc");
  EXPECT_EQ(row, "3,1.5,0,0,1.5,0,0,0");
  std::filesystem::remove_all(dir);
}

TEST(SmoothedLoss, TrailingMean) {
  std::vector<LossReport> h(5);
  for (int i = 0; i < 5; ++i) h[i].total = i;
  EXPECT_EQ(smoothed_loss(h, 2), (std::vector<double>{0, 0.5, 1.5, 2.5, 3.5}));
}

TEST(TrainConfig, FullScaleSettings) {
  const auto c = TrainConfig::full_scale();
  EXPECT_EQ(c.epochs, 60);
  EXPECT_EQ(c.learning_rate, 1e-6);
  EXPECT_EQ(c.beta1, 0.9);
  EXPECT_EQ(c.beta2, 0.999);
  EXPECT_EQ(c.epsilon, 1e-8);
}
