#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <vector>

#include "fpcrf/backprop.hpp"
#include "fpcrf/features.hpp"
#include "fpcrf/inference.hpp"
#include "fpcrf/rng.hpp"
#include "fpcrf/training.hpp"
#include "fpcrf/types.hpp"
#include "test_util.hpp"

using namespace fpcrf;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// Feature entries keep a minimum magnitude so cosine-kernel norms stay safe.
FeatureMap random_features(SplitMix64& rng, int h, int w, int dim) {
  FeatureMap f(h, w, dim);
  for (double& v : f.data) {
    const double mag = rng.next_range(0.3, 1.2);
    v = rng.next_u64() % 2 ? mag : -mag;
  }
  return f;
}

TrainPatch random_patch(SplitMix64& rng, int h, int w, int classes, int fdim, bool with_rgb) {
  TrainPatch p;
  p.features = random_features(rng, h, w, fdim);
  if (with_rgb) {
    p.rgb = FeatureMap(h, w, 3);
    for (double& v : p.rgb.data) v = rng.next_double();
  }
  p.unary = UnaryField(h, w, classes);
  for (double& v : p.unary.psi) v = rng.next_range(0.0, 2.5);
  p.truth = LabelField(h, w, classes);
  for (int& l : p.truth.labels) l = rng.next_int(0, classes - 1);
  return p;
}

Model random_model(SplitMix64& rng, std::vector<KernelKind> kinds, int classes, int radius,
                   int iterations) {
  Model m;
  m.params = CrfParams::make(std::move(kinds), classes, radius, iterations, 0.0);
  for (double& w : m.params.kernel_weights) w = rng.next_range(0.3, 1.2);
  for (double& mu : m.params.compatibility) mu = rng.next_range(0.0, 1.5);
  m.params.bandwidths.alpha = rng.next_range(2.0, 4.0);
  m.params.bandwidths.beta = rng.next_range(0.08, 0.2);
  m.params.bandwidths.gamma = rng.next_range(2.0, 4.0);
  m.params.bandwidths.delta = rng.next_range(0.7, 1.6);
  m.params.bandwidths.zeta = rng.next_range(0.7, 1.6);
  m.params.bandwidths.eta = rng.next_range(2.0, 4.0);
  return m;
}

}  // namespace

TEST_CASE("toy features have the documented channel layout") {
  FeatureMap img(4, 5, 3);
  SplitMix64 rng(11);
  for (double& v : img.data) v = rng.next_double();
  const FeatureMap f = toy_features(img, 3);

  REQUIRE(f.height == 4);
  REQUIRE(f.width == 5);
  REQUIRE(f.dim == kToyFeatureDim);

  // RGB passthrough and normalized positions
  CHECK(f.at(2, 3, 0) == img.at(2, 3, 0));
  CHECK(f.at(2, 3, 1) == img.at(2, 3, 1));
  CHECK(f.at(2, 3, 2) == img.at(2, 3, 2));
  CHECK(f.at(0, 0, 3) == 0.0);
  CHECK(f.at(0, 0, 4) == 0.0);
  CHECK(f.at(3, 4, 3) == 3.0 / 4.0);
  CHECK(f.at(3, 4, 4) == 4.0 / 5.0);
}

TEST_CASE("toy features on a constant image: flat stats, zero gradient") {
  FeatureMap img(5, 5, 3);
  for (double& v : img.data) v = 0.7;
  const FeatureMap f = toy_features(img, 5);
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c) {
      CHECK_THAT(f.at(r, c, 5), WithinAbs(0.7, 1e-15));   // local mean
      CHECK_THAT(f.at(r, c, 6), WithinAbs(0.0, 1e-12));   // local std
      CHECK(f.at(r, c, 7) == 0.0);                        // gradient magnitude
    }
}

TEST_CASE("toy features local stats replicate borders") {
  // Window 3 at the (0,0) corner of a 3x3 image samples, after clamping,
  // pixel (0,0) four times, (0,1) and (1,0) twice each, and (1,1) once.
  FeatureMap img(3, 3, 3);
  const double vals[3][3] = {{0.1, 0.4, 0.2}, {0.7, 1.0, 0.2}, {0.2, 0.2, 0.2}};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      for (int d = 0; d < 3; ++d) img.at(r, c, d) = vals[r][c];

  const FeatureMap f = toy_features(img, 3);
  const double mean0 = (4.0 * 0.1 + 2.0 * 0.4 + 2.0 * 0.7 + 1.0) / 9.0;  // = 0.4
  CHECK_THAT(f.at(0, 0, 5), WithinAbs(mean0, 1e-12));
  const double var0 =
      (4.0 * 0.01 + 2.0 * 0.16 + 2.0 * 0.49 + 1.0) / 9.0 - mean0 * mean0;  // = 0.1
  CHECK_THAT(f.at(0, 0, 6), WithinAbs(std::sqrt(var0), 1e-12));
}

TEST_CASE("toy features need a 3x3 image for the gradient channel") {
  FeatureMap img(2, 2, 3);
  CHECK_THROWS_AS(toy_features(img, 3), ConfigError);
}

TEST_CASE("toy features reject bad windows and non-RGB input") {
  FeatureMap img(4, 4, 3);
  CHECK_THROWS_AS(toy_features(img, 4), ConfigError);
  CHECK_THROWS_AS(toy_features(img, 1), ConfigError);
  FeatureMap gray(4, 4, 1);
  CHECK_THROWS_AS(toy_features(gray, 3), ConfigError);
}

TEST_CASE("logistic unary with zero parameters is uniform") {
  LogisticUnary head(3, 2);
  FeatureMap f(2, 2, 2);
  f.data = {0.5, -1.0, 2.0, 0.0, -0.3, 0.7, 1.0, 1.0};
  const UnaryField psi = head.unary(f);
  for (double v : psi.psi) CHECK_THAT(v, WithinAbs(std::log(3.0), 1e-12));
}

TEST_CASE("logistic unary recovers softmax of the logits") {
  LogisticUnary head(2, 2);
  head.weights = {1.0, -0.5, 0.25, 0.75};
  head.bias = {0.1, -0.2};
  FeatureMap f(1, 1, 2);
  f.data = {0.6, -1.2};
  const UnaryField psi = head.unary(f);

  const double z0 = 1.0 * 0.6 + (-0.5) * (-1.2) + 0.1;
  const double z1 = 0.25 * 0.6 + 0.75 * (-1.2) - 0.2;
  const double lse = std::log(std::exp(z0) + std::exp(z1));
  CHECK_THAT(psi.at(0, 0, 0), WithinAbs(lse - z0, 1e-12));
  CHECK_THAT(psi.at(0, 0, 1), WithinAbs(lse - z1, 1e-12));
  // exp(-psi) is the softmax, so the two entries sum to one
  CHECK_THAT(std::exp(-psi.at(0, 0, 0)) + std::exp(-psi.at(0, 0, 1)), WithinAbs(1.0, 1e-12));
}

TEST_CASE("logistic unary backward matches finite differences of a linear functional") {
  SplitMix64 rng(21);
  const int classes = 3, dim = 4, h = 3, w = 2;
  LogisticUnary head(classes, dim);
  for (double& v : head.weights) v = rng.next_range(-0.8, 0.8);
  for (double& v : head.bias) v = rng.next_range(-0.5, 0.5);
  FeatureMap f = random_features(rng, h, w, dim);

  // loss = sum_x c[x] * psi[x] for a fixed random c: its head gradient is
  // exactly what backward(c) reports
  std::vector<double> c(static_cast<std::size_t>(h) * w * classes);
  for (double& v : c) v = rng.next_range(-1.0, 1.0);
  const auto loss_of = [&](const LogisticUnary& hd) {
    const UnaryField psi = hd.unary(f);
    double s = 0.0;
    for (std::size_t x = 0; x < c.size(); ++x) s += c[x] * psi.psi[x];
    return s;
  };

  std::vector<double> dw, db;
  head.backward(f, head.unary(f), c, dw, db);

  const double eps = 1e-5;
  for (std::size_t x = 0; x < head.weights.size(); ++x) {
    LogisticUnary plus = head, minus = head;
    plus.weights[x] += eps;
    minus.weights[x] -= eps;
    const double fd = (loss_of(plus) - loss_of(minus)) / (2.0 * eps);
    CHECK_THAT(dw[x], WithinAbs(fd, 1e-6));
  }
  for (std::size_t x = 0; x < head.bias.size(); ++x) {
    LogisticUnary plus = head, minus = head;
    plus.bias[x] += eps;
    minus.bias[x] -= eps;
    const double fd = (loss_of(plus) - loss_of(minus)) / (2.0 * eps);
    CHECK_THAT(db[x], WithinAbs(fd, 1e-6));
  }
}

TEST_CASE("nll loss on hand-checkable marginals") {
  ProbabilityField q(1, 2, 2);
  q.q = {0.5, 0.5, 0.25, 0.75};
  LabelField truth(1, 2, 2);
  truth.labels = {0, 1};
  CHECK_THAT(nll_loss(q, truth), WithinAbs((std::log(2.0) + std::log(4.0 / 3.0)) / 2.0, 1e-12));

  truth.labels = {0, 0};
  CHECK_THAT(nll_loss(q, truth), WithinAbs((std::log(2.0) + std::log(4.0)) / 2.0, 1e-12));
}

TEST_CASE("nll loss clamps vanishing probabilities") {
  ProbabilityField q(1, 1, 2);
  q.q = {0.0, 1.0};
  LabelField truth(1, 1, 2);
  truth.labels = {0};
  CHECK_THAT(nll_loss(q, truth), WithinRel(-std::log(1e-12), 1e-12));
}

TEST_CASE("nll loss validates shapes and label range") {
  ProbabilityField q(2, 2, 2);
  LabelField truth(2, 3, 2);
  CHECK_THROWS_AS(nll_loss(q, truth), ConfigError);
  LabelField bad(2, 2, 2);
  bad.labels[1] = 5;
  CHECK_THROWS_AS(nll_loss(q, bad), ConfigError);
}

TEST_CASE("unrolled forward reproduces the inference loop bitwise") {
  SplitMix64 rng(31);
  const TrainPatch patch = random_patch(rng, 6, 5, 3, 4, true);
  Model model = random_model(rng, {KernelKind::Appearance, KernelKind::FeatureDifference}, 3, 3, 4);

  const KernelStack stack = build_kernel_stack(patch.features, &patch.rgb, model.params);
  const UnrolledForward fwd = unrolled_forward(patch.unary, stack, model.params);
  const auto [q, trace] = mean_field(patch.unary, stack, model.params);  // tolerance is 0

  REQUIRE(trace.iterations_run == 4);
  REQUIRE(fwd.iterates.size() == 4);
  for (std::size_t x = 0; x < q.q.size(); ++x) CHECK(fwd.final_q().q[x] == q.q[x]);
}

TEST_CASE("analytic gradients match finite differences for every kernel kind") {
  SplitMix64 rng(41);
  const TrainConfig cfg;  // every group trainable
  const struct {
    KernelKind kind;
    bool rgb;
  } cases[] = {
      {KernelKind::Appearance, true},   {KernelKind::Smooth, false},
      {KernelKind::FeatureDifference, false}, {KernelKind::FeatureSpatial, false},
      {KernelKind::FeatureCosine, false},
  };
  for (const auto& kase : cases) {
    INFO("kernel kind " << kernel_name(kase.kind));
    const TrainPatch patch = random_patch(rng, 5, 4, 3, 3, kase.rgb);
    const Model model = random_model(rng, {kase.kind}, 3, 3, 3);
    const GradientReport report = check_gradients(model, patch, cfg);
    CAPTURE(report.max_rel_err);
    CHECK(report.all_within(1e-3));
  }
}

TEST_CASE("gradient check covers the expected parameter names") {
  SplitMix64 rng(43);
  const TrainPatch patch = random_patch(rng, 4, 4, 2, 3, false);
  const Model model =
      random_model(rng, {KernelKind::FeatureDifference, KernelKind::Smooth}, 2, 3, 2);
  const GradientReport report = check_gradients(model, patch, TrainConfig{});

  std::vector<std::string> names;
  for (const auto& e : report.entries) names.push_back(e.name);
  // two weights, delta + gamma, and a 2x2 mu — no head entries without a head
  CHECK(names == std::vector<std::string>{"w(fd)", "w(s)", "theta_delta", "theta_gamma", "mu(0,0)",
                                          "mu(0,1)", "mu(1,0)", "mu(1,1)"});
  CHECK(report.all_within(1e-3));
}

TEST_CASE("frozen parameter groups are omitted from the gradient check") {
  SplitMix64 rng(45);
  const TrainPatch patch = random_patch(rng, 4, 4, 2, 3, false);
  const Model model = random_model(rng, {KernelKind::FeatureDifference}, 2, 3, 2);
  TrainConfig cfg;
  cfg.train_bandwidths = false;
  cfg.train_compatibility = false;
  const GradientReport report = check_gradients(model, patch, cfg);
  REQUIRE(report.entries.size() == 1);
  CHECK(report.entries[0].name == "w(fd)");
}

TEST_CASE("gradients flow through a jointly trained logistic head") {
  SplitMix64 rng(47);
  TrainPatch patch = random_patch(rng, 4, 4, 2, 3, false);
  Model model = random_model(rng, {KernelKind::FeatureDifference}, 2, 3, 3);
  LogisticUnary head(2, 3);
  for (double& v : head.weights) v = rng.next_range(-0.6, 0.6);
  for (double& v : head.bias) v = rng.next_range(-0.3, 0.3);
  model.head = head;

  const GradientReport report = check_gradients(model, patch, TrainConfig{});
  bool saw_head = false;
  for (const auto& e : report.entries) saw_head |= e.name.rfind("head_", 0) == 0;
  CHECK(saw_head);
  CAPTURE(report.max_rel_err);
  CHECK(report.all_within(1e-3));
}

TEST_CASE("multi-kernel multi-iteration gradient check stays within tolerance") {
  SplitMix64 rng(49);
  const TrainPatch patch = random_patch(rng, 6, 6, 3, 4, true);
  const Model model = random_model(
      rng, {KernelKind::Appearance, KernelKind::FeatureSpatial, KernelKind::Smooth}, 3, 4, 5);
  const GradientReport report = check_gradients(model, patch, TrainConfig{});
  CAPTURE(report.max_rel_err);
  CHECK(report.all_within(1e-3));
}

TEST_CASE("batch loss and gradients are the mean of the per-patch values") {
  SplitMix64 rng(51);
  const TrainPatch a = random_patch(rng, 5, 5, 2, 3, false);
  const TrainPatch b = random_patch(rng, 5, 5, 2, 3, false);
  const Model model = random_model(rng, {KernelKind::FeatureDifference}, 2, 3, 3);
  const TrainConfig cfg;

  ModelGradients ga, gb, gab;
  const double la = loss_and_gradients(model, {&a}, cfg, ga);
  const double lb = loss_and_gradients(model, {&b}, cfg, gb);
  const double lab = loss_and_gradients(model, {&a, &b}, cfg, gab);

  CHECK_THAT(lab, WithinRel((la + lb) / 2.0, 1e-14));
  for (std::size_t m = 0; m < gab.d_weights.size(); ++m)
    CHECK_THAT(gab.d_weights[m], WithinRel((ga.d_weights[m] + gb.d_weights[m]) / 2.0, 1e-12));
  for (std::size_t x = 0; x < gab.d_compatibility.size(); ++x)
    CHECK_THAT(gab.d_compatibility[x],
               WithinRel((ga.d_compatibility[x] + gb.d_compatibility[x]) / 2.0, 1e-12));
  CHECK_THAT(gab.d_bandwidths.delta,
             WithinRel((ga.d_bandwidths.delta + gb.d_bandwidths.delta) / 2.0, 1e-12));
}

TEST_CASE("mini-batches reject mixed sizes and emptiness") {
  SplitMix64 rng(53);
  const TrainPatch a = random_patch(rng, 5, 5, 2, 3, false);
  const TrainPatch b = random_patch(rng, 4, 5, 2, 3, false);
  const Model model = random_model(rng, {KernelKind::FeatureDifference}, 2, 3, 2);
  ModelGradients g;
  CHECK_THROWS_AS(loss_and_gradients(model, {}, TrainConfig{}, g), ConfigError);
  CHECK_THROWS_MATCHES(loss_and_gradients(model, {&a, &b}, TrainConfig{}, g), ConfigError,
                       MessageMatches(ContainsSubstring("mixes patch sizes")));
}

TEST_CASE("non-finite losses are reported, not propagated") {
  SplitMix64 rng(55);
  const TrainPatch patch = random_patch(rng, 4, 4, 2, 3, false);
  Model model = random_model(rng, {KernelKind::FeatureDifference}, 2, 3, 2);
  model.params.kernel_weights[0] = std::numeric_limits<double>::quiet_NaN();
  ModelGradients g;
  CHECK_THROWS_AS(loss_and_gradients(model, {&patch}, TrainConfig{}, g), NumericError);
}

TEST_CASE("sgd step arithmetic by hand") {
  Model model;
  model.params = CrfParams::make({KernelKind::FeatureDifference}, 2, 3, 2, 0.0);
  model.params.kernel_weights[0] = 1.0;
  model.params.bandwidths.delta = 2.0;

  ModelGradients g;
  g.d_weights = {0.25};
  g.d_bandwidths = Bandwidths{0.0, 0.0, 0.0, 0.5, 0.0, 0.0};
  g.d_compatibility.assign(4, 0.0);
  g.d_compatibility[1] = -1.0;

  TrainConfig cfg;
  sgd_step(model, g, 0.1, cfg);
  CHECK_THAT(model.params.kernel_weights[0], WithinAbs(1.0 - 0.1 * 0.25, 1e-15));
  // log-space bandwidth step: theta * exp(-lr * theta * g)
  CHECK_THAT(model.params.bandwidths.delta, WithinAbs(2.0 * std::exp(-0.1 * 2.0 * 0.5), 1e-15));
  CHECK(model.params.bandwidths.delta > 0.0);
  CHECK_THAT(model.params.mu(0, 1), WithinAbs(1.0 + 0.1, 1e-15));  // Potts off-diagonal was 1
  CHECK(model.params.mu(0, 0) == 0.0);
}

TEST_CASE("sgd step leaves frozen groups untouched") {
  Model model;
  model.params = CrfParams::make({KernelKind::FeatureDifference}, 2, 3, 2, 0.0);
  ModelGradients g;
  g.d_weights = {1.0};
  g.d_bandwidths = Bandwidths{0.0, 0.0, 0.0, 1.0, 0.0, 0.0};
  g.d_compatibility.assign(4, 1.0);

  TrainConfig cfg;
  cfg.train_weights = false;
  cfg.train_bandwidths = false;
  cfg.train_compatibility = false;
  sgd_step(model, g, 0.5, cfg);
  CHECK(model.params.kernel_weights[0] == 1.0);
  CHECK(model.params.bandwidths.delta == 1.0);
  CHECK(model.params.mu(0, 1) == 1.0);
}

TEST_CASE("bandwidth updates cannot cross zero") {
  Model model;
  model.params = CrfParams::make({KernelKind::FeatureDifference}, 2, 3, 2, 0.0);
  model.params.bandwidths.delta = 0.05;
  ModelGradients g;
  g.d_weights = {0.0};
  g.d_bandwidths = Bandwidths{0.0, 0.0, 0.0, 1000.0, 0.0, 0.0};
  g.d_compatibility.assign(4, 0.0);
  sgd_step(model, g, 1.0, TrainConfig{});
  CHECK(model.params.bandwidths.delta > 0.0);
}

TEST_CASE("zero epochs leave the model untouched with an empty history") {
  SplitMix64 rng(57);
  std::vector<TrainPatch> data;
  data.push_back(random_patch(rng, 4, 4, 2, 3, false));
  Model model = random_model(rng, {KernelKind::FeatureDifference}, 2, 3, 2);
  const std::vector<double> before_w = model.params.kernel_weights;

  TrainConfig cfg;
  cfg.epochs = 0;
  const TrainResult result = train(model, data, cfg);
  CHECK(result.epoch_loss.empty());
  CHECK(result.model.params.kernel_weights == before_w);
  CHECK(result.model.params.compatibility == model.params.compatibility);
}

TEST_CASE("training is deterministic in the seed") {
  SplitMix64 rng(59);
  std::vector<TrainPatch> data;
  for (int i = 0; i < 5; ++i) data.push_back(random_patch(rng, 4, 4, 2, 3, false));
  const Model model = random_model(rng, {KernelKind::FeatureDifference}, 2, 3, 2);

  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.learning_rate = 0.05;
  cfg.seed = 1234;

  const TrainResult a = train(model, data, cfg);
  const TrainResult b = train(model, data, cfg);
  CHECK(a.epoch_loss == b.epoch_loss);
  CHECK(a.model.params.kernel_weights == b.model.params.kernel_weights);
  CHECK(a.model.params.compatibility == b.model.params.compatibility);
  CHECK(a.model.params.bandwidths.delta == b.model.params.bandwidths.delta);

  cfg.seed = 99;
  const TrainResult c = train(model, data, cfg);
  // a different shuffle order visits batches differently
  CHECK(a.epoch_loss != c.epoch_loss);
}

TEST_CASE("training reduces the loss on a learnable dataset") {
  // Head-only model (no pairwise kernels): plain logistic regression on
  // linearly separable features must make steady progress.
  SplitMix64 rng(61);
  std::vector<TrainPatch> data;
  for (int i = 0; i < 6; ++i) {
    TrainPatch p;
    p.features = FeatureMap(5, 5, 2);
    p.truth = LabelField(5, 5, 2);
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 5; ++c) {
        const int label = rng.next_u64() % 2;
        p.features.at(r, c, 0) = (label ? 1.0 : -1.0) + rng.next_range(-0.2, 0.2);
        p.features.at(r, c, 1) = rng.next_range(-0.5, 0.5);
        p.truth.labels[static_cast<std::size_t>(r) * 5 + c] = label;
      }
    data.push_back(std::move(p));
  }

  Model model;
  model.params = CrfParams::make({}, 2, 3, 2, 0.0);
  model.head = LogisticUnary(2, 2);

  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 3;
  cfg.learning_rate = 0.5;
  const TrainResult result = train(model, data, cfg);
  REQUIRE(result.epoch_loss.size() == 30);
  // the first epoch starts near log(2) (updates land mid-epoch, so only
  // roughly); by the end the separable problem is mostly solved
  CHECK(result.epoch_loss.front() > 0.4);
  CHECK(result.epoch_loss.back() < 0.25 * result.epoch_loss.front());
}

TEST_CASE("mixed patch sizes train by splitting batches") {
  SplitMix64 rng(63);
  std::vector<TrainPatch> data;
  data.push_back(random_patch(rng, 4, 4, 2, 3, false));
  data.push_back(random_patch(rng, 5, 4, 2, 3, false));
  data.push_back(random_patch(rng, 4, 4, 2, 3, false));
  const Model model = random_model(rng, {KernelKind::FeatureDifference}, 2, 3, 2);

  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.learning_rate = 0.01;
  const TrainResult result = train(model, data, cfg);  // must not throw
  CHECK(result.epoch_loss.size() == 2);
}

TEST_CASE("training a single patch with threads matches single-threaded") {
  SplitMix64 rng(65);
  std::vector<TrainPatch> data;
  for (int i = 0; i < 3; ++i) data.push_back(random_patch(rng, 6, 6, 2, 3, false));
  const Model model = random_model(rng, {KernelKind::FeatureDifference, KernelKind::Smooth}, 2, 3, 3);

  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.learning_rate = 0.05;
  const TrainResult t1 = train(model, data, cfg, 1);
  const TrainResult t4 = train(model, data, cfg, 4);
  CHECK(t1.epoch_loss == t4.epoch_loss);
  CHECK(t1.model.params.kernel_weights == t4.model.params.kernel_weights);
  CHECK(t1.model.params.compatibility == t4.model.params.compatibility);
}

TEST_CASE("checkpoints round-trip through a directory") {
  TempDir tmp("training");
  SplitMix64 rng(67);
  Model model = random_model(rng, {KernelKind::FeatureDifference, KernelKind::Smooth}, 3, 4, 5);
  // float-exact values make the round trip byte-for-byte comparable
  model.params.kernel_weights = {0.75, 1.5};
  model.params.bandwidths = Bandwidths{3.0, 0.125, 2.5, 1.25, 0.5, 4.0};
  model.params.tolerance = 0.0078125;
  LogisticUnary head(3, 2);
  head.weights = {0.5, -0.25, 1.0, 0.0, -1.5, 2.0};
  head.bias = {0.5, 0.0, -0.5};
  model.head = head;

  const std::string dir = tmp.file("ckpt");
  save_checkpoint(model, dir);
  const Model loaded = load_checkpoint(dir);

  CHECK(loaded.params.kernel_kinds == model.params.kernel_kinds);
  CHECK(loaded.params.classes == 3);
  CHECK(loaded.params.filter_radius == 4);
  CHECK(loaded.params.iterations == 5);
  CHECK(loaded.params.tolerance == 0.0078125);
  CHECK(loaded.params.kernel_weights == model.params.kernel_weights);
  CHECK(loaded.params.bandwidths.beta == 0.125);
  CHECK(loaded.params.bandwidths.eta == 4.0);
  REQUIRE(loaded.head.has_value());
  CHECK(loaded.head->weights == head.weights);
  CHECK(loaded.head->bias == head.bias);
  // mu went through float32; it was random doubles, so compare loosely
  for (std::size_t x = 0; x < model.params.compatibility.size(); ++x)
    CHECK_THAT(loaded.params.compatibility[x], WithinAbs(model.params.compatibility[x], 1e-6));
}

TEST_CASE("checkpoints without kernels or head omit those tensors") {
  TempDir tmp("training");
  Model model;
  model.params = CrfParams::make({}, 2, 3, 2, 0.0);
  const std::string dir = tmp.file("ckpt_bare");
  save_checkpoint(model, dir);
  CHECK_FALSE(std::filesystem::exists(dir + "/kernel_weights.fpt"));
  CHECK_FALSE(std::filesystem::exists(dir + "/head_weights.fpt"));

  const Model loaded = load_checkpoint(dir);
  CHECK(loaded.params.kernel_kinds.empty());
  CHECK(loaded.params.kernel_weights.empty());
  CHECK_FALSE(loaded.head.has_value());
}

TEST_CASE("loading twice produces identical parameters") {
  TempDir tmp("training");
  SplitMix64 rng(69);
  Model model = random_model(rng, {KernelKind::FeatureSpatial}, 2, 3, 2);
  const std::string dir = tmp.file("ckpt_repeat");
  save_checkpoint(model, dir);
  const Model a = load_checkpoint(dir);
  const Model b = load_checkpoint(dir);
  CHECK(a.params.kernel_weights == b.params.kernel_weights);
  CHECK(a.params.compatibility == b.params.compatibility);
  CHECK(a.params.bandwidths.zeta == b.params.bandwidths.zeta);
}

TEST_CASE("checkpoint manifests are validated") {
  TempDir tmp("training");
  SplitMix64 rng(71);
  Model model = random_model(rng, {KernelKind::FeatureDifference}, 2, 3, 2);

  SECTION("unknown key") {
    const std::string dir = tmp.file("ckpt_unknown");
    save_checkpoint(model, dir);
    write_text(dir + "/manifest.txt",
               "format = fpcrf-checkpoint-v1\nclasses = 2\nkernels = fd\nfilter_radius = 3\n"
               "iterations = 2\ntolerance = 0\nhas_head = 0\nsurprise = 1\n");
    CHECK_THROWS_MATCHES(load_checkpoint(dir), ConfigError,
                         MessageMatches(ContainsSubstring("surprise")));
  }
  SECTION("wrong format tag") {
    const std::string dir = tmp.file("ckpt_format");
    save_checkpoint(model, dir);
    write_text(dir + "/manifest.txt", "format = something-else\n");
    CHECK_THROWS_AS(load_checkpoint(dir), ConfigError);
  }
  SECTION("missing key") {
    const std::string dir = tmp.file("ckpt_missing");
    save_checkpoint(model, dir);
    write_text(dir + "/manifest.txt",
               "format = fpcrf-checkpoint-v1\nclasses = 2\nkernels = fd\n");
    CHECK_THROWS_MATCHES(load_checkpoint(dir), ConfigError,
                         MessageMatches(ContainsSubstring("missing")));
  }
  SECTION("tensor shape mismatch") {
    const std::string dir = tmp.file("ckpt_shape");
    save_checkpoint(model, dir);
    Tensor t;
    t.dims = {3, 3};
    t.data.assign(9, 0.0f);
    write_tensor(t, dir + "/mu.fpt");
    CHECK_THROWS_MATCHES(load_checkpoint(dir), ConfigError,
                         MessageMatches(ContainsSubstring("classes x classes")));
  }
  SECTION("missing directory") {
    CHECK_THROWS_AS(load_checkpoint(tmp.file("nope")), IoError);
  }
}

TEST_CASE("training resumes from a loaded checkpoint") {
  TempDir tmp("training");
  SplitMix64 rng(73);
  std::vector<TrainPatch> data;
  for (int i = 0; i < 3; ++i) data.push_back(random_patch(rng, 4, 4, 2, 3, false));
  Model model = random_model(rng, {KernelKind::FeatureDifference}, 2, 3, 2);

  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.learning_rate = 0.02;
  const TrainResult first = train(model, data, cfg);
  const std::string dir = tmp.file("ckpt_resume");
  save_checkpoint(first.model, dir);

  const Model resumed = load_checkpoint(dir);
  const TrainResult second = train(resumed, data, cfg);  // must run cleanly
  CHECK(second.epoch_loss.size() == 2);
}

TEST_CASE("train rejects bad configurations") {
  SplitMix64 rng(75);
  std::vector<TrainPatch> data;
  data.push_back(random_patch(rng, 4, 4, 2, 3, false));
  const Model model = random_model(rng, {KernelKind::FeatureDifference}, 2, 3, 2);

  TrainConfig cfg;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(train(model, data, cfg), ConfigError);
  cfg = TrainConfig{};
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(train(model, data, cfg), ConfigError);
  CHECK_THROWS_AS(train(model, {}, TrainConfig{}), ConfigError);
}
