#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "../common/fixtures.hpp"
#include "mmclip/error.hpp"
#include "mmclip/finite_difference.hpp"
#include "mmclip/mitigation.hpp"

using namespace mmclip;
using mmclip::testing::dense_oracle;

namespace {

Network small_net(std::uint64_t seed) {
  Network net({4}, {LayerSpec::dense(8, Activation::relu, true),
                    LayerSpec::dense(6, Activation::relu, true),
                    LayerSpec::dense(3, Activation::none, false)});
  net.init_weights(seed);
  Rng rng = Rng::derive(seed, 5);
  for (std::size_t l = 0; l < 3; ++l)
    for (double& v : net.params(l)[1].data()) v = rng.uniform(-0.3, 0.3);
  return net;
}

CleanSet random_clean(std::uint64_t seed, std::size_t per_class = 5) {
  Rng rng(seed);
  Dataset d({4}, 3);
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      std::vector<double> x(4);
      for (double& v : x) v = rng.uniform();
      d.push(x, c);
    }
  return CleanSet(std::move(d));
}

std::vector<double> row(const Dataset& d, std::size_t i) {
  return {d.sample(i).begin(), d.sample(i).end()};
}

BoundVectors random_bounds(Rng& rng, std::vector<std::vector<double>>& z) {
  z = {std::vector<double>(8), std::vector<double>(6)};
  for (auto& layer : z)
    for (double& v : layer) v = rng.uniform(0.05, 0.6);
  return BoundVectors({Tensor({8}, z[0]), Tensor({6}, z[1])});
}

double oracle_margin(const std::vector<double>& logits, int c) {
  double other = -1e300;
  for (std::size_t k = 0; k < logits.size(); ++k)
    if (static_cast<int>(k) != c) other = std::max(other, logits[k]);
  return logits[static_cast<std::size_t>(c)] - other;
}

}  // namespace

TEST_CASE("unclipped bounds with lambda 0: mmac is zero, mmom is the plain cross-entropy") {
  const Network net = small_net(1);
  const CleanSet clean = random_clean(2);
  const BoundVectors none = BoundVectors::unbounded(net);
  const MarginPoints pts = initial_margin_points(net, 2, 0);

  CHECK(loss_mmac(net, none, clean, pts, 0.0).total == 0.0);

  double ce = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const auto f = dense_oracle(net, {}, row(clean.data(), i));
    double mx = *std::max_element(f.begin(), f.end()), s = 0.0;
    for (double v : f) s += std::exp(v - mx);
    ce += -(f[static_cast<std::size_t>(clean.labels()[i])] - mx - std::log(s));
  }
  ce /= static_cast<double>(clean.size());
  CHECK(loss_mmom(net, none, clean, pts, 0.0).total == doctest::Approx(ce).epsilon(1e-12));
}

TEST_CASE("losses match a hand-summed recompute") {
  Rng rng(11);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const Network net = small_net(seed);
    const CleanSet clean = random_clean(seed + 20);
    std::vector<std::vector<double>> z;
    const BoundVectors bounds = random_bounds(rng, z);
    const MarginPoints pts = initial_margin_points(net, 3, seed);
    const double lambda = 0.7;

    double mse = 0.0;
    for (std::size_t i = 0; i < clean.size(); ++i) {
      const auto x = row(clean.data(), i);
      const auto f = dense_oracle(net, {}, x), fb = dense_oracle(net, z, x);
      for (std::size_t k = 0; k < 3; ++k) mse += (fb[k] - f[k]) * (fb[k] - f[k]);
    }
    mse /= static_cast<double>(clean.size() * 3);

    std::vector<double> per_class(3, 0.0);
    for (const auto& r : pts.rows)
      per_class[static_cast<std::size_t>(r.cls)] +=
          oracle_margin(dense_oracle(net, z, r.point), r.cls) / 3.0;
    const double margin = (per_class[0] + per_class[1] + per_class[2]) / 3.0;

    double ce = 0.0;
    for (std::size_t i = 0; i < clean.size(); ++i) {
      const auto fb = dense_oracle(net, z, row(clean.data(), i));
      double s = 0.0;
      for (double v : fb) s += std::exp(v);
      ce += (std::log(s) - fb[static_cast<std::size_t>(clean.labels()[i])]) / clean.size();
    }

    const LossTerms t = loss_mmac(net, bounds, clean, pts, lambda);
    CHECK(t.data == doctest::Approx(mse).epsilon(1e-12));
    CHECK(t.margin == doctest::Approx(margin).epsilon(1e-12));
    CHECK(t.total == doctest::Approx(mse + lambda * margin).epsilon(1e-12));
    const LossTerms u = loss_mmom(net, bounds, clean, pts, lambda);
    CHECK(u.data == doctest::Approx(ce).epsilon(1e-12));
    CHECK(u.total == doctest::Approx(ce + lambda * margin).epsilon(1e-12));
  }
}

TEST_CASE("objective gradient with respect to the bounds matches finite differences") {
  Rng rng(3);
  for (Objective obj : {Objective::mmac, Objective::mmom}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const Network net = small_net(seed + 7);
      const CleanSet clean = random_clean(seed + 40);
      std::vector<std::vector<double>> z;
      const BoundVectors bounds = random_bounds(rng, z);
      const MarginPoints pts = initial_margin_points(net, 2, seed);
      const Tensor original = forward(net, clean.inputs());
      const ObjectiveValue v = evaluate_objective(net, bounds, clean, original, pts, obj, 0.3);
      for (std::size_t l = 0; l < 2; ++l) {
        auto fn = [&](const Tensor& t) {
          std::vector<Tensor> layers = bounds.layers();
          layers[l] = t;
          return evaluate_objective(net, BoundVectors(layers), clean, original, pts, obj, 0.3)
              .terms.total;
        };
        const Tensor numeric = finite_difference(fn, bounds[l], 1e-6);
        CHECK(relative_error(v.gradient[l], numeric) < 1e-5);
      }
    }
  }
}

TEST_CASE("lambda 0 mmac leaves the clean logits intact") {
  const Network net = small_net(4);
  const CleanSet clean = random_clean(5, 10);
  MitigationConfig cfg;
  cfg.lambda = 0.0;
  cfg.max_iterations = 20;
  cfg.beta = 1.0;
  cfg.ascent.steps = 5;
  const MitigationResult r = run_mitigation(net, clean, cfg);
  const Tensor a = forward(net, clean.inputs()), b = bounded_forward(net, r.bounds, clean.inputs());
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
  CHECK(mse / static_cast<double>(a.size()) < 1e-4);
}

TEST_CASE("a positive lambda shrinks the mean margin and keeps bounds above the floor") {
  const Network net = small_net(6);
  const CleanSet clean = random_clean(8, 10);
  for (BoundUpdate u : {BoundUpdate::adam, BoundUpdate::normalized}) {
    MitigationConfig cfg;
    cfg.lambda = 1.0;
    cfg.max_iterations = 40;
    cfg.tolerance = 1e-12;
    cfg.bound_step = 0.05;
    cfg.beta = 1.0;
    cfg.update = u;
    cfg.ascent.steps = 5;
    const MitigationResult r = run_mitigation(net, clean, cfg);
    REQUIRE(r.history.size() >= 2);
    CHECK(r.history.size() <= cfg.max_iterations);
    // at the final margin points, the learned bounds beat the initial ones
    CHECK(loss_mmac(net, r.bounds, clean, r.points, 1.0).margin <
          loss_mmac(net, r.initial_bounds, clean, r.points, 1.0).margin);
    for (std::size_t l = 0; l < r.bounds.size(); ++l)
      for (double v : r.bounds[l].data()) CHECK(v >= BoundVectors::kFloor);
    for (const auto& rec : r.history) CHECK(rec.class_margins.size() == 3);
  }
}

TEST_CASE("mmac on a poisoned model cuts the target-class margin by more than half") {
  const auto fx = mmclip::testing::poisoned_fixture();
  MitigationConfig cfg;
  cfg.beta = 1.0;
  cfg.lambda = 1.0;  // the backdoor desk setting, 1e-3 on the experiment scale
  cfg.ascent.steps = 10;
  const MitigationResult r = run_mitigation(fx.net, fx.clean, cfg);

  // mean of the local maxima found by full ascents, before and after
  auto mean_max = [&](const BoundVectors& z) {
    double s = 0.0;
    for (const auto& e : estimate_class_margins(fx.net, z, 0, 10, 11)) s += e.margin / 10.0;
    return s;
  };
  const double before = mean_max(BoundVectors::unbounded(fx.net)), after = mean_max(r.bounds);
  INFO("target-class mean max margin " << before << " -> " << after);
  CHECK(before > 0.0);
  CHECK(after < 0.5 * before);

  // logit preservation on D, recomputed from the stored logits
  const LogitPreservation lp = logit_preservation_report(fx.net, r.bounds, fx.clean);
  const Tensor f = forward(fx.net, fx.clean.inputs());
  const Tensor fb = bounded_forward(fx.net, r.bounds, fx.clean.inputs());
  const std::size_t n = fx.clean.size();
  for (std::size_t c = 0; c < 10; ++c) {
    double mse = 0.0, zeroed = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mse += std::pow(fb[i * 10 + c] - f[i * 10 + c], 2) / n;
      zeroed += f[i * 10 + c] * f[i * 10 + c] / n;
    }
    CHECK(lp.mse[c] == doctest::Approx(mse).epsilon(1e-12));
    CHECK(lp.mse[c] < 0.5 * zeroed);  // far closer than dropping the logits
  }
}

TEST_CASE("mitigation is deterministic") {
  const Network net = small_net(2);
  const CleanSet clean = random_clean(9, 6);
  MitigationConfig cfg;
  cfg.objective = Objective::mmom;
  cfg.lambda = 0.5;
  cfg.max_iterations = 15;
  cfg.ascent.steps = 4;
  const MitigationResult a = run_mitigation(net, clean, cfg), b = run_mitigation(net, clean, cfg);
  CHECK(a.bounds.layers() == b.bounds.layers());
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i)
    CHECK(a.history[i].terms.total == b.history[i].terms.total);
}

TEST_CASE("mitigation rejects bad settings") {
  const Network net = small_net(0);
  const CleanSet clean = random_clean(1);
  MitigationConfig bad;
  bad.max_iterations = 0;
  CHECK_THROWS_AS(run_mitigation(net, clean, bad), InvalidArgument);
  bad = MitigationConfig{};
  bad.tolerance = 0.0;
  CHECK_THROWS_AS(run_mitigation(net, clean, bad), InvalidArgument);
  bad = MitigationConfig{};
  bad.bound_step = -1.0;
  CHECK_THROWS_AS(run_mitigation(net, clean, bad), InvalidArgument);
  const MarginPoints pts = initial_margin_points(net, 2, 0);
  CHECK_THROWS_AS(loss_mmac(net, BoundVectors::unbounded(net), clean, pts, -1.0), InvalidArgument);
  MarginPoints uneven = pts;
  uneven.rows.pop_back();
  CHECK_THROWS_AS(loss_mmac(net, BoundVectors::unbounded(net), clean, uneven, 0.1),
                  InvalidArgument);
  CHECK(parse_objective("mmom") == Objective::mmom);
  CHECK_THROWS_AS(parse_objective("sgd"), InvalidArgument);
  CHECK(parse_update(update_name(BoundUpdate::normalized)) == BoundUpdate::normalized);
}
