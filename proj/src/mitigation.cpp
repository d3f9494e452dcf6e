#include "mmclip/mitigation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mmclip/graph.hpp"

namespace mmclip {

namespace {

constexpr std::size_t kChunk = 128;
constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-30;

void check_points(const Network& net, const MarginPoints& points) {
  if (points.per_class == 0 || points.rows.size() != points.per_class * net.num_classes())
    throw InvalidArgument("margin points must hold the same number of rows for every class");
}

// Mean over classes of the per-class mean margin, and its bound gradient.
// With equal restarts per class this is the plain mean over all rows.
LossTerms margin_term(const Network& net, const BoundVectors& bounds, const MarginPoints& points,
                      std::vector<Tensor>* gradient) {
  check_points(net, points);
  const std::size_t rows = points.rows.size(), dim = net.input_size();
  const std::size_t chunks = (rows + kChunk - 1) / kChunk;
  std::vector<double> sums(chunks, 0.0);
  std::vector<std::vector<Tensor>> grads(chunks);
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < chunks; ++c) {
    const std::size_t begin = c * kChunk, end = std::min(rows, begin + kChunk);
    Shape s{end - begin};
    s.insert(s.end(), net.input_shape().begin(), net.input_shape().end());
    std::vector<double> flat;
    flat.reserve((end - begin) * dim);
    std::vector<int> classes;
    for (std::size_t i = begin; i < end; ++i) {
      flat.insert(flat.end(), points.rows[i].point.begin(), points.rows[i].point.end());
      classes.push_back(points.rows[i].cls);
    }
    Graph g;
    const auto trace = build_forward(g, net, Tensor(std::move(s), std::move(flat)), &bounds,
                                     {.grad_bounds = gradient != nullptr});
    const NodeRef m = g.class_margin(trace.logits, std::move(classes));
    const NodeRef total = g.scalar_combine(std::span(&m, 1), {1.0 / static_cast<double>(rows)});
    sums[c] = g.value(total).item();
    if (gradient) {
      const Gradients gr = g.backward(total);
      for (NodeRef z : trace.bounds) grads[c].push_back(gr[z]);
    }
  }
  LossTerms t;
  t.margin = std::accumulate(sums.begin(), sums.end(), 0.0);
  if (gradient) {
    for (std::size_t c = 0; c < chunks; ++c)
      for (std::size_t l = 0; l < gradient->size(); ++l)
        for (std::size_t i = 0; i < (*gradient)[l].size(); ++i)
          (*gradient)[l][i] += grads[c][l][i];
  }
  return t;
}

double data_term(const Network& net, const BoundVectors& bounds, const CleanSet& clean,
                 const Tensor& original_logits, Objective objective, std::vector<Tensor>* gradient,
                 double weight) {
  Graph g;
  const auto trace = build_forward(g, net, clean.inputs(), &bounds,
                                   {.grad_bounds = gradient != nullptr});
  NodeRef loss;
  if (objective == Objective::mmac) {
    loss = g.mse(trace.logits, g.leaf(original_logits));
  } else {
    loss = g.softmax_ce(trace.logits, clean.labels());
  }
  if (gradient) {
    const Gradients gr = g.backward(loss);
    for (std::size_t l = 0; l < trace.bounds.size(); ++l) {
      const Tensor& d = gr[trace.bounds[l]];
      for (std::size_t i = 0; i < d.size(); ++i) (*gradient)[l][i] += weight * d[i];
    }
  }
  return g.value(loss).item();
}

std::vector<Tensor> zeros_like(const BoundVectors& bounds) {
  std::vector<Tensor> out;
  for (const Tensor& z : bounds.layers()) out.emplace_back(z.shape());
  return out;
}

LossTerms loss_with(const Network& net, const BoundVectors& bounds, const CleanSet& clean,
                    const MarginPoints& points, double lambda, Objective objective) {
  const Tensor original = forward(net, clean.inputs());
  return evaluate_objective(net, bounds, clean, original, points, objective, lambda).terms;
}

std::vector<double> class_mean_margins(const MarginPoints& points, std::size_t classes) {
  std::vector<double> out(classes, 0.0);
  for (const auto& r : points.rows)
    out[static_cast<std::size_t>(r.cls)] += r.margin / static_cast<double>(points.per_class);
  return out;
}

}  // namespace

std::string objective_name(Objective o) { return o == Objective::mmac ? "mmac" : "mmom"; }

Objective parse_objective(const std::string& name) {
  if (name == "mmac") return Objective::mmac;
  if (name == "mmom") return Objective::mmom;
  throw InvalidArgument("unknown objective '" + name + "' (expected mmac or mmom)");
}

ObjectiveValue evaluate_objective(const Network& net, const BoundVectors& bounds,
                                  const CleanSet& clean, const Tensor& original_logits,
                                  const MarginPoints& points, Objective objective, double lambda) {
  if (lambda < 0.0) throw InvalidArgument("lambda must be >= 0");
  ObjectiveValue v;
  v.gradient = zeros_like(bounds);
  std::vector<Tensor> margin_grad = zeros_like(bounds);
  v.terms.data = data_term(net, bounds, clean, original_logits, objective, &v.gradient, 1.0);
  v.terms.margin = margin_term(net, bounds, points, &margin_grad).margin;
  v.terms.total = v.terms.data + lambda * v.terms.margin;
  for (std::size_t l = 0; l < v.gradient.size(); ++l)
    for (std::size_t i = 0; i < v.gradient[l].size(); ++i)
      v.gradient[l][i] += lambda * margin_grad[l][i];
  return v;
}

LossTerms loss_mmac(const Network& net, const BoundVectors& bounds, const CleanSet& clean,
                    const MarginPoints& points, double lambda) {
  return loss_with(net, bounds, clean, points, lambda, Objective::mmac);
}

LossTerms loss_mmom(const Network& net, const BoundVectors& bounds, const CleanSet& clean,
                    const MarginPoints& points, double lambda) {
  return loss_with(net, bounds, clean, points, lambda, Objective::mmom);
}

std::string update_name(BoundUpdate u) { return u == BoundUpdate::adam ? "adam" : "normalized"; }

BoundUpdate parse_update(const std::string& name) {
  if (name == "adam") return BoundUpdate::adam;
  if (name == "normalized") return BoundUpdate::normalized;
  throw InvalidArgument("unknown bound update '" + name + "' (expected adam or normalized)");
}

MarginPoints initial_margin_points(const Network& net, std::size_t per_class, std::uint64_t seed) {
  MarginPoints p;
  p.per_class = per_class;
  for (std::size_t c = 0; c < net.num_classes(); ++c)
    for (std::size_t j = 0; j < per_class; ++j) {
      MarginEstimate e;
      e.cls = static_cast<int>(c);
      e.restart = j;
      e.point = restart_point(net.input_size(), seed, e.cls, j);
      p.rows.push_back(std::move(e));
    }
  return p;
}

MitigationResult run_mitigation(const Network& net, const CleanSet& clean,
                                const MitigationConfig& cfg) {
  if (cfg.max_iterations == 0) throw InvalidArgument("mitigation needs at least one iteration");
  if (!(cfg.tolerance > 0.0) || !(cfg.bound_step > 0.0))
    throw InvalidArgument("mitigation tolerance and step must be positive");
  if (clean.num_classes() != net.num_classes())
    throw InvalidArgument("clean set and network disagree on the number of classes");

  const std::size_t restarts = cfg.ascent.restarts ? cfg.ascent.restarts : clean.per_class();
  const Tensor x = clean.inputs();
  const Tensor original = forward(net, x);

  MitigationResult result;
  result.initial_bounds = init_bounds(net, x, cfg.beta);
  result.points = initial_margin_points(net, restarts, cfg.ascent.seed);
  std::vector<Tensor> z = result.initial_bounds.layers();
  BoundVectors bounds = result.initial_bounds;

  std::vector<Tensor> m1 = zeros_like(bounds), m2 = zeros_like(bounds);
  std::size_t steps = 0;
  double previous = 0.0;
  for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
    // Warm start: every ascent resumes from its best point of the last round.
    ascend(net, bounds, result.points.rows, cfg.ascent);
    const ObjectiveValue v =
        evaluate_objective(net, bounds, clean, original, result.points, cfg.objective, cfg.lambda);
    IterationRecord rec{it, v.terms, class_mean_margins(result.points, net.num_classes())};
    result.history.push_back(rec);
    if (!std::isfinite(v.terms.total))
      throw MitigationError("mitigation loss became non-finite at iteration " +
                                std::to_string(it),
                            result.history);
    if (it > 0 && std::abs(v.terms.total - previous) < cfg.tolerance) {
      result.converged = true;
      break;
    }
    previous = v.terms.total;
    if (it + 1 == cfg.max_iterations) break;

    // Descent on the normalized bounds u = z / z0.
    if (cfg.update == BoundUpdate::adam) {
      ++steps;
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(steps));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(steps));
      for (std::size_t l = 0; l < z.size(); ++l)
        for (std::size_t i = 0; i < z[l].size(); ++i) {
          const double z0 = result.initial_bounds[l][i];
          const double gu = v.gradient[l][i] * z0;
          m1[l][i] = kBeta1 * m1[l][i] + (1.0 - kBeta1) * gu;
          m2[l][i] = kBeta2 * m2[l][i] + (1.0 - kBeta2) * gu * gu;
          const double du =
              cfg.bound_step * (m1[l][i] / c1) / (std::sqrt(m2[l][i] / c2) + kEps);
          z[l][i] = std::max(z[l][i] - z0 * du, BoundVectors::kFloor);
        }
    } else {
      // Fixed length: the root-mean-square coordinate of the step is bound_step.
      double sq = 0.0;
      std::size_t count = 0;
      for (std::size_t l = 0; l < z.size(); ++l)
        for (std::size_t i = 0; i < z[l].size(); ++i) {
          const double gu = v.gradient[l][i] * result.initial_bounds[l][i];
          sq += gu * gu;
          ++count;
        }
      const double rms = std::sqrt(sq / static_cast<double>(count));
      if (rms == 0.0) continue;
      for (std::size_t l = 0; l < z.size(); ++l)
        for (std::size_t i = 0; i < z[l].size(); ++i) {
          const double z0 = result.initial_bounds[l][i];
          const double du = cfg.bound_step * v.gradient[l][i] * z0 / rms;
          z[l][i] = std::max(z[l][i] - z0 * du, BoundVectors::kFloor);
        }
    }
    bounds = BoundVectors(z);
  }
  result.bounds = bounds;
  return result;
}

}  // namespace mmclip
