#include "mmclip/margin.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mmclip/error.hpp"
#include "mmclip/graph.hpp"
#include "mmclip/random.hpp"

namespace mmclip {

namespace {

constexpr std::size_t kChunk = 128;
constexpr double kStationary = 1e-9;

Tensor batch_of(const Network& net, std::span<const double> flat, std::size_t rows) {
  Shape s{rows};
  s.insert(s.end(), net.input_shape().begin(), net.input_shape().end());
  return Tensor(std::move(s), std::vector<double>(flat.begin(), flat.end()));
}

struct MarginAndGrad {
  std::vector<double> margin;
  std::vector<double> grad;  // rows x dim
};

MarginAndGrad margin_gradients(const Network& net, const BoundVectors& bounds,
                               const Tensor& batch, std::span<const int> classes) {
  Graph g;
  const auto trace = build_forward(g, net, batch, &bounds, {.grad_input = true});
  const NodeRef m = g.class_margin(trace.logits, {classes.begin(), classes.end()});
  const NodeRef total = g.scalar_combine(std::span(&m, 1), {1.0});
  MarginAndGrad out;
  out.margin = g.value(m).storage();
  out.grad = g.backward(total)[trace.input].storage();
  return out;
}

// One ascent over rows [begin, end) of `rows`.
void ascend_chunk(const Network& net, const BoundVectors& bounds,
                  std::span<MarginEstimate> rows, const AscentConfig& cfg) {
  const std::size_t dim = net.input_size(), n = rows.size();
  std::vector<double> x(n * dim);
  std::vector<int> classes(n);
  std::vector<std::uint8_t> active(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(rows[i].point.begin(), rows[i].point.end(), x.begin() + i * dim);
    classes[i] = rows[i].cls;
    rows[i].margin = -std::numeric_limits<double>::infinity();
    rows[i].trace_length = 0;
    rows[i].converged = false;
    rows[i].aborted = false;
  }

  for (std::size_t step = 0; step <= cfg.steps; ++step) {
    MarginAndGrad mg;
    try {
      mg = margin_gradients(net, bounds, batch_of(net, x, n), classes);
    } catch (const NonFiniteError&) {
      // Find the offending rows one at a time and retire them.
      mg.margin.assign(n, 0.0);
      mg.grad.assign(n * dim, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        if (!active[i]) continue;
        try {
          auto one = margin_gradients(
              net, bounds, batch_of(net, std::span(x).subspan(i * dim, dim), 1),
              std::span(classes).subspan(i, 1));
          mg.margin[i] = one.margin[0];
          std::copy(one.grad.begin(), one.grad.end(), mg.grad.begin() + i * dim);
        } catch (const NonFiniteError&) {
          active[i] = 0;
          rows[i].aborted = true;
        }
      }
    }
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      auto& r = rows[i];
      ++r.trace_length;
      if (mg.margin[i] > r.margin) {
        r.margin = mg.margin[i];
        std::copy(x.begin() + i * dim, x.begin() + (i + 1) * dim, r.point.begin());
      }
      if (step == cfg.steps) continue;
      double moved = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double g = mg.grad[i * dim + j];
        if (!std::isfinite(g)) {
          active[i] = 0;
          r.aborted = true;
          break;
        }
        double& xv = x[i * dim + j];
        const double next = std::clamp(xv + cfg.step_size * g, 0.0, 1.0);
        moved = std::max(moved, std::abs(next - xv));
        xv = next;
      }
      r.converged = moved < kStationary;
      any = any || active[i];
    }
    if (!any) break;
  }
}

}  // namespace

std::vector<double> margins(const Network& net, const BoundVectors& bounds, const Tensor& batch,
                            std::span<const int> classes) {
  Graph g;
  const auto trace = build_forward(g, net, batch, &bounds);
  return g.value(g.class_margin(trace.logits, {classes.begin(), classes.end()})).storage();
}

void ascend(const Network& net, const BoundVectors& bounds, std::vector<MarginEstimate>& rows,
            const AscentConfig& cfg) {
  const std::size_t dim = net.input_size();
  for (const auto& r : rows) {
    if (r.point.size() != dim) throw ShapeError("ascent start point has the wrong dimension");
    for (double v : r.point)
      if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("ascent start point outside [0,1]^d");
  }
  const std::size_t chunks = (rows.size() + kChunk - 1) / kChunk;
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < chunks; ++c) {
    const std::size_t begin = c * kChunk, end = std::min(rows.size(), begin + kChunk);
    ascend_chunk(net, bounds, std::span(rows).subspan(begin, end - begin), cfg);
  }
}

MarginEstimate ascend_margin(const Network& net, const BoundVectors& bounds, int cls,
                             std::span<const double> x_init, const AscentConfig& cfg) {
  std::vector<MarginEstimate> rows(1);
  rows[0].cls = cls;
  rows[0].point.assign(x_init.begin(), x_init.end());
  ascend(net, bounds, rows, cfg);
  return rows[0];
}

std::vector<double> restart_point(std::size_t dim, std::uint64_t seed, int cls,
                                  std::size_t restart) {
  Rng rng = Rng::derive(seed, (static_cast<std::uint64_t>(cls) << 32) | restart);
  std::vector<double> x(dim);
  for (double& v : x) v = rng.uniform();
  return x;
}

std::vector<MarginEstimate> estimate_class_margins(const Network& net, const BoundVectors& bounds,
                                                   int cls, std::size_t restarts,
                                                   std::uint64_t seed, AscentConfig cfg) {
  if (restarts == 0) throw InvalidArgument("estimate_class_margins: need at least one restart");
  if (cls < 0 || static_cast<std::size_t>(cls) >= net.num_classes())
    throw InvalidArgument("estimate_class_margins: class out of range");
  std::vector<MarginEstimate> rows(restarts);
  for (std::size_t j = 0; j < restarts; ++j) {
    rows[j].cls = cls;
    rows[j].restart = j;
    rows[j].point = restart_point(net.input_size(), seed, cls, j);
  }
  ascend(net, bounds, rows, cfg);
  std::stable_sort(rows.begin(), rows.end(), [](const MarginEstimate& a, const MarginEstimate& b) {
    return a.margin > b.margin;
  });
  return rows;
}

double brute_force_margin(const Network& net, const BoundVectors& bounds, int cls,
                          std::size_t resolution) {
  const std::size_t dim = net.input_size();
  if (dim > 3) throw InvalidArgument("brute_force_margin: input dimension " +
                                     std::to_string(dim) + " is too large (max 3)");
  if (resolution < 2) throw InvalidArgument("brute_force_margin: resolution must be >= 2");
  std::size_t total = 1;
  for (std::size_t d = 0; d < dim; ++d) total *= resolution;
  const double h = 1.0 / static_cast<double>(resolution - 1);
  double best = -std::numeric_limits<double>::infinity();
  constexpr std::size_t kGridChunk = 4096;
  for (std::size_t start = 0; start < total; start += kGridChunk) {
    const std::size_t n = std::min(kGridChunk, total - start);
    std::vector<double> pts(n * dim);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t idx = start + i;
      for (std::size_t d = 0; d < dim; ++d) {
        pts[i * dim + d] = static_cast<double>(idx % resolution) * h;
        idx /= resolution;
      }
    }
    const std::vector<int> classes(n, cls);
    for (double m : margins(net, bounds, batch_of(net, pts, n), classes)) best = std::max(best, m);
  }
  return best;
}

std::vector<double> directional_overfit_stats(const Network& net, const BoundVectors* bounds,
                                              std::span<const double> delta, const Tensor& batch,
                                              int source, int target) {
  if (source == target) throw InvalidArgument("directional statistic needs source != target");
  const std::size_t classes = net.num_classes(), dim = net.input_size();
  if (delta.size() != dim) throw ShapeError("delta does not match the input dimension");
  Graph g;
  const auto trace = build_forward(g, net, batch, bounds, {.grad_input = true});
  Tensor selector(Shape{classes, 1});
  selector[static_cast<std::size_t>(target)] = 1.0;
  selector[static_cast<std::size_t>(source)] = -1.0;
  const NodeRef diff = g.matmul(trace.logits, g.leaf(selector));
  const NodeRef total = g.scalar_combine(std::span(&diff, 1), {1.0});
  const Tensor grad = g.backward(total)[trace.input];
  const std::size_t rows = batch.dim(0);
  std::vector<double> out(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < dim; ++j) out[i] += delta[j] * grad[i * dim + j];
  return out;
}

double directional_overfit_stat(const Network& net, std::span<const double> delta,
                                std::span<const double> x_source, int source, int target) {
  return directional_overfit_stats(net, nullptr, delta, batch_of(net, x_source, 1), source,
                                   target)[0];
}

std::vector<double> logit_gradient_norms(const Network& net, const BoundVectors* bounds,
                                         const Tensor& batch, int cls) {
  const std::size_t dim = net.input_size();
  Graph g;
  const auto trace = build_forward(g, net, batch, bounds, {.grad_input = true});
  Tensor selector(Shape{net.num_classes(), 1});
  selector[static_cast<std::size_t>(cls)] = 1.0;
  const NodeRef picked = g.matmul(trace.logits, g.leaf(selector));
  const NodeRef total = g.scalar_combine(std::span(&picked, 1), {1.0});
  const Tensor grad = g.backward(total)[trace.input];
  std::vector<double> out(batch.dim(0), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t j = 0; j < dim; ++j) out[i] += grad[i * dim + j] * grad[i * dim + j];
    out[i] = std::sqrt(out[i]);
  }
  return out;
}

MarginFloor margin_floor(const Network& net, const Dataset& ds) {
  if (ds.empty()) throw InvalidArgument("margin_floor: dataset is empty");
  MarginFloor f;
  f.total = ds.size();
  f.tau = std::numeric_limits<double>::infinity();
  const Tensor all = ds.inputs();
  std::size_t offset = 0;
  for (const Tensor& chunk : split_batch(all, 2048)) {
    const Tensor lg = forward(net, chunk);
    const std::size_t c = lg.dim(1);
    for (std::size_t i = 0; i < chunk.dim(0); ++i) {
      auto row = lg.data().subspan(i * c, c);
      const auto y = static_cast<std::size_t>(ds.label(offset + i));
      double other = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < c; ++k)
        if (k != y) other = std::max(other, row[k]);
      const double m = row[y] - other;
      if (m > 0.0) {
        ++f.correct;
        f.tau = std::min(f.tau, m);
      }
    }
    offset += chunk.dim(0);
  }
  if (f.correct == 0) throw InvalidArgument("margin_floor: no correctly classified samples");
  return f;
}

LogitPreservation logit_preservation_report(const Network& net, const BoundVectors& bounds,
                                            const CleanSet& clean) {
  if (clean.size() == 0) throw InvalidArgument("logit_preservation_report: clean set is empty");
  const Tensor x = clean.inputs();
  const Tensor f = forward(net, x);
  const Tensor fbar = bounded_forward(net, bounds, x);
  const std::size_t classes = net.num_classes(), n = x.dim(0);
  LogitPreservation rep;
  rep.mse.assign(classes, 0.0);
  rep.gradient_norm_ratio.assign(classes, 0.0);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      const double d = fbar[i * classes + c] - f[i * classes + c];
      rep.mse[c] += d * d / static_cast<double>(n);
    }
    const auto plain = logit_gradient_norms(net, nullptr, x, static_cast<int>(c));
    const auto clipped = logit_gradient_norms(net, &bounds, x, static_cast<int>(c));
    std::size_t used = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (plain[i] > 0.0) {
        rep.gradient_norm_ratio[c] += clipped[i] / plain[i];
        ++used;
      }
    rep.gradient_norm_ratio[c] = used ? rep.gradient_norm_ratio[c] / static_cast<double>(used) : 1.0;
  }
  return rep;
}

}  // namespace mmclip
