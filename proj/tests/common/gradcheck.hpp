#pragma once

// Random single-op graphs checked against central finite differences.
// Shared by the engine unit tests and the acceptance suite.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmclip/finite_difference.hpp"
#include "mmclip/graph.hpp"
#include "mmclip/random.hpp"

namespace mmclip::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Value at least `gap` away from zero.
inline double off_zero(Rng& rng, double gap) {
  const double mag = rng.uniform(gap, 1.0);
  return rng.uniform() < 0.5 ? -mag : mag;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + rng.index(hi - lo + 1);
}

struct OpCase {
  std::vector<Tensor> leaves;  // all differentiable
  // Builds the op on the given leaf nodes and returns the scalar output.
  std::function<NodeRef(Graph&, const std::vector<NodeRef>&)> build;
};

// Non-scalar op outputs are reduced with mse against a fixed random target,
// so every output coordinate gets a distinct upstream gradient.
inline NodeRef reduce(Graph& g, NodeRef out, const Tensor& target) {
  return g.mse(out, g.leaf(target));
}

inline OpCase make_case(OpKind kind, Rng& rng) {
  OpCase c;
  switch (kind) {
    case OpKind::matmul: {
      const auto m = pick(rng, 1, 4), k = pick(rng, 1, 5), n = pick(rng, 1, 4);
      c.leaves = {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})};
      Tensor t = random_tensor(rng, {m, n});
      c.build = [t](Graph& g, const std::vector<NodeRef>& l) {
        return reduce(g, g.matmul(l[0], l[1]), t);
      };
      break;
    }
    case OpKind::conv2d: {
      const auto n = pick(rng, 1, 2), ch = pick(rng, 1, 2), o = pick(rng, 1, 3);
      const auto k = pick(rng, 1, 3), pad = pick(rng, 0, 1);
      const auto h = pick(rng, k, 5), w = pick(rng, k, 5);
      c.leaves = {random_tensor(rng, {n, ch, h, w}), random_tensor(rng, {o, ch, k, k})};
      Tensor t = random_tensor(rng, {n, o, h + 2 * pad - k + 1, w + 2 * pad - k + 1});
      c.build = [t, pad](Graph& g, const std::vector<NodeRef>& l) {
        return reduce(g, g.conv2d(l[0], l[1], pad), t);
      };
      break;
    }
    case OpKind::add: {
      const auto n = pick(rng, 1, 3), ch = pick(rng, 1, 4);
      const bool spatial = rng.uniform() < 0.5, broadcast = rng.uniform() < 0.5;
      Shape s = spatial ? Shape{n, ch, 2, 3} : Shape{n, ch};
      c.leaves = {random_tensor(rng, s), random_tensor(rng, broadcast ? Shape{ch} : s)};
      Tensor t = random_tensor(rng, s);
      c.build = [t](Graph& g, const std::vector<NodeRef>& l) {
        return reduce(g, g.add(l[0], l[1]), t);
      };
      break;
    }
    case OpKind::relu: {
      Tensor x({pick(rng, 1, 3), pick(rng, 1, 6)});
      for (double& v : x.data()) v = off_zero(rng, 0.05);
      Tensor t = random_tensor(rng, x.shape());
      c.leaves = {x};
      c.build = [t](Graph& g, const std::vector<NodeRef>& l) {
        return reduce(g, g.relu(l[0]), t);
      };
      break;
    }
    case OpKind::clip_upper: {
      // h stays at least 0.05 away from its bound so both sides are smooth
      const auto n = pick(rng, 1, 3), ch = pick(rng, 1, 4);
      const bool spatial = rng.uniform() < 0.5, per_channel = rng.uniform() < 0.5;
      const Shape s = spatial ? Shape{n, ch, 2, 2} : Shape{n, ch};
      Tensor z = random_tensor(rng, per_channel ? Shape{ch} : s, 0.1, 2.0);
      Tensor h(s);
      const std::size_t inner = h.size() / (n * ch);
      for (std::size_t i = 0; i < h.size(); ++i) {
        const std::size_t zc = per_channel ? (i / inner) % ch : i;
        h[i] = z[zc] + off_zero(rng, 0.05);
      }
      Tensor t = random_tensor(rng, s);
      c.leaves = {h, z};
      c.build = [t](Graph& g, const std::vector<NodeRef>& l) {
        return reduce(g, g.clip_upper(l[0], l[1]), t);
      };
      break;
    }
    case OpKind::mean_pool: {
      const auto k = pick(rng, 1, 2);
      const Shape s{pick(rng, 1, 2), pick(rng, 1, 3), k * pick(rng, 1, 3), k * pick(rng, 1, 3)};
      c.leaves = {random_tensor(rng, s)};
      Tensor t = random_tensor(rng, {s[0], s[1], s[2] / k, s[3] / k});
      c.build = [t, k](Graph& g, const std::vector<NodeRef>& l) {
        return reduce(g, g.mean_pool(l[0], k), t);
      };
      break;
    }
    case OpKind::flatten: {
      const Shape s{pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)};
      c.leaves = {random_tensor(rng, s)};
      Tensor t = random_tensor(rng, {s[0], s[1] * s[2] * s[3]});
      c.build = [t](Graph& g, const std::vector<NodeRef>& l) {
        return reduce(g, g.flatten(l[0]), t);
      };
      break;
    }
    case OpKind::affine_norm: {
      const auto n = pick(rng, 1, 3), ch = pick(rng, 1, 4);
      const Shape s = rng.uniform() < 0.5 ? Shape{n, ch, 2, 2} : Shape{n, ch};
      c.leaves = {random_tensor(rng, s), random_tensor(rng, {ch}), random_tensor(rng, {ch})};
      Tensor t = random_tensor(rng, s);
      c.build = [t](Graph& g, const std::vector<NodeRef>& l) {
        return reduce(g, g.affine_norm(l[0], l[1], l[2]), t);
      };
      break;
    }
    case OpKind::softmax_ce: {
      const auto n = pick(rng, 1, 4), k = pick(rng, 2, 5);
      std::vector<int> labels(n);
      for (auto& y : labels) y = static_cast<int>(rng.index(k));
      c.leaves = {random_tensor(rng, {n, k}, -3.0, 3.0)};
      c.build = [labels](Graph& g, const std::vector<NodeRef>& l) {
        return g.softmax_ce(l[0], labels);
      };
      break;
    }
    case OpKind::mse: {
      const Shape s{pick(rng, 1, 3), pick(rng, 1, 5)};
      c.leaves = {random_tensor(rng, s), random_tensor(rng, s)};
      c.build = [](Graph& g, const std::vector<NodeRef>& l) { return g.mse(l[0], l[1]); };
      break;
    }
    case OpKind::scalar_combine: {
      const auto terms = pick(rng, 1, 3);
      std::vector<double> weights;
      for (std::size_t i = 0; i < terms; ++i) {
        c.leaves.push_back(random_tensor(rng, {pick(rng, 1, 3), pick(rng, 1, 3)}));
        weights.push_back(rng.uniform(-2.0, 2.0));
      }
      c.build = [weights](Graph& g, const std::vector<NodeRef>& l) {
        return g.scalar_combine(l, weights);
      };
      break;
    }
    case OpKind::class_margin: {
      // distinct, well separated logits so the runner-up is stable under eps
      const auto n = pick(rng, 1, 4), k = pick(rng, 2, 5);
      Tensor x({n, k});
      std::vector<int> classes(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> levels(k);
        for (std::size_t j = 0; j < k; ++j) levels[j] = 0.3 * static_cast<double>(j);
        for (std::size_t j = k; j > 1; --j) std::swap(levels[j - 1], levels[rng.index(j)]);
        for (std::size_t j = 0; j < k; ++j) x[i * k + j] = levels[j] + rng.uniform(0.0, 0.1);
        classes[i] = static_cast<int>(rng.index(k));
      }
      Tensor t = random_tensor(rng, {n});
      c.leaves = {x};
      c.build = [t, classes](Graph& g, const std::vector<NodeRef>& l) {
        return reduce(g, g.class_margin(l[0], classes), t);
      };
      break;
    }
    case OpKind::leaf:
      break;
  }
  return c;
}

inline const std::vector<OpKind>& checked_ops() {
  static const std::vector<OpKind> ops{
      OpKind::matmul,     OpKind::conv2d,  OpKind::add,         OpKind::relu,
      OpKind::clip_upper, OpKind::mean_pool, OpKind::flatten,   OpKind::affine_norm,
      OpKind::softmax_ce, OpKind::mse,     OpKind::scalar_combine, OpKind::class_margin};
  return ops;
}

// Largest relative error between backward() and finite differences over
// every leaf of one random instance of `kind`.
inline double gradcheck(OpKind kind, std::uint64_t seed, double eps = 1e-5) {
  Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(kind));
  const OpCase c = make_case(kind, rng);
  auto eval = [&c](const std::vector<Tensor>& leaves) {
    Graph g;
    std::vector<NodeRef> refs;
    for (const auto& t : leaves) refs.push_back(g.leaf(t, true));
    const NodeRef out = c.build(g, refs);
    return std::make_pair(std::move(g), out);
  };
  auto [graph, out] = eval(c.leaves);
  const Gradients grads = graph.backward(out);
  double worst = 0.0;
  for (std::size_t i = 0; i < c.leaves.size(); ++i) {
    auto fn = [&](const Tensor& x) {
      auto leaves = c.leaves;
      leaves[i] = x;
      auto [g, o] = eval(leaves);
      return g.value(o).item();
    };
    const Tensor numeric = finite_difference(fn, c.leaves[i], eps);
    worst = std::max(worst, relative_error(grads[NodeRef{i}], numeric));
  }
  return worst;
}

}  // namespace mmclip::testing
