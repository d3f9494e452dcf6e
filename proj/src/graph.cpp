#include "mmclip/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mmclip/error.hpp"
#include "mmclip/kernels.hpp"

namespace mmclip {

namespace kp = kernels::parallel;

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::add: return "add";
    case OpKind::relu: return "relu";
    case OpKind::clip_upper: return "clip_upper";
    case OpKind::mean_pool: return "mean_pool";
    case OpKind::flatten: return "flatten";
    case OpKind::affine_norm: return "affine_norm";
    case OpKind::softmax_ce: return "softmax_ce";
    case OpKind::mse: return "mse";
    case OpKind::scalar_combine: return "scalar_combine";
    case OpKind::class_margin: return "class_margin";
  }
  return "unknown";
}

namespace {

[[noreturn]] void shape_fail(OpKind kind, const std::string& what,
                             std::initializer_list<const Tensor*> operands) {
  std::string msg = std::string(op_name(kind)) + ": " + what + " (shapes";
  for (const Tensor* t : operands) msg += " " + shape_string(t->shape());
  throw ShapeError(msg + ")");
}

void expect_arity(OpKind kind, std::size_t got, std::size_t want) {
  if (got != want)
    throw ShapeError(std::string(op_name(kind)) + ": expects " +
                     std::to_string(want) + " inputs, got " + std::to_string(got));
}

// Size of axis 1 and of everything after it, for channel broadcasting.
struct ChannelLayout {
  std::size_t outer = 1, channels = 1, inner = 1;
};

ChannelLayout channel_layout(const Tensor& t) {
  ChannelLayout l;
  if (t.rank() < 2) {
    l.channels = t.size();
    return l;
  }
  l.outer = t.dim(0);
  l.channels = t.dim(1);
  l.inner = t.size() / (l.outer * l.channels);
  return l;
}

// True when `b` is one value per axis-1 channel of `a` (and not same-shaped).
bool channel_broadcast(const Tensor& a, const Tensor& b) {
  return a.shape() != b.shape() && b.rank() == 1 && a.rank() >= 2 &&
         b.size() == a.dim(1);
}

void check_labels(OpKind kind, const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) shape_fail(kind, "logits must be [N,C]", {&logits});
  if (labels.size() != logits.dim(0))
    throw ShapeError(std::string(op_name(kind)) + ": " +
                     std::to_string(labels.size()) + " labels for " +
                     shape_string(logits.shape()) + " logits");
  const int classes = static_cast<int>(logits.dim(1));
  for (int y : labels)
    if (y < 0 || y >= classes)
      throw InvalidArgument(std::string(op_name(kind)) + ": label " +
                            std::to_string(y) + " outside [0," +
                            std::to_string(classes) + ")");
}

// Index of the largest logit in row other than `exclude` (lowest on ties).
std::size_t runner_up(std::span<const double> row, std::size_t exclude) {
  std::size_t best = exclude == 0 ? 1 : 0;
  for (std::size_t k = 0; k < row.size(); ++k)
    if (k != exclude && row[k] > row[best]) best = k;
  return best;
}

kernels::ConvGeometry conv_geometry(const Tensor& x, const Tensor& w,
                                    std::size_t padding) {
  kernels::ConvGeometry g;
  g.batch = x.dim(0);
  g.in_channels = x.dim(1);
  g.height = x.dim(2);
  g.width = x.dim(3);
  g.out_channels = w.dim(0);
  g.kernel = w.dim(2);
  g.padding = padding;
  return g;
}

}  // namespace

const Tensor& Gradients::operator[](NodeRef leaf) const {
  auto it = grads_.find(leaf.index);
  if (it == grads_.end())
    throw InvalidArgument("no gradient recorded for node " +
                          std::to_string(leaf.index));
  return it->second;
}

const Graph::Node& Graph::node(NodeRef ref) const {
  if (ref.index >= nodes_.size())
    throw InvalidArgument("node " + std::to_string(ref.index) +
                          " does not belong to this graph");
  return nodes_[ref.index];
}

const Tensor& Graph::value(NodeRef ref) const { return node(ref).value; }

NodeRef Graph::leaf(Tensor value, bool differentiable) {
  if (!value.all_finite()) throw NonFiniteError("leaf: non-finite input value");
  Node n;
  n.value = std::move(value);
  n.differentiable = differentiable;
  n.needs_grad = differentiable;
  nodes_.push_back(std::move(n));
  return NodeRef{nodes_.size() - 1};
}

NodeRef Graph::apply(OpKind kind, std::span<const NodeRef> inputs, OpParams params) {
  if (kind == OpKind::leaf) throw InvalidArgument("apply: use leaf() for inputs");
  bool needs = false;
  for (NodeRef in : inputs) needs = needs || node(in).needs_grad;
  Tensor out = evaluate(kind, inputs, params);
  if (!out.all_finite())
    throw NonFiniteError(std::string(op_name(kind)) + ": produced a non-finite value");
  Node n;
  n.kind = kind;
  n.inputs.assign(inputs.begin(), inputs.end());
  n.params = std::move(params);
  n.value = std::move(out);
  n.needs_grad = needs;
  nodes_.push_back(std::move(n));
  return NodeRef{nodes_.size() - 1};
}

NodeRef Graph::matmul(NodeRef a, NodeRef b) {
  const NodeRef in[] = {a, b};
  return apply(OpKind::matmul, in);
}
NodeRef Graph::conv2d(NodeRef x, NodeRef w, std::size_t padding) {
  const NodeRef in[] = {x, w};
  OpParams p;
  p.padding = padding;
  return apply(OpKind::conv2d, in, std::move(p));
}
NodeRef Graph::add(NodeRef a, NodeRef b) {
  const NodeRef in[] = {a, b};
  return apply(OpKind::add, in);
}
NodeRef Graph::relu(NodeRef x) {
  const NodeRef in[] = {x};
  return apply(OpKind::relu, in);
}
NodeRef Graph::clip_upper(NodeRef h, NodeRef z) {
  const NodeRef in[] = {h, z};
  return apply(OpKind::clip_upper, in);
}
NodeRef Graph::mean_pool(NodeRef x, std::size_t window) {
  const NodeRef in[] = {x};
  OpParams p;
  p.window = window;
  return apply(OpKind::mean_pool, in, std::move(p));
}
NodeRef Graph::flatten(NodeRef x) {
  const NodeRef in[] = {x};
  return apply(OpKind::flatten, in);
}
NodeRef Graph::affine_norm(NodeRef x, NodeRef scale, NodeRef shift) {
  const NodeRef in[] = {x, scale, shift};
  return apply(OpKind::affine_norm, in);
}
NodeRef Graph::softmax_ce(NodeRef logits, std::vector<int> labels) {
  const NodeRef in[] = {logits};
  OpParams p;
  p.labels = std::move(labels);
  return apply(OpKind::softmax_ce, in, std::move(p));
}
NodeRef Graph::mse(NodeRef a, NodeRef b) {
  const NodeRef in[] = {a, b};
  return apply(OpKind::mse, in);
}
NodeRef Graph::scalar_combine(std::span<const NodeRef> terms,
                              std::vector<double> weights) {
  OpParams p;
  p.weights = std::move(weights);
  return apply(OpKind::scalar_combine, terms, std::move(p));
}
NodeRef Graph::class_margin(NodeRef logits, std::vector<int> classes) {
  const NodeRef in[] = {logits};
  OpParams p;
  p.labels = std::move(classes);
  return apply(OpKind::class_margin, in, std::move(p));
}

Tensor Graph::evaluate(OpKind kind, std::span<const NodeRef> inputs,
                       const OpParams& params) const {
  switch (kind) {
    case OpKind::leaf:
      break;

    case OpKind::matmul: {
      expect_arity(kind, inputs.size(), 2);
      const Tensor& a = value(inputs[0]);
      const Tensor& b = value(inputs[1]);
      if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        shape_fail(kind, "inner dimensions differ", {&a, &b});
      Tensor out({a.dim(0), b.dim(1)});
      kp::matmul_nn(a.dim(0), a.dim(1), b.dim(1), a.data(), b.data(), out.data());
      return out;
    }

    case OpKind::conv2d: {
      expect_arity(kind, inputs.size(), 2);
      const Tensor& x = value(inputs[0]);
      const Tensor& w = value(inputs[1]);
      if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != x.dim(1) ||
          w.dim(2) != w.dim(3))
        shape_fail(kind, "expects [N,C,H,W] input and [O,C,K,K] kernel", {&x, &w});
      if (x.dim(2) + 2 * params.padding < w.dim(2) ||
          x.dim(3) + 2 * params.padding < w.dim(3))
        shape_fail(kind, "kernel larger than padded input", {&x, &w});
      const auto g = conv_geometry(x, w, params.padding);
      Tensor out({g.batch, g.out_channels, g.out_height(), g.out_width()});
      kp::conv2d_forward(g, x.data(), w.data(), out.data());
      return out;
    }

    case OpKind::add: {
      expect_arity(kind, inputs.size(), 2);
      const Tensor& a = value(inputs[0]);
      const Tensor& b = value(inputs[1]);
      Tensor out = a;
      if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
      } else if (channel_broadcast(a, b)) {
        const auto l = channel_layout(a);
        for (std::size_t o = 0; o < l.outer; ++o)
          for (std::size_t c = 0; c < l.channels; ++c)
            for (std::size_t i = 0; i < l.inner; ++i)
              out[(o * l.channels + c) * l.inner + i] += b[c];
      } else {
        shape_fail(kind, "operands not broadcastable", {&a, &b});
      }
      return out;
    }

    case OpKind::relu: {
      expect_arity(kind, inputs.size(), 1);
      Tensor out = value(inputs[0]);
      for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
      return out;
    }

    case OpKind::clip_upper: {
      expect_arity(kind, inputs.size(), 2);
      const Tensor& h = value(inputs[0]);
      const Tensor& z = value(inputs[1]);
      Tensor out = h;
      if (h.shape() == z.shape()) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(h[i], z[i]);
      } else if (channel_broadcast(h, z)) {
        const auto l = channel_layout(h);
        for (std::size_t o = 0; o < l.outer; ++o)
          for (std::size_t c = 0; c < l.channels; ++c)
            for (std::size_t i = 0; i < l.inner; ++i) {
              double& v = out[(o * l.channels + c) * l.inner + i];
              v = std::min(v, z[c]);
            }
      } else {
        shape_fail(kind, "bound not broadcastable over activation", {&h, &z});
      }
      return out;
    }

    case OpKind::mean_pool: {
      expect_arity(kind, inputs.size(), 1);
      const Tensor& x = value(inputs[0]);
      const std::size_t k = params.window;
      if (x.rank() != 4 || k == 0 || x.dim(2) % k != 0 || x.dim(3) % k != 0)
        shape_fail(kind, "spatial size not divisible by window " + std::to_string(k),
                   {&x});
      const std::size_t maps = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
      const std::size_t oh = h / k, ow = w / k;
      Tensor out({x.dim(0), x.dim(1), oh, ow});
      const double scale = 1.0 / static_cast<double>(k * k);
      for (std::size_t m = 0; m < maps; ++m)
        for (std::size_t r = 0; r < h; ++r)
          for (std::size_t s = 0; s < w; ++s)
            out[(m * oh + r / k) * ow + s / k] += scale * x[(m * h + r) * w + s];
      return out;
    }

    case OpKind::flatten: {
      expect_arity(kind, inputs.size(), 1);
      const Tensor& x = value(inputs[0]);
      if (x.rank() < 1) shape_fail(kind, "empty tensor", {&x});
      return x.reshaped({x.dim(0), x.size() / x.dim(0)});
    }

    case OpKind::affine_norm: {
      expect_arity(kind, inputs.size(), 3);
      const Tensor& x = value(inputs[0]);
      const Tensor& scale = value(inputs[1]);
      const Tensor& shift = value(inputs[2]);
      if (x.rank() < 2 || scale.rank() != 1 || shift.shape() != scale.shape() ||
          scale.size() != x.dim(1))
        shape_fail(kind, "expects one scale and shift per channel", {&x, &scale, &shift});
      const auto l = channel_layout(x);
      Tensor out = x;
      for (std::size_t o = 0; o < l.outer; ++o)
        for (std::size_t c = 0; c < l.channels; ++c)
          for (std::size_t i = 0; i < l.inner; ++i) {
            double& v = out[(o * l.channels + c) * l.inner + i];
            v = v * scale[c] + shift[c];
          }
      return out;
    }

    case OpKind::softmax_ce: {
      expect_arity(kind, inputs.size(), 1);
      const Tensor& logits = value(inputs[0]);
      check_labels(kind, logits, params.labels);
      const std::size_t n = logits.dim(0), c = logits.dim(1);
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        auto row = logits.data().subspan(i * c, c);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        total += mx + std::log(z) - row[static_cast<std::size_t>(params.labels[i])];
      }
      return Tensor::scalar(total / static_cast<double>(n));
    }

    case OpKind::mse: {
      expect_arity(kind, inputs.size(), 2);
      const Tensor& a = value(inputs[0]);
      const Tensor& b = value(inputs[1]);
      if (a.shape() != b.shape()) shape_fail(kind, "operands differ", {&a, &b});
      double total = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        total += d * d;
      }
      return Tensor::scalar(total / static_cast<double>(a.size()));
    }

    case OpKind::scalar_combine: {
      if (inputs.size() != params.weights.size() || inputs.empty())
        throw ShapeError("scalar_combine: " + std::to_string(inputs.size()) +
                         " terms but " + std::to_string(params.weights.size()) +
                         " weights");
      double total = 0.0;
      for (std::size_t t = 0; t < inputs.size(); ++t) {
        double s = 0.0;
        for (double v : value(inputs[t]).data()) s += v;
        total += params.weights[t] * s;
      }
      return Tensor::scalar(total);
    }

    case OpKind::class_margin: {
      expect_arity(kind, inputs.size(), 1);
      const Tensor& logits = value(inputs[0]);
      check_labels(kind, logits, params.labels);
      const std::size_t n = logits.dim(0), c = logits.dim(1);
      if (c < 2) shape_fail(kind, "needs at least two classes", {&logits});
      Tensor out({n});
      for (std::size_t i = 0; i < n; ++i) {
        auto row = logits.data().subspan(i * c, c);
        const auto y = static_cast<std::size_t>(params.labels[i]);
        out[i] = row[y] - row[runner_up(row, y)];
      }
      return out;
    }
  }
  throw InvalidArgument("unknown op kind");
}

Gradients Graph::backward(NodeRef output) const {
  const Node& out = node(output);
  if (out.value.size() != 1)
    throw ShapeError("backward: output must be scalar, got shape " +
                     shape_string(out.value.shape()));
  std::vector<Tensor> grads(output.index + 1);
  grads[output.index] = Tensor(out.value.shape(), 1.0);
  for (std::size_t i = output.index + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (!n.needs_grad || grads[i].empty() || n.kind == OpKind::leaf) continue;
    propagate(n, grads[i], grads);
  }
  Gradients result;
  for (std::size_t i = 0; i <= output.index; ++i) {
    const Node& n = nodes_[i];
    if (n.kind != OpKind::leaf || !n.differentiable) continue;
    result.grads_.emplace(i, grads[i].empty() ? Tensor(n.value.shape())
                                              : std::move(grads[i]));
  }
  return result;
}

void Graph::propagate(const Node& n, const Tensor& grad,
                      std::vector<Tensor>& grads) const {
  // Accumulation target for input slot `k`, or nullptr when it needs no grad.
  auto target = [&](std::size_t k) -> Tensor* {
    const NodeRef in = n.inputs[k];
    if (!nodes_[in.index].needs_grad) return nullptr;
    Tensor& g = grads[in.index];
    if (g.empty()) g = Tensor(nodes_[in.index].value.shape());
    return &g;
  };

  switch (n.kind) {
    case OpKind::leaf:
      return;

    case OpKind::matmul: {
      const Tensor& a = value(n.inputs[0]);
      const Tensor& b = value(n.inputs[1]);
      const std::size_t m = a.dim(0), k = a.dim(1), cols = b.dim(1);
      if (Tensor* ga = target(0)) kp::matmul_nt(m, cols, k, grad.data(), b.data(), ga->data());
      if (Tensor* gb = target(1)) kp::matmul_tn(m, k, cols, a.data(), grad.data(), gb->data());
      return;
    }

    case OpKind::conv2d: {
      const Tensor& x = value(n.inputs[0]);
      const Tensor& w = value(n.inputs[1]);
      const auto g = conv_geometry(x, w, n.params.padding);
      if (Tensor* gx = target(0)) kp::conv2d_backward_input(g, grad.data(), w.data(), gx->data());
      if (Tensor* gw = target(1)) kp::conv2d_backward_weight(g, x.data(), grad.data(), gw->data());
      return;
    }

    case OpKind::add: {
      const Tensor& a = value(n.inputs[0]);
      const Tensor& b = value(n.inputs[1]);
      if (Tensor* ga = target(0))
        for (std::size_t i = 0; i < grad.size(); ++i) (*ga)[i] += grad[i];
      if (Tensor* gb = target(1)) {
        if (a.shape() == b.shape()) {
          for (std::size_t i = 0; i < grad.size(); ++i) (*gb)[i] += grad[i];
        } else {
          const auto l = channel_layout(a);
          for (std::size_t o = 0; o < l.outer; ++o)
            for (std::size_t c = 0; c < l.channels; ++c)
              for (std::size_t i = 0; i < l.inner; ++i)
                (*gb)[c] += grad[(o * l.channels + c) * l.inner + i];
        }
      }
      return;
    }

    case OpKind::relu: {
      const Tensor& x = value(n.inputs[0]);
      if (Tensor* gx = target(0))
        for (std::size_t i = 0; i < grad.size(); ++i)
          if (x[i] > 0.0) (*gx)[i] += grad[i];
      return;
    }

    case OpKind::clip_upper: {
      // Ties h == z count as unclipped: the gradient flows to h.
      const Tensor& h = value(n.inputs[0]);
      const Tensor& z = value(n.inputs[1]);
      Tensor* gh = target(0);
      Tensor* gz = target(1);
      if (h.shape() == z.shape()) {
        for (std::size_t i = 0; i < grad.size(); ++i) {
          if (h[i] > z[i]) {
            if (gz) (*gz)[i] += grad[i];
          } else if (gh) {
            (*gh)[i] += grad[i];
          }
        }
      } else {
        const auto l = channel_layout(h);
        for (std::size_t o = 0; o < l.outer; ++o)
          for (std::size_t c = 0; c < l.channels; ++c)
            for (std::size_t i = 0; i < l.inner; ++i) {
              const std::size_t idx = (o * l.channels + c) * l.inner + i;
              if (h[idx] > z[c]) {
                if (gz) (*gz)[c] += grad[idx];
              } else if (gh) {
                (*gh)[idx] += grad[idx];
              }
            }
      }
      return;
    }

    case OpKind::mean_pool: {
      Tensor* gx = target(0);
      if (!gx) return;
      const Tensor& x = value(n.inputs[0]);
      const std::size_t k = n.params.window;
      const std::size_t maps = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
      const std::size_t oh = h / k, ow = w / k;
      const double scale = 1.0 / static_cast<double>(k * k);
      for (std::size_t m = 0; m < maps; ++m)
        for (std::size_t r = 0; r < h; ++r)
          for (std::size_t s = 0; s < w; ++s)
            (*gx)[(m * h + r) * w + s] += scale * grad[(m * oh + r / k) * ow + s / k];
      return;
    }

    case OpKind::flatten: {
      if (Tensor* gx = target(0))
        for (std::size_t i = 0; i < grad.size(); ++i) (*gx)[i] += grad[i];
      return;
    }

    case OpKind::affine_norm: {
      const Tensor& x = value(n.inputs[0]);
      const Tensor& scale = value(n.inputs[1]);
      const auto l = channel_layout(x);
      Tensor* gx = target(0);
      Tensor* gs = target(1);
      Tensor* gb = target(2);
      for (std::size_t o = 0; o < l.outer; ++o)
        for (std::size_t c = 0; c < l.channels; ++c)
          for (std::size_t i = 0; i < l.inner; ++i) {
            const std::size_t idx = (o * l.channels + c) * l.inner + i;
            if (gx) (*gx)[idx] += grad[idx] * scale[c];
            if (gs) (*gs)[c] += grad[idx] * x[idx];
            if (gb) (*gb)[c] += grad[idx];
          }
      return;
    }

    case OpKind::softmax_ce: {
      Tensor* gl = target(0);
      if (!gl) return;
      const Tensor& logits = value(n.inputs[0]);
      const std::size_t rows = logits.dim(0), c = logits.dim(1);
      const double scale = grad[0] / static_cast<double>(rows);
      for (std::size_t i = 0; i < rows; ++i) {
        auto row = logits.data().subspan(i * c, c);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        for (std::size_t k = 0; k < c; ++k) {
          double p = std::exp(row[k] - mx) / z;
          if (static_cast<int>(k) == n.params.labels[i]) p -= 1.0;
          (*gl)[i * c + k] += scale * p;
        }
      }
      return;
    }

    case OpKind::mse: {
      const Tensor& a = value(n.inputs[0]);
      const Tensor& b = value(n.inputs[1]);
      const double scale = 2.0 * grad[0] / static_cast<double>(a.size());
      Tensor* ga = target(0);
      Tensor* gb = target(1);
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = scale * (a[i] - b[i]);
        if (ga) (*ga)[i] += d;
        if (gb) (*gb)[i] -= d;
      }
      return;
    }

    case OpKind::scalar_combine: {
      for (std::size_t t = 0; t < n.inputs.size(); ++t)
        if (Tensor* gt = target(t)) {
          const double w = n.params.weights[t] * grad[0];
          for (double& v : gt->data()) v += w;
        }
      return;
    }

    case OpKind::class_margin: {
      // The competing class is re-resolved from the stored logits, so the
      // gradient is that of the currently active branch of the max.
      Tensor* gl = target(0);
      if (!gl) return;
      const Tensor& logits = value(n.inputs[0]);
      const std::size_t rows = logits.dim(0), c = logits.dim(1);
      for (std::size_t i = 0; i < rows; ++i) {
        auto row = logits.data().subspan(i * c, c);
        const auto y = static_cast<std::size_t>(n.params.labels[i]);
        (*gl)[i * c + y] += grad[i];
        (*gl)[i * c + runner_up(row, y)] -= grad[i];
      }
      return;
    }
  }
}

}  // namespace mmclip
