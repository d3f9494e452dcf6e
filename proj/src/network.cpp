#include "mmclip/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mmclip/error.hpp"
#include "mmclip/random.hpp"

namespace mmclip {

LayerSpec LayerSpec::dense(std::size_t units, Activation act, bool clippable) {
  return {LayerKind::dense, units, 0, 0, act, clippable};
}
LayerSpec LayerSpec::conv(std::size_t channels, std::size_t kernel, std::size_t padding,
                          Activation act, bool clippable) {
  return {LayerKind::conv, channels, kernel, padding, act, clippable};
}
LayerSpec LayerSpec::pool(std::size_t window, bool clippable) {
  return {LayerKind::pool, 0, window, 0, Activation::none, clippable};
}
LayerSpec LayerSpec::norm(Activation act, bool clippable) {
  return {LayerKind::norm, 0, 0, 0, act, clippable};
}
LayerSpec LayerSpec::flatten() { return {LayerKind::flatten, 0, 0, 0, Activation::none, false}; }

namespace {

std::string layer_error(std::size_t index, const std::string& what) {
  return "layer " + std::to_string(index) + ": " + what;
}

}  // namespace

Network::Network(Shape input_shape, std::vector<LayerSpec> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  if (input_shape_.empty() || shape_size(input_shape_) == 0)
    throw ShapeError("network input shape " + shape_string(input_shape_) + " is empty");
  if (layers_.empty()) throw ShapeError("network has no layers");

  Shape shape = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& l = layers_[i];
    std::vector<Tensor> p;
    switch (l.kind) {
      case LayerKind::dense:
        if (shape.size() != 1)
          throw ShapeError(layer_error(i, "dense layer needs a flat input, got " +
                                              shape_string(shape)));
        if (l.units == 0) throw ShapeError(layer_error(i, "dense layer with zero units"));
        p.emplace_back(Shape{shape[0], l.units});
        p.emplace_back(Shape{l.units});
        shape = {l.units};
        break;
      case LayerKind::conv:
        if (shape.size() != 3)
          throw ShapeError(layer_error(i, "conv layer needs a CxHxW input, got " +
                                              shape_string(shape)));
        if (l.units == 0 || l.kernel == 0 || shape[1] + 2 * l.padding < l.kernel ||
            shape[2] + 2 * l.padding < l.kernel)
          throw ShapeError(layer_error(i, "conv geometry does not fit input " +
                                              shape_string(shape)));
        p.emplace_back(Shape{l.units, shape[0], l.kernel, l.kernel});
        p.emplace_back(Shape{l.units});
        shape = {l.units, shape[1] + 2 * l.padding - l.kernel + 1,
                 shape[2] + 2 * l.padding - l.kernel + 1};
        break;
      case LayerKind::pool:
        if (shape.size() != 3 || l.kernel == 0 || shape[1] % l.kernel != 0 ||
            shape[2] % l.kernel != 0)
          throw ShapeError(layer_error(i, "pool window " + std::to_string(l.kernel) +
                                              " does not tile " + shape_string(shape)));
        if (l.activation != Activation::none)
          throw ShapeError(layer_error(i, "pool layers carry no activation"));
        shape = {shape[0], shape[1] / l.kernel, shape[2] / l.kernel};
        break;
      case LayerKind::norm:
        p.emplace_back(Shape{shape[0]}, 1.0);
        p.emplace_back(Shape{shape[0]});
        break;
      case LayerKind::flatten:
        if (l.clippable || l.activation != Activation::none)
          throw ShapeError(layer_error(i, "flatten is neither clippable nor activated"));
        shape = {shape_size(shape)};
        break;
    }
    output_shapes_.push_back(shape);
    params_.push_back(std::move(p));
  }

  const LayerSpec& last = layers_.back();
  if (last.kind != LayerKind::dense || last.activation != Activation::none || last.clippable)
    throw ShapeError("final layer must be an unclipped dense logit layer without activation");
  if (num_classes() < 2) throw ShapeError("a classifier needs at least two classes");
}

const Shape& Network::layer_input_shape(std::size_t layer) const {
  return layer == 0 ? input_shape_ : output_shapes_.at(layer - 1);
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : params_)
    for (const Tensor& t : layer) n += t.size();
  return n;
}

std::vector<std::size_t> Network::clippable_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].clippable) out.push_back(i);
  return out;
}

std::size_t Network::bound_length(std::size_t layer) const {
  return output_shapes_.at(layer)[0];
}

void Network::init_weights(std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& p = params_[i];
    switch (layers_[i].kind) {
      case LayerKind::dense:
      case LayerKind::conv: {
        const std::size_t fan_in = p[0].size() / layers_[i].units;
        const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (double& w : p[0].data()) w = scale * rng.normal();
        std::fill(p[1].data().begin(), p[1].data().end(), 0.0);
        break;
      }
      case LayerKind::norm:
        std::fill(p[0].data().begin(), p[0].data().end(), 1.0);
        std::fill(p[1].data().begin(), p[1].data().end(), 0.0);
        break;
      default:
        break;
    }
  }
}

Network mlp3(std::size_t input_dim, std::size_t num_classes) {
  return Network({input_dim}, {LayerSpec::dense(128, Activation::relu, true),
                               LayerSpec::dense(64, Activation::relu, true),
                               LayerSpec::dense(num_classes, Activation::none, false)});
}

Network cnn_s(std::size_t height, std::size_t width, std::size_t num_classes) {
  return Network({1, height, width},
                 {LayerSpec::conv(8, 3, 1, Activation::relu, false), LayerSpec::pool(2, true),
                  LayerSpec::conv(16, 3, 1, Activation::relu, false), LayerSpec::pool(2, true),
                  LayerSpec::flatten(),
                  LayerSpec::dense(num_classes, Activation::none, false)});
}

BoundVectors::BoundVectors(std::vector<Tensor> per_layer) : layers_(std::move(per_layer)) {
  for (Tensor& t : layers_) {
    if (t.rank() != 1) throw ShapeError("bound vectors must be rank 1");
    for (double& v : t.data()) {
      if (std::isnan(v)) throw NonFiniteError("bound vector holds NaN");
      v = std::max(v, kFloor);
    }
  }
}

BoundVectors BoundVectors::unbounded(const Network& net) {
  std::vector<Tensor> layers;
  for (std::size_t l : net.clippable_layers())
    layers.emplace_back(Shape{net.bound_length(l)}, std::numeric_limits<double>::max());
  return BoundVectors(std::move(layers));
}

std::size_t BoundVectors::total_size() const {
  std::size_t n = 0;
  for (const Tensor& t : layers_) n += t.size();
  return n;
}

void BoundVectors::check_compatible(const Network& net) const {
  const auto clippable = net.clippable_layers();
  if (clippable.size() != layers_.size())
    throw ShapeError("bounds cover " + std::to_string(layers_.size()) +
                     " layers but the network has " + std::to_string(clippable.size()) +
                     " clippable layers");
  for (std::size_t i = 0; i < clippable.size(); ++i)
    if (layers_[i].size() != net.bound_length(clippable[i]))
      throw ShapeError("bound vector " + std::to_string(i) + " has " +
                       std::to_string(layers_[i].size()) + " entries, layer " +
                       std::to_string(clippable[i]) + " needs " +
                       std::to_string(net.bound_length(clippable[i])));
}

ForwardTrace build_forward(Graph& graph, const Network& net, const Tensor& batch,
                           const BoundVectors* bounds, ForwardOptions options) {
  if (batch.rank() < 1 || batch.size() % net.input_size() != 0 ||
      batch.size() / batch.dim(0) != net.input_size())
    throw ShapeError("network expects samples of shape " + shape_string(net.input_shape()) +
                     ", got batch " + shape_string(batch.shape()));
  if (bounds) bounds->check_compatible(net);

  Shape in_shape{batch.dim(0)};
  in_shape.insert(in_shape.end(), net.input_shape().begin(), net.input_shape().end());

  ForwardTrace trace;
  trace.input = graph.leaf(batch.reshaped(in_shape), options.grad_input);
  NodeRef h = trace.input;
  std::size_t bound_index = 0;
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const LayerSpec& l = net.layers()[i];
    std::vector<NodeRef> w;
    for (const Tensor& p : net.params(i)) w.push_back(graph.leaf(p, options.grad_weights));
    switch (l.kind) {
      case LayerKind::dense:
        h = graph.add(graph.matmul(h, w[0]), w[1]);
        break;
      case LayerKind::conv:
        h = graph.add(graph.conv2d(h, w[0], l.padding), w[1]);
        break;
      case LayerKind::pool:
        h = graph.mean_pool(h, l.kernel);
        break;
      case LayerKind::norm:
        h = graph.affine_norm(h, w[0], w[1]);
        break;
      case LayerKind::flatten:
        h = graph.flatten(h);
        break;
    }
    if (l.activation == Activation::relu) h = graph.relu(h);
    if (l.clippable) {
      trace.activations.push_back(h);
      if (bounds) {
        const NodeRef z = graph.leaf((*bounds)[bound_index], options.grad_bounds);
        trace.bounds.push_back(z);
        h = graph.clip_upper(h, z);
      }
      ++bound_index;
    }
    trace.weights.push_back(std::move(w));
  }
  trace.logits = h;
  return trace;
}

Tensor forward(const Network& net, const Tensor& batch) {
  Graph g;
  const auto trace = build_forward(g, net, batch, nullptr);
  return g.value(trace.logits);
}

Tensor bounded_forward(const Network& net, const BoundVectors& bounds, const Tensor& batch) {
  Graph g;
  const auto trace = build_forward(g, net, batch, &bounds);
  return g.value(trace.logits);
}

Tensor logits(const Network& net, const std::optional<BoundVectors>& bounds,
              const Tensor& batch) {
  return bounds ? bounded_forward(net, *bounds, batch) : forward(net, batch);
}

std::vector<Tensor> activation_maxima(const Network& net, const BoundVectors* bounds,
                                      const Tensor& batch) {
  Graph g;
  const auto trace = build_forward(g, net, batch, bounds);
  const auto clippable = net.clippable_layers();
  std::vector<Tensor> maxima;
  for (std::size_t i = 0; i < clippable.size(); ++i) {
    const Tensor& act = g.value(trace.activations[i]);
    const std::size_t channels = net.bound_length(clippable[i]);
    const std::size_t inner = act.size() / (act.dim(0) * channels);
    Tensor mx(Shape{channels}, -std::numeric_limits<double>::infinity());
    for (std::size_t n = 0; n < act.dim(0); ++n)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t k = 0; k < inner; ++k)
          mx[c] = std::max(mx[c], act[(n * channels + c) * inner + k]);
    maxima.push_back(std::move(mx));
  }
  return maxima;
}

BoundVectors init_bounds(const Network& net, const Tensor& clean, double beta) {
  if (!(beta >= 1.0)) throw InvalidArgument("init_bounds: beta must be >= 1");
  if (clean.empty() || clean.rank() < 1 || clean.dim(0) == 0)
    throw InvalidArgument("init_bounds: clean set is empty");
  if (std::isinf(beta)) return BoundVectors::unbounded(net);
  auto maxima = activation_maxima(net, nullptr, clean);
  for (Tensor& m : maxima)
    for (double& v : m.data()) v = std::max(beta * v, BoundVectors::kFloor);
  return BoundVectors(std::move(maxima));
}

std::vector<Tensor> split_batch(const Tensor& batch, std::size_t chunk) {
  const std::size_t rows = batch.dim(0), width = batch.size() / rows;
  std::vector<Tensor> out;
  for (std::size_t start = 0; start < rows; start += chunk) {
    const std::size_t n = std::min(chunk, rows - start);
    Shape s = batch.shape();
    s[0] = n;
    std::vector<double> data(batch.data().begin() + start * width,
                             batch.data().begin() + (start + n) * width);
    out.emplace_back(std::move(s), std::move(data));
  }
  return out;
}

}  // namespace mmclip
