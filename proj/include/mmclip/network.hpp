#pragma once

// Feedforward classifiers and their activation-clipped counterparts.

#include <cstdint>
#include <optional>
#include <vector>

#include "mmclip/graph.hpp"
#include "mmclip/tensor.hpp"

namespace mmclip {

enum class LayerKind : std::uint8_t { dense = 0, conv = 1, pool = 2, norm = 3, flatten = 4 };
enum class Activation : std::uint8_t { none = 0, relu = 1 };

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t units = 0;    // dense: output features, conv: output channels
  std::size_t kernel = 0;   // conv: kernel size, pool: window
  std::size_t padding = 0;  // conv only
  Activation activation = Activation::none;
  /// Output of this layer (after activation) is clipped in the bounded network.
  bool clippable = false;

  static LayerSpec dense(std::size_t units, Activation act, bool clippable);
  static LayerSpec conv(std::size_t channels, std::size_t kernel, std::size_t padding,
                        Activation act, bool clippable);
  static LayerSpec pool(std::size_t window, bool clippable);
  static LayerSpec norm(Activation act, bool clippable);
  static LayerSpec flatten();

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Layer list plus learned parameters. Shapes exclude the batch axis.
///
/// Parameter tensors per layer: dense {W[in,out], b[out]}, conv
/// {W[out,in,k,k], b[out]}, norm {scale[c], shift[c]}, none otherwise.
class Network {
 public:
  Network(Shape input_shape, std::vector<LayerSpec> layers);

  const Shape& input_shape() const { return input_shape_; }
  std::size_t input_size() const { return shape_size(input_shape_); }
  std::size_t num_classes() const { return output_shapes_.back()[0]; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const Shape& output_shape(std::size_t layer) const { return output_shapes_.at(layer); }
  const Shape& layer_input_shape(std::size_t layer) const;

  const std::vector<Tensor>& params(std::size_t layer) const { return params_.at(layer); }
  std::vector<Tensor>& params(std::size_t layer) { return params_.at(layer); }
  std::size_t parameter_count() const;

  /// Indices of clippable layers, in order.
  std::vector<std::size_t> clippable_layers() const;
  /// One bound per feature map for spatial outputs, else one per neuron.
  std::size_t bound_length(std::size_t layer) const;

  /// He-normal weights, zero biases, unit norm scales.
  void init_weights(std::uint64_t seed);

  friend bool operator==(const Network&, const Network&) = default;

 private:
  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape> output_shapes_;
  std::vector<std::vector<Tensor>> params_;
};

/// Dense input -> 128 -> 64 -> classes, both hidden layers clippable.
Network mlp3(std::size_t input_dim, std::size_t num_classes);
/// Two conv(3x3)+relu+pool blocks on a 1xHxW image, then the logit layer.
Network cnn_s(std::size_t height, std::size_t width, std::size_t num_classes);

/// Upper bounds for every clippable layer. Every entry is >= kFloor.
class BoundVectors {
 public:
  static constexpr double kFloor = 1e-3;

  BoundVectors() = default;
  /// Entries below the floor are raised to it.
  explicit BoundVectors(std::vector<Tensor> per_layer);

  /// Bounds no activation can reach; the bounded network equals the original.
  static BoundVectors unbounded(const Network& net);

  std::size_t size() const { return layers_.size(); }
  const Tensor& operator[](std::size_t i) const { return layers_.at(i); }
  const std::vector<Tensor>& layers() const { return layers_; }
  std::size_t total_size() const;

  /// Throws unless there is one correctly sized vector per clippable layer.
  void check_compatible(const Network& net) const;

  friend bool operator==(const BoundVectors&, const BoundVectors&) = default;

 private:
  std::vector<Tensor> layers_;
};

struct ForwardOptions {
  bool grad_input = false;
  bool grad_weights = false;
  bool grad_bounds = false;
};

/// Node handles produced by build_forward.
struct ForwardTrace {
  NodeRef input;
  NodeRef logits;
  std::vector<std::vector<NodeRef>> weights;  // per layer, matches params()
  std::vector<NodeRef> bounds;                // per clippable layer
  std::vector<NodeRef> activations;           // per clippable layer, pre-clip
};

/// Appends the (bounded when `bounds` is set) network to `graph` for a batch
/// of shape [N, ...] whose trailing size equals the network input size.
ForwardTrace build_forward(Graph& graph, const Network& net, const Tensor& batch,
                           const BoundVectors* bounds, ForwardOptions options = {});

/// Logits [N, classes] of the unclipped network.
Tensor forward(const Network& net, const Tensor& batch);
/// Logits [N, classes] with every clippable activation replaced by min(h, z).
Tensor bounded_forward(const Network& net, const BoundVectors& bounds, const Tensor& batch);
/// Dispatches to bounded_forward when bounds are present.
Tensor logits(const Network& net, const std::optional<BoundVectors>& bounds,
              const Tensor& batch);

/// Per-layer maxima of the pre-clip activations over a batch, one entry per
/// bound. `bounds` may be null for the plain network.
std::vector<Tensor> activation_maxima(const Network& net, const BoundVectors* bounds,
                                      const Tensor& batch);

/// beta times the largest activation seen on `clean` per neuron/channel,
/// floored at BoundVectors::kFloor. An infinite beta yields unbounded().
BoundVectors init_bounds(const Network& net, const Tensor& clean, double beta);

/// Splits a batch into at most `chunk` rows per block.
std::vector<Tensor> split_batch(const Tensor& batch, std::size_t chunk);

}  // namespace mmclip
