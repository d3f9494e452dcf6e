#pragma once

// Dense and convolution kernels used by the graph engine.
//
// Two implementations share one signature: `serial` is the plain loop nest
// kept as the reference for tests, `parallel` is the OpenMP version the
// engine calls. All kernels accumulate into their output (out += ...).
// Matrices are row-major.

#include <cstddef>
#include <span>

namespace mmclip::kernels {

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t padding = 0;

  std::size_t out_height() const { return height + 2 * padding - kernel + 1; }
  std::size_t out_width() const { return width + 2 * padding - kernel + 1; }
};

#define MMCLIP_KERNEL_DECLS                                                    \
  /* out[m,n] += a[m,k] * b[k,n] */                                            \
  void matmul_nn(std::size_t m, std::size_t k, std::size_t n,                  \
                 std::span<const double> a, std::span<const double> b,         \
                 std::span<double> out);                                       \
  /* out[m,k] += a[m,n] * b[k,n]^T */                                          \
  void matmul_nt(std::size_t m, std::size_t n, std::size_t k,                  \
                 std::span<const double> a, std::span<const double> b,         \
                 std::span<double> out);                                       \
  /* out[k,n] += a[m,k]^T * b[m,n] */                                          \
  void matmul_tn(std::size_t m, std::size_t k, std::size_t n,                  \
                 std::span<const double> a, std::span<const double> b,         \
                 std::span<double> out);                                       \
  /* Stride-1 cross-correlation with zero padding. */                          \
  void conv2d_forward(const ConvGeometry& g, std::span<const double> x,        \
                      std::span<const double> w, std::span<double> y);         \
  void conv2d_backward_input(const ConvGeometry& g,                            \
                             std::span<const double> dy,                       \
                             std::span<const double> w,                        \
                             std::span<double> dx);                            \
  void conv2d_backward_weight(const ConvGeometry& g,                           \
                              std::span<const double> x,                       \
                              std::span<const double> dy,                      \
                              std::span<double> dw);

namespace serial {
MMCLIP_KERNEL_DECLS
}

namespace parallel {
MMCLIP_KERNEL_DECLS
}

#undef MMCLIP_KERNEL_DECLS

/// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace mmclip::kernels
