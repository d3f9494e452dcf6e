#include "mmclip/kernels.hpp"

namespace mmclip::kernels::serial {

void matmul_nn(std::size_t m, std::size_t k, std::size_t n,
               std::span<const double> a, std::span<const double> b,
               std::span<double> out) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      out[i * n + j] += acc;
    }
}

void matmul_nt(std::size_t m, std::size_t n, std::size_t k,
               std::span<const double> a, std::span<const double> b,
               std::span<double> out) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < n; ++p) acc += a[i * n + p] * b[j * n + p];
      out[i * k + j] += acc;
    }
}

void matmul_tn(std::size_t m, std::size_t k, std::size_t n,
               std::span<const double> a, std::span<const double> b,
               std::span<double> out) {
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < m; ++i) acc += a[i * k + p] * b[i * n + j];
      out[p * n + j] += acc;
    }
}

namespace {

// Input value at padded coordinates, zero outside the image.
double at(const ConvGeometry& g, std::span<const double> x, std::size_t b,
          std::size_t c, long r, long s) {
  if (r < 0 || s < 0 || r >= static_cast<long>(g.height) ||
      s >= static_cast<long>(g.width))
    return 0.0;
  return x[((b * g.in_channels + c) * g.height + r) * g.width + s];
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const double> x,
                    std::span<const double> w, std::span<double> y) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const long pad = static_cast<long>(g.padding);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t s = 0; s < ow; ++s) {
          double acc = 0.0;
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t u = 0; u < g.kernel; ++u)
              for (std::size_t v = 0; v < g.kernel; ++v)
                acc += w[((o * g.in_channels + c) * g.kernel + u) * g.kernel + v] *
                       at(g, x, b, c, static_cast<long>(r + u) - pad,
                          static_cast<long>(s + v) - pad);
          y[((b * g.out_channels + o) * oh + r) * ow + s] += acc;
        }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const long pad = static_cast<long>(g.padding);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t s = 0; s < ow; ++s) {
          const double grad = dy[((b * g.out_channels + o) * oh + r) * ow + s];
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t u = 0; u < g.kernel; ++u)
              for (std::size_t v = 0; v < g.kernel; ++v) {
                const long ir = static_cast<long>(r + u) - pad;
                const long is = static_cast<long>(s + v) - pad;
                if (ir < 0 || is < 0 || ir >= static_cast<long>(g.height) ||
                    is >= static_cast<long>(g.width))
                  continue;
                dx[((b * g.in_channels + c) * g.height + ir) * g.width + is] +=
                    grad * w[((o * g.in_channels + c) * g.kernel + u) * g.kernel + v];
              }
        }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const long pad = static_cast<long>(g.padding);
  for (std::size_t o = 0; o < g.out_channels; ++o)
    for (std::size_t c = 0; c < g.in_channels; ++c)
      for (std::size_t u = 0; u < g.kernel; ++u)
        for (std::size_t v = 0; v < g.kernel; ++v) {
          double acc = 0.0;
          for (std::size_t b = 0; b < g.batch; ++b)
            for (std::size_t r = 0; r < oh; ++r)
              for (std::size_t s = 0; s < ow; ++s)
                acc += dy[((b * g.out_channels + o) * oh + r) * ow + s] *
                       at(g, x, b, c, static_cast<long>(r + u) - pad,
                          static_cast<long>(s + v) - pad);
          dw[((o * g.in_channels + c) * g.kernel + u) * g.kernel + v] += acc;
        }
}

}  // namespace mmclip::kernels::serial
