#include <algorithm>
#include <vector>

#include "mmclip/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mmclip::kernels {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace parallel {

namespace {
// Below this many multiply-adds the fork/join costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;
}  // namespace

void matmul_nn(std::size_t m, std::size_t k, std::size_t n,
               std::span<const double> a, std::span<const double> b,
               std::span<double> out) {
  const double* ap = a.data();
  const double* bp = b.data();
  double* cp = out.data();
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
  for (std::size_t i = 0; i < m; ++i) {
    double* row = cp + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ap[i * k + p];
      if (av == 0.0) continue;
      const double* brow = bp + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

void matmul_nt(std::size_t m, std::size_t n, std::size_t k,
               std::span<const double> a, std::span<const double> b,
               std::span<double> out) {
  // Transpose b once so the inner loop is a unit-stride update.
  std::vector<double> bt(n * k);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t p = 0; p < n; ++p) bt[p * k + j] = b[j * n + p];
  const double* ap = a.data();
  const double* tp = bt.data();
  double* cp = out.data();
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
  for (std::size_t i = 0; i < m; ++i) {
    double* row = cp + i * k;
    for (std::size_t p = 0; p < n; ++p) {
      const double av = ap[i * n + p];
      if (av == 0.0) continue;
      const double* trow = tp + p * k;
      for (std::size_t j = 0; j < k; ++j) row[j] += av * trow[j];
    }
  }
}

void matmul_tn(std::size_t m, std::size_t k, std::size_t n,
               std::span<const double> a, std::span<const double> b,
               std::span<double> out) {
  const double* ap = a.data();
  const double* bp = b.data();
  double* cp = out.data();
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
  for (std::size_t p = 0; p < k; ++p) {
    double* row = cp + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i * k + p];
      if (av == 0.0) continue;
      const double* brow = bp + i * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

// Valid output range [lo, hi) along one axis for kernel offset u.
static void valid_range(std::size_t out_len, std::size_t in_len, std::size_t u,
                        std::size_t pad, std::size_t& lo, std::size_t& hi) {
  // input index = r + u - pad must lie in [0, in_len)
  lo = pad > u ? pad - u : 0;
  const long last = static_cast<long>(in_len) + static_cast<long>(pad) -
                    static_cast<long>(u);
  hi = static_cast<std::size_t>(
      std::clamp<long>(last, 0, static_cast<long>(out_len)));
  if (lo > hi) lo = hi;
}

void conv2d_forward(const ConvGeometry& g, std::span<const double> x,
                    std::span<const double> w, std::span<double> y) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const std::size_t jobs = g.batch * g.out_channels;
  const std::size_t work = jobs * oh * ow * g.in_channels * g.kernel * g.kernel;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (std::size_t job = 0; job < jobs; ++job) {
    const std::size_t b = job / g.out_channels, o = job % g.out_channels;
    double* ymap = y.data() + job * oh * ow;
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      const double* xmap = x.data() + (b * g.in_channels + c) * g.height * g.width;
      for (std::size_t u = 0; u < g.kernel; ++u) {
        std::size_t r0, r1;
        valid_range(oh, g.height, u, g.padding, r0, r1);
        for (std::size_t v = 0; v < g.kernel; ++v) {
          std::size_t s0, s1;
          valid_range(ow, g.width, v, g.padding, s0, s1);
          const double wv =
              w[((o * g.in_channels + c) * g.kernel + u) * g.kernel + v];
          for (std::size_t r = r0; r < r1; ++r) {
            const double* xrow = xmap + (r + u - g.padding) * g.width;
            double* yrow = ymap + r * ow;
            for (std::size_t s = s0; s < s1; ++s) yrow[s] += wv * xrow[s + v - g.padding];
          }
        }
      }
    }
  }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const std::size_t jobs = g.batch * g.in_channels;
  const std::size_t work = jobs * oh * ow * g.out_channels * g.kernel * g.kernel;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (std::size_t job = 0; job < jobs; ++job) {
    const std::size_t b = job / g.in_channels, c = job % g.in_channels;
    double* xmap = dx.data() + job * g.height * g.width;
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      const double* ymap = dy.data() + (b * g.out_channels + o) * oh * ow;
      for (std::size_t u = 0; u < g.kernel; ++u) {
        std::size_t r0, r1;
        valid_range(oh, g.height, u, g.padding, r0, r1);
        for (std::size_t v = 0; v < g.kernel; ++v) {
          std::size_t s0, s1;
          valid_range(ow, g.width, v, g.padding, s0, s1);
          const double wv =
              w[((o * g.in_channels + c) * g.kernel + u) * g.kernel + v];
          for (std::size_t r = r0; r < r1; ++r) {
            double* xrow = xmap + (r + u - g.padding) * g.width;
            const double* yrow = ymap + r * ow;
            for (std::size_t s = s0; s < s1; ++s) xrow[s + v - g.padding] += wv * yrow[s];
          }
        }
      }
    }
  }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const std::size_t jobs = g.out_channels * g.in_channels;
  const std::size_t work = jobs * g.batch * oh * ow * g.kernel * g.kernel;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (std::size_t job = 0; job < jobs; ++job) {
    const std::size_t o = job / g.in_channels, c = job % g.in_channels;
    double* wmap = dw.data() + job * g.kernel * g.kernel;
    for (std::size_t u = 0; u < g.kernel; ++u) {
      std::size_t r0, r1;
      valid_range(oh, g.height, u, g.padding, r0, r1);
      for (std::size_t v = 0; v < g.kernel; ++v) {
        std::size_t s0, s1;
        valid_range(ow, g.width, v, g.padding, s0, s1);
        double acc = 0.0;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* xmap = x.data() + (b * g.in_channels + c) * g.height * g.width;
          const double* ymap = dy.data() + (b * g.out_channels + o) * oh * ow;
          for (std::size_t r = r0; r < r1; ++r) {
            const double* xrow = xmap + (r + u - g.padding) * g.width;
            const double* yrow = ymap + r * ow;
            for (std::size_t s = s0; s < s1; ++s) acc += xrow[s + v - g.padding] * yrow[s];
          }
        }
        wmap[u * g.kernel + v] += acc;
      }
    }
  }
}

}  // namespace parallel
}  // namespace mmclip::kernels
