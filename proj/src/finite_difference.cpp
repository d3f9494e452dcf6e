#include "mmclip/finite_difference.hpp"

#include <algorithm>
#include <cmath>

#include "mmclip/error.hpp"

namespace mmclip {

Tensor finite_difference(const ScalarFn& fn, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw InvalidArgument("finite_difference: eps must be > 0");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = fn(probe);
    probe[i] = x[i] - eps;
    const double down = fn(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

double relative_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("relative_error: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  if (denom == 0.0) return 0.0;
  return std::sqrt(diff) / denom;
}

}  // namespace mmclip
