#pragma once

#include <functional>

#include "mmclip/tensor.hpp"

namespace mmclip {

using ScalarFn = std::function<double(const Tensor&)>;

/// Central-difference gradient estimate of fn at x, one coordinate at a time.
Tensor finite_difference(const ScalarFn& fn, const Tensor& x, double eps);

/// ||a - b|| / max(||a||, ||b||), or 0 when both are exactly zero.
double relative_error(const Tensor& a, const Tensor& b);

}  // namespace mmclip
