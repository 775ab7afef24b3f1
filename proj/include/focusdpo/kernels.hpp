#pragma once

#include <functional>

#include "focusdpo/tensor.hpp"

// Differentiable building blocks. Each forward kernel has a matching
// *_backward that maps the output cotangent to input cotangents.
namespace focusdpo {

Tensor matmul(const Tensor& a, const Tensor& b);

struct MatmulGrads {
    Tensor a;
    Tensor b;
};
/// dL/da = g b^T, dL/db = a^T g.
MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& g);

/// Row-wise softmax with the row max subtracted first.
Tensor softmax_rows(const Tensor& x);
/// Takes the softmax *output* s; per row dx = s * (g - <g, s>).
Tensor softmax_rows_backward(const Tensor& s, const Tensor& g);

/// x * sigmoid(x), elementwise.
Tensor silu(const Tensor& x);
Tensor silu_backward(const Tensor& x, const Tensor& g);

/// x[m x n] + bias[n] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
/// Cotangent of the bias: column sums of g.
Tensor sum_rows(const Tensor& g);

/// sum_{h,w,c} (x[h,w,c] * m[h,w])^2. x may be [H,W] or [H,W,C].
double masked_sq_norm(const Tensor& x, const Tensor& m);
/// g * 2 x m^2, broadcast over channels. m is treated as a constant.
Tensor masked_sq_norm_backward(const Tensor& x, const Tensor& m, double g);

/// Scalar objective that writes its analytic gradient into *grad when
/// grad is non-null.
using ScalarObjective = std::function<double(const Tensor& theta, Tensor* grad)>;

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

/// Central differences per coordinate against the analytic gradient.
/// Error per coordinate is |numeric - analytic| / (|analytic| + 1e-8).
GradCheckReport grad_check_report(const ScalarObjective& f, const Tensor& theta, double eps);
double grad_check(const ScalarObjective& f, const Tensor& theta, double eps);

}  // namespace focusdpo
