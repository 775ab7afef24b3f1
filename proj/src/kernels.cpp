#include "focusdpo/kernels.hpp"

#include <algorithm>
#include <cmath>

#include "focusdpo/error.hpp"

namespace focusdpo {

namespace {

void require_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw ShapeError(std::string(what) + " expects a matrix, got " + dims_to_string(t.dims()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul inner dims differ: " + dims_to_string(a.dims()) + " x " + dims_to_string(b.dims()));
    }
    Tensor out({m, n});
    auto o = out.data();
    auto av = a.data();
    auto bv = b.data();
    // i-p-j order: sequential accumulation over p for each output element.
    for (std::size_t i = 0; i < m; ++i) {
        double* row = o.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            const double* brow = bv.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
        }
    }
    return out;
}

MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& g) {
    require_matrix(g, "matmul_backward");
    if (g.dim(0) != a.dim(0) || g.dim(1) != b.dim(1)) {
        throw ShapeError("matmul_backward cotangent dims " + dims_to_string(g.dims()));
    }
    return {matmul(g, transpose(b)), matmul(transpose(a), g)};
}

Tensor softmax_rows(const Tensor& x) {
    require_matrix(x, "softmax_rows");
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double mx = x.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x.at(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = std::exp(x.at(i, j) - mx);
            out.at(i, j) = e;
            z += e;
        }
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= z;
    }
    return out;
}

Tensor softmax_rows_backward(const Tensor& s, const Tensor& g) {
    require_same_dims(s, g, "softmax_rows_backward");
    const std::size_t m = s.dim(0), n = s.dim(1);
    Tensor dx({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double inner = 0.0;
        for (std::size_t j = 0; j < n; ++j) inner += g.at(i, j) * s.at(i, j);
        for (std::size_t j = 0; j < n; ++j) dx.at(i, j) = s.at(i, j) * (g.at(i, j) - inner);
    }
    return dx;
}

namespace {

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Tensor silu(const Tensor& x) {
    Tensor out(x.dims());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * sigmoid(x[i]);
    return out;
}

Tensor silu_backward(const Tensor& x, const Tensor& g) {
    require_same_dims(x, g, "silu_backward");
    Tensor dx(x.dims());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = sigmoid(x[i]);
        dx[i] = g[i] * s * (1.0 + x[i] * (1.0 - s));
    }
    return dx;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    require_matrix(x, "add_row_bias");
    if (bias.size() != x.dim(1)) throw ShapeError("bias length does not match row width");
    Tensor out = x;
    const std::size_t n = x.dim(1);
    for (std::size_t i = 0; i < x.dim(0); ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) += bias[j];
    return out;
}

Tensor sum_rows(const Tensor& g) {
    require_matrix(g, "sum_rows");
    Tensor out({g.dim(1)});
    for (std::size_t i = 0; i < g.dim(0); ++i)
        for (std::size_t j = 0; j < g.dim(1); ++j) out[j] += g.at(i, j);
    return out;
}

namespace {

std::size_t masked_channels(const Tensor& x, const Tensor& m) {
    if (m.rank() != 2) throw ShapeError("mask must be [H,W], got " + dims_to_string(m.dims()));
    if (x.rank() != 2 && x.rank() != 3) throw ShapeError("masked tensor must be [H,W] or [H,W,C]");
    if (x.dim(0) != m.dim(0) || x.dim(1) != m.dim(1)) {
        throw ShapeError("spatial dims differ: " + dims_to_string(x.dims()) + " vs mask " + dims_to_string(m.dims()));
    }
    return x.rank() == 3 ? x.dim(2) : 1;
}

}  // namespace

double masked_sq_norm(const Tensor& x, const Tensor& m) {
    const std::size_t c = masked_channels(x, m);
    double s = 0.0;
    for (std::size_t p = 0; p < m.size(); ++p) {
        for (std::size_t k = 0; k < c; ++k) {
            const double v = x[p * c + k] * m[p];
            s += v * v;
        }
    }
    return s;
}

Tensor masked_sq_norm_backward(const Tensor& x, const Tensor& m, double g) {
    const std::size_t c = masked_channels(x, m);
    Tensor dx(x.dims());
    for (std::size_t p = 0; p < m.size(); ++p) {
        const double m2 = m[p] * m[p];
        for (std::size_t k = 0; k < c; ++k) dx[p * c + k] = g * 2.0 * x[p * c + k] * m2;
    }
    return dx;
}

GradCheckReport grad_check_report(const ScalarObjective& f, const Tensor& theta, double eps) {
    if (!(eps >= 1e-8 && eps <= 1e-3)) throw RangeError("grad_check eps must lie in [1e-8, 1e-3]");
    Tensor analytic = Tensor::zeros_like(theta);
    const double f0 = f(theta, &analytic);
    if (!std::isfinite(f0)) throw NumericError("grad_check: objective is not finite at theta");
    require_same_dims(theta, analytic, "grad_check gradient");

    GradCheckReport report;
    Tensor probe = theta;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double fp = f(probe, nullptr);
        probe[i] = orig - eps;
        const double fm = f(probe, nullptr);
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("grad_check: objective not finite at coordinate " + std::to_string(i));
        }
        const double numeric = (fp - fm) / (2.0 * eps);
        const double rel = std::abs(numeric - analytic[i]) / (std::abs(analytic[i]) + 1e-8);
        if (rel > report.max_rel_error) {
            report = {rel, i, analytic[i], numeric};
        }
    }
    return report;
}

double grad_check(const ScalarObjective& f, const Tensor& theta, double eps) {
    return grad_check_report(f, theta, eps).max_rel_error;
}

}  // namespace focusdpo
