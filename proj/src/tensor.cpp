#include "focusdpo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "focusdpo/error.hpp"

namespace focusdpo {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::shape: return "shape error";
        case ErrorKind::range: return "range error";
        case ErrorKind::config: return "config error";
        case ErrorKind::data: return "data error";
        case ErrorKind::numeric: return "numeric error";
        case ErrorKind::usage: return "usage error";
        case ErrorKind::io: return "i/o error";
    }
    return "error";
}

std::string dims_to_string(const Dims& dims) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) os << 'x';
        os << dims[i];
    }
    os << ']';
    return os.str();
}

namespace {

std::size_t checked_count(const Dims& dims) {
    if (dims.empty()) throw ShapeError("tensor needs at least one dimension");
    std::size_t n = 1;
    for (std::size_t d : dims) {
        if (d == 0) throw ShapeError("tensor dims must be positive, got " + dims_to_string(dims));
        n *= d;
    }
    return n;
}

}  // namespace

Tensor::Tensor(Dims dims) : dims_(std::move(dims)), data_(checked_count(dims_), 0.0) {}

Tensor::Tensor(Dims dims, std::vector<double> data) : dims_(std::move(dims)), data_(std::move(data)) {
    if (checked_count(dims_) != data_.size()) {
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match dims " +
                         dims_to_string(dims_));
    }
}

Tensor Tensor::filled(Dims dims, double value) {
    Tensor t(std::move(dims));
    t.fill(value);
    return t;
}

std::size_t Tensor::dim(std::size_t i) const {
    if (i >= dims_.size()) throw ShapeError("dim index out of range");
    return dims_[i];
}

Tensor Tensor::reshaped(Dims dims) const { return Tensor(std::move(dims), data_); }

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

void require_same_dims(const Tensor& a, const Tensor& b, const char* what) {
    if (a.dims() != b.dims()) {
        throw ShapeError(std::string(what) + ": dims " + dims_to_string(a.dims()) + " vs " +
                         dims_to_string(b.dims()));
    }
}

namespace {

template <class Op>
Tensor zip(const Tensor& a, const Tensor& b, const char* what, Op op) {
    require_same_dims(a, b, what);
    Tensor out(a.dims());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = op(a[i], b[i]);
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return zip(a, b, "add", std::plus<>{}); }
Tensor sub(const Tensor& a, const Tensor& b) { return zip(a, b, "sub", std::minus<>{}); }
Tensor hadamard(const Tensor& a, const Tensor& b) { return zip(a, b, "hadamard", std::multiplies<>{}); }

Tensor scale(const Tensor& a, double s) {
    Tensor out(a.dims());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
    return out;
}

void axpy(double s, const Tensor& x, Tensor& y) {
    require_same_dims(x, y, "axpy");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += s * x[i];
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose expects a matrix, got " + dims_to_string(a.dims()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

double sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return s;
}

double dot(const Tensor& a, const Tensor& b) {
    require_same_dims(a, b, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double sq_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    return s;
}

double max_abs(const Tensor& a) {
    double m = 0.0;
    for (double v : a.data()) m = std::max(m, std::abs(v));
    return m;
}

}  // namespace focusdpo
