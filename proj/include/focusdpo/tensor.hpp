#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace focusdpo {

using Dims = std::vector<std::size_t>;

std::string dims_to_string(const Dims& dims);

/// Dense row-major tensor of doubles. Every dim is positive and the element
/// count always equals the product of dims.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Dims dims);
    Tensor(Dims dims, std::vector<double> data);

    static Tensor zeros(Dims dims) { return Tensor(std::move(dims)); }
    static Tensor filled(Dims dims, double value);
    static Tensor zeros_like(const Tensor& t) { return Tensor(t.dims()); }

    const Dims& dims() const noexcept { return dims_; }
    std::size_t rank() const noexcept { return dims_.size(); }
    std::size_t dim(std::size_t i) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // 2-D and 3-D accessors, unchecked beyond the debug assert.
    double& at(std::size_t r, std::size_t c) { return data_[r * dims_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * dims_[1] + c]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * dims_[1] + j) * dims_[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * dims_[1] + j) * dims_[2] + k];
    }

    Tensor reshaped(Dims dims) const;
    bool all_finite() const noexcept;
    void fill(double value);

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Dims dims_;
    std::vector<double> data_;
};

/// Value plus accumulated cotangent of the same shape.
struct DualTensor {
    Tensor value;
    Tensor grad;

    DualTensor() = default;
    explicit DualTensor(Tensor v) : value(std::move(v)), grad(Tensor::zeros_like(value)) {}
    void zero_grad() { grad.fill(0.0); }
};

void require_same_dims(const Tensor& a, const Tensor& b, const char* what);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor hadamard(const Tensor& a, const Tensor& b);
/// y += s * x
void axpy(double s, const Tensor& x, Tensor& y);
Tensor transpose(const Tensor& a);

double sum(const Tensor& a);
double dot(const Tensor& a, const Tensor& b);
double sq_norm(const Tensor& a);
double max_abs(const Tensor& a);

}  // namespace focusdpo
