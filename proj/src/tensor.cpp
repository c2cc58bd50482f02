#include "wemoe/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>

namespace wemoe {

namespace {
Precision g_precision = Precision::F32;
bool g_finite_checks = false;
} // namespace

Precision precision() noexcept { return g_precision; }
void set_precision(Precision p) noexcept { g_precision = p; }
bool finite_checks() noexcept { return g_finite_checks; }
void set_finite_checks(bool on) noexcept { g_finite_checks = on; }

PrecisionScope::PrecisionScope(Precision p, bool checks)
    : saved_precision_(g_precision), saved_checks_(g_finite_checks) {
    g_precision = p;
    g_finite_checks = checks;
}

PrecisionScope::~PrecisionScope() {
    g_precision = saved_precision_;
    g_finite_checks = saved_checks_;
}

std::size_t shape_numel(const Shape & shape) noexcept {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape & shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor() : data_(std::make_shared<const std::vector<double>>()) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
    for (auto d : shape_) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
    if (shape_numel(shape_) != data.size()) {
        throw ShapeError("shape " + shape_str(shape_) + " does not match " + std::to_string(data.size()) +
                         " values");
    }
    data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto & row : rows) {
        if (row.size() != c) throw ShapeError("ragged matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t i) const {
    if (i >= shape_.size()) throw ShapeError("dimension index out of range for " + shape_str(shape_));
    return shape_[i];
}

std::size_t Tensor::rows() const {
    if (shape_.size() == 1) return 1;
    if (shape_.size() != 2) throw ShapeError("expected a matrix, got " + shape_str(shape_));
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (shape_.size() == 1) return shape_[0];
    if (shape_.size() != 2) throw ShapeError("expected a matrix, got " + shape_str(shape_));
    return shape_[1];
}

std::span<const double> Tensor::data() const noexcept { return {data_->data(), data_->size()}; }

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
}

std::vector<double> Tensor::to_vector() const { return *data_; }

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_->begin(), data_->end(), [](double x) { return std::isfinite(x); });
}

bool Tensor::identical(const Tensor & other) const noexcept {
    if (shape_ != other.shape_) return false;
    const auto & a = *data_;
    const auto & b = *other.data_;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
    }
    return true;
}

double max_abs_diff(const Tensor & a, const Tensor & b) {
    if (a.size() != b.size()) throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double max_rel_diff(const Tensor & a, const Tensor & b, double floor) {
    double scale = floor;
    for (double x : b.data()) scale = std::max(scale, std::abs(x));
    return max_abs_diff(a, b) / scale;
}

void SparseTensor::validate() const {
    if (indices.size() != values.size()) throw ContractError("sparse record: index/value count mismatch");
    const auto n = dense_size();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= n) {
            throw ContractError("sparse record: index " + std::to_string(indices[i]) + " out of range for " +
                                shape_str(dense_shape));
        }
        if (i && indices[i] <= indices[i - 1]) throw ContractError("sparse record: indices not strictly increasing");
    }
}

Tensor SparseTensor::to_dense() const {
    validate();
    std::vector<double> d(dense_size(), 0.0);
    for (std::size_t i = 0; i < indices.size(); ++i) d[indices[i]] = values[i];
    return Tensor(dense_shape, std::move(d));
}

} // namespace wemoe
