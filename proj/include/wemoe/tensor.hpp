#pragma once

#include "wemoe/error.hpp"

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace wemoe {

using Shape = std::vector<std::size_t>;

enum class Precision { F32, F64 };

// Global arithmetic precision. Storage is always double; in F32 mode every
// operation result is rounded through float so results match 32-bit arithmetic
// at the operation boundary.
Precision precision() noexcept;
void set_precision(Precision p) noexcept;

// When enabled, operations throw NumericalError on non-finite results.
bool finite_checks() noexcept;
void set_finite_checks(bool on) noexcept;

// Restores precision and finite-check settings on scope exit.
class PrecisionScope {
public:
    explicit PrecisionScope(Precision p, bool checks = true);
    ~PrecisionScope();
    PrecisionScope(const PrecisionScope &) = delete;
    PrecisionScope & operator=(const PrecisionScope &) = delete;

private:
    Precision saved_precision_;
    bool saved_checks_;
};

inline double round_to_precision(double x) noexcept {
    return precision() == Precision::F32 ? static_cast<double>(static_cast<float>(x)) : x;
}

std::size_t shape_numel(const Shape & shape) noexcept;
std::string shape_str(const Shape & shape);

// Immutable dense tensor. Copies share the underlying buffer.
class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor vector(std::initializer_list<double> values);

    const Shape & shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_ ? data_->size() : 0; }
    std::size_t dim(std::size_t i) const;
    // Rows/cols of a rank-2 tensor; a rank-1 tensor is treated as one row.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const noexcept;
    double operator[](std::size_t i) const { return (*data_)[i]; }
    double at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }
    double item() const;

    Tensor reshaped(Shape shape) const;
    // Copy of the values, for building a modified tensor.
    std::vector<double> to_vector() const;

    bool all_finite() const noexcept;
    bool same_shape(const Tensor & other) const noexcept { return shape_ == other.shape_; }
    // Bitwise value and shape equality.
    bool identical(const Tensor & other) const noexcept;

private:
    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
};

double max_abs_diff(const Tensor & a, const Tensor & b);
// max |a-b| / max(max |b|, floor)
double max_rel_diff(const Tensor & a, const Tensor & b, double floor = 1e-12);

// Sorted-index sparse record over a dense shape. Flat indices are row-major.
struct SparseTensor {
    Shape dense_shape;
    std::vector<std::uint32_t> indices;
    std::vector<double> values;

    std::size_t nnz() const noexcept { return indices.size(); }
    std::size_t dense_size() const noexcept { return shape_numel(dense_shape); }
    // Throws ContractError unless indices are strictly increasing and in range.
    void validate() const;
    Tensor to_dense() const;
};

} // namespace wemoe
