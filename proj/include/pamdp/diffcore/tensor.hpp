#pragma once

#include <Eigen/Core>
#include <Eigen/StdVector>

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pamdp {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Dense row-major 2-D array of doubles. Vectors are 1xN or Nx1.
class Tensor {
public:
    Tensor() = default;

    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Tensor(std::size_t rows, std::size_t cols, const std::vector<double>& data)
        : rows_(rows), cols_(cols), data_(data.begin(), data.end()) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + std::to_string(rows_) + "x" +
                             std::to_string(cols_));
        }
    }

    explicit Tensor(const RowMatrix& m)
        : rows_(static_cast<std::size_t>(m.rows())), cols_(static_cast<std::size_t>(m.cols())),
          data_(m.data(), m.data() + m.size()) {}

    static Tensor row(std::span<const double> values) {
        return {1, values.size(), std::vector<double>(values.begin(), values.end())};
    }
    static Tensor column(std::span<const double> values) {
        return {values.size(), 1, std::vector<double>(values.begin(), values.end())};
    }
    static Tensor scalar(double v) { return {1, 1, v}; }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    std::array<std::size_t, 2> shape() const { return {rows_, cols_}; }
    bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    std::span<const double> row_values(std::size_t r) const {
        return std::span<const double>(data_).subspan(r * cols_, cols_);
    }
    std::span<double> row_values(std::size_t r) {
        return std::span<double>(data_).subspan(r * cols_, cols_);
    }
    std::vector<double> vec() const { return {data_.begin(), data_.end()}; }

    Eigen::Map<RowMatrix> mat() {
        return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
    }
    Eigen::Map<const RowMatrix> mat() const {
        return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
    }

    double item() const {
        if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor");
        return data_[0];
    }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    bool operator==(const Tensor&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    // Aligned storage keeps Eigen on one kernel path, so results are bit-reproducible.
    std::vector<double, Eigen::aligned_allocator<double>> data_;
};

inline std::string shape_string(const Tensor& t) {
    return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

}  // namespace pamdp
