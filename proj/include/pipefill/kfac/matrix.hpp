// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

namespace pipefill::kfac {

/// Dense row-major double matrix, sized for desk-scale linear algebra.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols) : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, 0.0) {}
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(int n);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    double operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    Matrix transposed() const;
    Matrix scaled(double s) const;
    double max_abs() const;

    bool operator==(const Matrix&) const = default;

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
double max_abs_diff(const Matrix& a, const Matrix& b);

/// Column-major vectorization (stacked columns) and its inverse.
std::vector<double> vec(const Matrix& m);
Matrix unvec(const std::vector<double>& v, int rows, int cols);

/// Dense Kronecker product, oracle-sized. Throws std::length_error when the
/// result would exceed the materialization guard.
Matrix kron(const Matrix& a, const Matrix& b);

/// Lower Cholesky factor of a symmetric positive definite matrix. Throws
/// std::domain_error when a pivot fails.
Matrix cholesky_factor(const Matrix& m);

/// (M + lambda*I)^-1 via Cholesky. Residual norm stays below 1e-10 for
/// well-conditioned inputs at double precision.
Matrix cholesky_spd_inverse(const Matrix& m, double damping);

/// Solve (M)x = rhs for symmetric positive definite M.
std::vector<double> solve_spd(const Matrix& m, const std::vector<double>& rhs);

}  // namespace pipefill::kfac
