// SPDX-License-Identifier: Apache-2.0

#include "pipefill/kfac/matrix.hpp"

#include <cmath>
#include <stdexcept>

namespace pipefill::kfac {

namespace {
constexpr std::size_t kMaterializeGuard = 1u << 22;  // entries

void require_square(const Matrix& m, const char* what) {
    if (m.rows() != m.cols()) throw std::invalid_argument(std::string(what) + ": matrix not square");
}
}  // namespace

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = static_cast<int>(rows.size());
    cols_ = rows_ > 0 ? static_cast<int>(rows.begin()->size()) : 0;
    data_.reserve(static_cast<std::size_t>(rows_) * cols_);
    for (const auto& row : rows) {
        if (static_cast<int>(row.size()) != cols_)
            throw std::invalid_argument("ragged initializer");
        data_.insert(data_.end(), row.begin(), row.end());
    }
}

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (int r = 0; r < rows_; ++r)
        for (int c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

Matrix Matrix::scaled(double s) const {
    Matrix out = *this;
    for (auto& v : out.data()) v *= s;
    return out;
}

double Matrix::max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: shape mismatch");
    Matrix out(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (int j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
        }
    return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument("add: shape mismatch");
    Matrix out = a;
    for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] += b.data()[i];
    return out;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument("subtract: shape mismatch");
    Matrix out = a;
    for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] -= b.data()[i];
    return out;
}

double max_abs_diff(const Matrix& a, const Matrix& b) { return subtract(a, b).max_abs(); }

std::vector<double> vec(const Matrix& m) {
    std::vector<double> v(static_cast<std::size_t>(m.rows()) * m.cols());
    std::size_t idx = 0;
    for (int c = 0; c < m.cols(); ++c)
        for (int r = 0; r < m.rows(); ++r) v[idx++] = m(r, c);
    return v;
}

Matrix unvec(const std::vector<double>& v, int rows, int cols) {
    if (v.size() != static_cast<std::size_t>(rows) * cols)
        throw std::invalid_argument("unvec: size mismatch");
    Matrix m(rows, cols);
    std::size_t idx = 0;
    for (int c = 0; c < cols; ++c)
        for (int r = 0; r < rows; ++r) m(r, c) = v[idx++];
    return m;
}

Matrix kron(const Matrix& a, const Matrix& b) {
    const std::size_t entries = static_cast<std::size_t>(a.rows()) * b.rows() *
                                static_cast<std::size_t>(a.cols()) * b.cols();
    if (entries > kMaterializeGuard) throw std::length_error("kron: result too large");
    Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) {
            const double aij = a(i, j);
            for (int k = 0; k < b.rows(); ++k)
                for (int l = 0; l < b.cols(); ++l)
                    out(i * b.rows() + k, j * b.cols() + l) = aij * b(k, l);
        }
    return out;
}

Matrix cholesky_factor(const Matrix& m) {
    require_square(m, "cholesky");
    const int n = m.rows();
    Matrix l(n, n);
    for (int j = 0; j < n; ++j) {
        double diag = m(j, j);
        for (int k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
        if (!(diag > 0.0) || !std::isfinite(diag))
            throw std::domain_error("cholesky: matrix not positive definite (damping too small?)");
        l(j, j) = std::sqrt(diag);
        for (int i = j + 1; i < n; ++i) {
            double sum = m(i, j);
            for (int k = 0; k < j; ++k) sum -= l(i, k) * l(j, k);
            l(i, j) = sum / l(j, j);
        }
    }
    return l;
}

Matrix cholesky_spd_inverse(const Matrix& m, double damping) {
    require_square(m, "cholesky_spd_inverse");
    const int n = m.rows();
    Matrix damped = m;
    for (int i = 0; i < n; ++i) damped(i, i) += damping;
    const Matrix l = cholesky_factor(damped);

    // Invert the lower triangle by forward substitution, then
    // M^-1 = L^-T L^-1.
    Matrix linv(n, n);
    for (int j = 0; j < n; ++j) {
        linv(j, j) = 1.0 / l(j, j);
        for (int i = j + 1; i < n; ++i) {
            double sum = 0.0;
            for (int k = j; k < i; ++k) sum += l(i, k) * linv(k, j);
            linv(i, j) = -sum / l(i, i);
        }
    }
    Matrix out(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) {
            double sum = 0.0;
            for (int k = i; k < n; ++k) sum += linv(k, i) * linv(k, j);
            out(i, j) = sum;
            out(j, i) = sum;
        }
    return out;
}

std::vector<double> solve_spd(const Matrix& m, const std::vector<double>& rhs) {
    require_square(m, "solve_spd");
    if (rhs.size() != static_cast<std::size_t>(m.rows()))
        throw std::invalid_argument("solve_spd: rhs size mismatch");
    const Matrix l = cholesky_factor(m);
    const int n = m.rows();
    std::vector<double> y(rhs);
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < i; ++k) y[i] -= l(i, k) * y[k];
        y[i] /= l(i, i);
    }
    for (int i = n - 1; i >= 0; --i) {
        for (int k = i + 1; k < n; ++k) y[i] -= l(k, i) * y[k];
        y[i] /= l(i, i);
    }
    return y;
}

}  // namespace pipefill::kfac
