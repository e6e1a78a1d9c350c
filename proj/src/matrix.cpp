// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include "adaptwin/matrix.hpp"

#include <algorithm>
#include <cmath>

#include "adaptwin/errors.hpp"

namespace adaptwin {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                         std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) {
            throw ShapeError("ragged initializer list");
        }
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

Matrix Matrix::row_vector(std::span<const double> values) {
    return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Matrix::shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

Matrix& Matrix::operator+=(const Matrix& o) {
    if (!same_shape(o)) {
        throw ShapeError("add: " + shape_string() + " vs " + o.shape_string());
    }
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] += o.data_[i];
    }
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& o) {
    if (!same_shape(o)) {
        throw ShapeError("subtract: " + shape_string() + " vs " + o.shape_string());
    }
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] -= o.data_[i];
    }
    return *this;
}

Matrix& Matrix::operator*=(double s) noexcept {
    for (auto& v : data_) {
        v *= s;
    }
    return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(double s, Matrix a) { return a *= s; }

Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            t(j, i) = m(i, j);
        }
    }
    return t;
}

Matrix slice_rows(const Matrix& m, std::size_t begin, std::size_t end) {
    if (begin > end || end > m.rows()) {
        throw ShapeError("slice_rows out of range on " + m.shape_string());
    }
    Matrix out(end - begin, m.cols());
    std::copy(m.data() + begin * m.cols(), m.data() + end * m.cols(), out.data());
    return out;
}

Matrix slice_cols(const Matrix& m, std::size_t begin, std::size_t end) {
    if (begin > end || end > m.cols()) {
        throw ShapeError("slice_cols out of range on " + m.shape_string());
    }
    Matrix out(m.rows(), end - begin);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        std::copy(m.data() + i * m.cols() + begin, m.data() + i * m.cols() + end, out.row(i).data());
    }
    return out;
}

Matrix vstack(std::span<const Matrix> parts) {
    if (parts.empty()) {
        return {};
    }
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) {
            throw ShapeError("vstack: column mismatch");
        }
        rows += p.rows();
    }
    Matrix out(rows, cols);
    double* dst = out.data();
    for (const auto& p : parts) {
        dst = std::copy(p.data(), p.data() + p.size(), dst);
    }
    return out;
}

Matrix hstack(std::span<const Matrix> parts) {
    if (parts.empty()) {
        return {};
    }
    const std::size_t rows = parts.front().rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) {
            throw ShapeError("hstack: row mismatch");
        }
        cols += p.cols();
    }
    Matrix out(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        double* dst = out.row(i).data();
        for (const auto& p : parts) {
            dst = std::copy(p.row(i).begin(), p.row(i).end(), dst);
        }
    }
    return out;
}

Matrix round_to_f32(const Matrix& m) {
    Matrix out = m;
    for (auto& v : out.values()) {
        v = static_cast<double>(static_cast<float>(v));
    }
    return out;
}

}  // namespace adaptwin
