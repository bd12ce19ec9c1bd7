#pragma once

#include <cstddef>
#include <filesystem>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace neurotune {

// Dense row-major double matrix; the universal data carrier. Empty matrices
// are constructible (default state) but rejected at operation boundaries.
struct MatrixF64 {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    MatrixF64() = default;
    MatrixF64(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    static MatrixF64 from_rows(std::initializer_list<std::initializer_list<double>> rows_init);

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const double& at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    std::size_t size() const { return rows * cols; }
    bool empty() const { return rows == 0 || cols == 0; }
    bool same_shape(const MatrixF64& o) const { return rows == o.rows && cols == o.cols; }
    bool all_finite() const;
};

// Bitwise equality (byte-for-byte, so -0.0 != 0.0 and NaN patterns compare
// exactly); shape must match too.
bool bit_equal(const MatrixF64& a, const MatrixF64& b);

void require_nonempty(const MatrixF64& m, const char* what);

// ---- binary matrix file format -------------------------------------------
// magic "MMBT" | u32 version=1 | u64 rows | u64 cols | rows*cols f64
// All integers and payload little-endian. A 2x2 matrix occupies 56 bytes.
void write_matrix(const MatrixF64& m, const std::filesystem::path& path);
MatrixF64 read_matrix(const std::filesystem::path& path);

// ---- small dense linear algebra -------------------------------------------
MatrixF64 matmul(const MatrixF64& a, const MatrixF64& b);     // a (r x k) * b (k x c)
MatrixF64 matmul_tn(const MatrixF64& a, const MatrixF64& b);  // a^T * b
MatrixF64 matmul_nt(const MatrixF64& a, const MatrixF64& b);  // a * b^T
MatrixF64 transpose(const MatrixF64& a);
void add_inplace(MatrixF64& a, const MatrixF64& b);
void scale_inplace(MatrixF64& a, double s);
// a += s * b, the accumulation primitive of every optimizer step.
void axpy_inplace(MatrixF64& a, double s, const MatrixF64& b);

// Solves A X = B for SPD A via Cholesky; throws NumericalError when A is not
// positive definite to working precision.
MatrixF64 cholesky_solve(MatrixF64 a, const MatrixF64& b);

}  // namespace neurotune
