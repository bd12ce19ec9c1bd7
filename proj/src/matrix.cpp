#include "neurotune/matrix.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "neurotune/error.hpp"

namespace neurotune {

MatrixF64 MatrixF64::from_rows(std::initializer_list<std::initializer_list<double>> rows_init) {
    MatrixF64 m;
    m.rows = rows_init.size();
    m.cols = rows_init.size() ? rows_init.begin()->size() : 0;
    m.data.reserve(m.rows * m.cols);
    for (const auto& r : rows_init) {
        if (r.size() != m.cols) throw ValidationError("from_rows: ragged rows");
        m.data.insert(m.data.end(), r.begin(), r.end());
    }
    return m;
}

bool MatrixF64::all_finite() const {
    for (double x : data)
        if (!std::isfinite(x)) return false;
    return true;
}

bool bit_equal(const MatrixF64& a, const MatrixF64& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data.data(), b.data.data(), a.size() * sizeof(double)) == 0;
}

void require_nonempty(const MatrixF64& m, const char* what) {
    if (m.empty()) throw ValidationError(std::string(what) + ": empty matrix");
}

// ---- file I/O --------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'M', 'B', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

}  // namespace

void write_matrix(const MatrixF64& m, const std::filesystem::path& path) {
    require_nonempty(m, "write_matrix");
    if (!m.all_finite())
        throw ValidationError("write_matrix: non-finite entries in " + path.string());

    std::string buf;
    buf.reserve(24 + m.size() * 8);
    buf.append(kMagic, 4);
    put_u32(buf, kVersion);
    put_u64(buf, m.rows);
    put_u64(buf, m.cols);
    for (double x : m.data) put_u64(buf, std::bit_cast<std::uint64_t>(x));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("write_matrix: cannot open " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write_matrix: short write to " + path.string());
}

MatrixF64 read_matrix(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_matrix: cannot open " + path.string());
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read_matrix: read failure on " + path.string());

    if (buf.size() < 24) throw IoError("read_matrix: truncated header in " + path.string());
    if (std::memcmp(buf.data(), kMagic, 4) != 0)
        throw IoError("read_matrix: bad magic in " + path.string());
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
    if (get_u32(p + 4) != kVersion)
        throw IoError("read_matrix: unsupported version in " + path.string());
    const std::uint64_t rows = get_u64(p + 8);
    const std::uint64_t cols = get_u64(p + 16);
    if (rows == 0 || cols == 0) throw ValidationError("read_matrix: empty shape in " + path.string());
    if (rows > (1ULL << 24) || cols > (1ULL << 24))
        throw IoError("read_matrix: implausible shape in " + path.string());
    if (buf.size() != 24 + rows * cols * 8)
        throw IoError("read_matrix: payload size mismatch in " + path.string());

    MatrixF64 m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i)
        m.data[i] = std::bit_cast<double>(get_u64(p + 24 + 8 * i));
    if (!m.all_finite())
        throw ValidationError("read_matrix: non-finite entries in " + path.string());
    return m;
}

// ---- linear algebra --------------------------------------------------------

MatrixF64 matmul(const MatrixF64& a, const MatrixF64& b) {
    require_nonempty(a, "matmul");
    require_nonempty(b, "matmul");
    if (a.cols != b.rows) throw ValidationError("matmul: inner dimension mismatch");
    MatrixF64 c(a.rows, b.cols, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        double* cr = c.data.data() + i * c.cols;
        const double* ar = a.data.data() + i * a.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double av = ar[k];
            const double* br = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) cr[j] += av * br[j];
        }
    }
    return c;
}

MatrixF64 matmul_tn(const MatrixF64& a, const MatrixF64& b) {
    require_nonempty(a, "matmul_tn");
    require_nonempty(b, "matmul_tn");
    if (a.rows != b.rows) throw ValidationError("matmul_tn: inner dimension mismatch");
    MatrixF64 c(a.cols, b.cols, 0.0);
    for (std::size_t k = 0; k < a.rows; ++k) {
        const double* ar = a.data.data() + k * a.cols;
        const double* br = b.data.data() + k * b.cols;
        for (std::size_t i = 0; i < a.cols; ++i) {
            double* cr = c.data.data() + i * c.cols;
            const double av = ar[i];
            for (std::size_t j = 0; j < b.cols; ++j) cr[j] += av * br[j];
        }
    }
    return c;
}

MatrixF64 matmul_nt(const MatrixF64& a, const MatrixF64& b) {
    require_nonempty(a, "matmul_nt");
    require_nonempty(b, "matmul_nt");
    if (a.cols != b.cols) throw ValidationError("matmul_nt: inner dimension mismatch");
    MatrixF64 c(a.rows, b.rows, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* ar = a.data.data() + i * a.cols;
        double* cr = c.data.data() + i * c.cols;
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* br = b.data.data() + j * b.cols;
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) s += ar[k] * br[k];
            cr[j] = s;
        }
    }
    return c;
}

MatrixF64 transpose(const MatrixF64& a) {
    require_nonempty(a, "transpose");
    MatrixF64 t(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

void add_inplace(MatrixF64& a, const MatrixF64& b) {
    if (!a.same_shape(b)) throw ValidationError("add_inplace: shape mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

void scale_inplace(MatrixF64& a, double s) {
    for (double& x : a.data) x *= s;
}

void axpy_inplace(MatrixF64& a, double s, const MatrixF64& b) {
    if (!a.same_shape(b)) throw ValidationError("axpy_inplace: shape mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += s * b.data[i];
}

MatrixF64 cholesky_solve(MatrixF64 a, const MatrixF64& b) {
    require_nonempty(a, "cholesky_solve");
    require_nonempty(b, "cholesky_solve");
    if (a.rows != a.cols) throw ValidationError("cholesky_solve: A not square");
    if (b.rows != a.rows) throw ValidationError("cholesky_solve: B row mismatch");
    const std::size_t n = a.rows;

    // In-place lower Cholesky factor.
    for (std::size_t j = 0; j < n; ++j) {
        double d = a.at(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= a.at(j, k) * a.at(j, k);
        if (!(d > 0.0) || !std::isfinite(d))
            throw NumericalError("cholesky_solve: matrix not positive definite");
        const double ljj = std::sqrt(d);
        a.at(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a.at(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= a.at(i, k) * a.at(j, k);
            a.at(i, j) = s / ljj;
        }
    }

    // Forward then back substitution, all right-hand sides at once.
    MatrixF64 x = b;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < i; ++k) {
            const double l = a.at(i, k);
            for (std::size_t c = 0; c < x.cols; ++c) x.at(i, c) -= l * x.at(k, c);
        }
        const double inv = 1.0 / a.at(i, i);
        for (std::size_t c = 0; c < x.cols; ++c) x.at(i, c) *= inv;
    }
    for (std::size_t ii = n; ii-- > 0;) {
        for (std::size_t k = ii + 1; k < n; ++k) {
            const double l = a.at(k, ii);
            for (std::size_t c = 0; c < x.cols; ++c) x.at(ii, c) -= l * x.at(k, c);
        }
        const double inv = 1.0 / a.at(ii, ii);
        for (std::size_t c = 0; c < x.cols; ++c) x.at(ii, c) *= inv;
    }
    return x;
}

}  // namespace neurotune
