#include "bnblind/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace bnblind {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
	if (a.rows() != b.rows() || a.cols() != b.cols()) {
		throw ShapeError(std::string(what) + ": shape " + std::to_string(a.rows()) + "x" +
		                 std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
		                 std::to_string(b.cols()));
	}
}

} // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
	if (data_.size() != rows * cols) {
		throw ShapeError("Matrix: " + std::to_string(data_.size()) + " values for " +
		                 std::to_string(rows) + "x" + std::to_string(cols));
	}
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
	rows_ = rows.size();
	cols_ = rows_ == 0 ? 0 : rows.begin()->size();
	data_.reserve(rows_ * cols_);
	for (const auto& r : rows) {
		if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
		data_.insert(data_.end(), r.begin(), r.end());
	}
}

Matrix Matrix::identity(std::size_t n) {
	Matrix m(n, n);
	for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
	return m;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
	Matrix m(diag.size(), diag.size());
	for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
	return m;
}

Matrix Matrix::from_column(std::span<const double> v) {
	return Matrix(v.size(), 1, std::vector<double>(v.begin(), v.end()));
}

Vector Matrix::row_vector(std::size_t r) const {
	auto s = row(r);
	return Vector(s.begin(), s.end());
}

Vector Matrix::column(std::size_t c) const {
	Vector v(rows_);
	for (std::size_t r = 0; r < rows_; ++r) v[r] = (*this)(r, c);
	return v;
}

void Matrix::set_column(std::size_t c, std::span<const double> v) {
	if (v.size() != rows_) throw ShapeError("set_column: length mismatch");
	for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = v[r];
}

Matrix Matrix::transposed() const {
	Matrix t(cols_, rows_);
	for (std::size_t r = 0; r < rows_; ++r)
		for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
	return t;
}

Matrix& Matrix::operator+=(const Matrix& other) {
	require_same_shape(*this, other, "operator+=");
	for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
	return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
	require_same_shape(*this, other, "operator-=");
	for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
	return *this;
}

Matrix& Matrix::operator*=(double s) noexcept {
	for (double& v : data_) v *= s;
	return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(double s, Matrix a) { return a *= s; }

Matrix matmul(const Matrix& a, const Matrix& b) {
	if (a.cols() != b.rows()) {
		throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
		                 " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
	}
	Matrix c(a.rows(), b.cols());
	const std::size_t inner = a.cols();
	const std::size_t width = b.cols();
	// i-k-j order: every c(i,j) still accumulates over k in ascending order.
	for (std::size_t i = 0; i < a.rows(); ++i) {
		double* crow = c.row(i).data();
		for (std::size_t k = 0; k < inner; ++k) {
			const double aik = a(i, k);
			const double* brow = b.row(k).data();
			for (std::size_t j = 0; j < width; ++j) crow[j] += aik * brow[j];
		}
	}
	return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
	if (a.rows() != b.rows()) throw ShapeError("matmul_tn: row counts differ");
	Matrix c(a.cols(), b.cols());
	const std::size_t width = b.cols();
	for (std::size_t i = 0; i < a.cols(); ++i) {
		double* crow = c.row(i).data();
		for (std::size_t k = 0; k < a.rows(); ++k) {
			const double aki = a(k, i);
			const double* brow = b.row(k).data();
			for (std::size_t j = 0; j < width; ++j) crow[j] += aki * brow[j];
		}
	}
	return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
	if (a.cols() != b.cols()) throw ShapeError("matmul_nt: column counts differ");
	Matrix c(a.rows(), b.rows());
	for (std::size_t i = 0; i < a.rows(); ++i)
		for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot(a.row(i), b.row(j));
	return c;
}

Vector matvec(const Matrix& a, std::span<const double> v) {
	if (a.cols() != v.size()) throw ShapeError("matvec: length mismatch");
	Vector out(a.rows());
	for (std::size_t i = 0; i < a.rows(); ++i) out[i] = dot(a.row(i), v);
	return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
	if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
	double s = 0.0;
	for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
	return s;
}

double norm2(std::span<const double> v) {
	double big = 0.0;
	for (double x : v) big = std::max(big, std::abs(x));
	if (big == 0.0 || !std::isfinite(big)) {
		double s = 0.0;
		for (double x : v) s += x * x;
		return std::sqrt(s);
	}
	// Rescale so tiny or huge entries neither underflow nor overflow.
	double s = 0.0;
	for (double x : v) s += (x / big) * (x / big);
	return big * std::sqrt(s);
}

double frobenius_norm(const Matrix& m) { return norm2(m.data()); }

double max_abs_diff(const Matrix& a, const Matrix& b) {
	require_same_shape(a, b, "max_abs_diff");
	return max_abs_diff(a.data(), b.data());
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
	if (a.size() != b.size()) throw ShapeError("max_abs_diff: length mismatch");
	double m = 0.0;
	for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
	return m;
}

bool all_finite(std::span<const double> v) noexcept {
	return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

Vector operator+(Vector a, std::span<const double> b) {
	if (a.size() != b.size()) throw ShapeError("vector +: length mismatch");
	for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
	return a;
}

Vector operator-(Vector a, std::span<const double> b) {
	if (a.size() != b.size()) throw ShapeError("vector -: length mismatch");
	for (std::size_t i = 0; i < a.size(); ++i) a[i] -= b[i];
	return a;
}

Vector scaled(std::span<const double> v, double s) {
	Vector out(v.begin(), v.end());
	for (double& x : out) x *= s;
	return out;
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id) {
	std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
	                  static_cast<std::uint32_t>(stream_id),
	                  static_cast<std::uint32_t>(stream_id >> 32)};
	engine_.seed(seq);
}

std::uint64_t RngStream::next_u64() { return engine_(); }

double RngStream::uniform() {
	return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
	if (has_spare_) {
		has_spare_ = false;
		return spare_;
	}
	double u1 = 0.0;
	do {
		u1 = uniform();
	} while (u1 == 0.0);
	const double u2 = uniform();
	const double radius = std::sqrt(-2.0 * std::log(u1));
	const double angle = 2.0 * std::numbers::pi * u2;
	spare_ = radius * std::sin(angle);
	has_spare_ = true;
	return radius * std::cos(angle);
}

double RngStream::normal(double mean, double std) { return mean + std * normal(); }

std::uint64_t RngStream::below(std::uint64_t bound) {
	if (bound == 0) throw DomainError("RngStream::below: zero bound");
	// Rejection keeps the draw unbiased.
	const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
	                            std::numeric_limits<std::uint64_t>::max() % bound;
	std::uint64_t x = 0;
	do {
		x = engine_();
	} while (x >= limit);
	return x % bound;
}

RngStream RngStream::derive(std::uint64_t child) const {
	// splitmix64 finalizer on the (stream, child) pair.
	std::uint64_t z = stream_id_ * 0x9E3779B97F4A7C15ULL + child + 0x632BE59BD9B4E019ULL;
	z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
	z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
	z ^= z >> 31;
	return RngStream(seed_, z);
}

Matrix gaussian_matrix(RngStream& rng, std::size_t rows, std::size_t cols, double mean, double std) {
	if (!(std >= 0.0)) throw DomainError("gaussian_matrix: negative standard deviation");
	Matrix m(rows, cols);
	for (double& v : m.data()) v = rng.normal(mean, std);
	return m;
}

Vector gaussian_vector(RngStream& rng, std::size_t len, double mean, double std) {
	if (!(std >= 0.0)) throw DomainError("gaussian_vector: negative standard deviation");
	Vector v(len);
	for (double& x : v) x = rng.normal(mean, std);
	return v;
}

Tolerance::Tolerance(double abs_tol, double rel_tol) : abs(abs_tol), rel(rel_tol) {
	if (!(abs_tol >= 0.0) || !(rel_tol >= 0.0)) throw DomainError("Tolerance: negative bound");
}

Tolerance Tolerance::scaled_for(std::size_t dims, std::size_t batch) const {
	const double s = std::sqrt(static_cast<double>(dims * batch));
	return Tolerance(abs * s, rel * s);
}

bool close(double a, double b, const Tolerance& tol) noexcept {
	return std::abs(a - b) <= tol.abs + tol.rel * std::max(std::abs(a), std::abs(b));
}

MeanStd mean_std(std::span<const double> values) {
	MeanStd out;
	if (values.empty()) return out;
	double s = 0.0;
	for (double v : values) s += v;
	out.mean = s / static_cast<double>(values.size());
	double q = 0.0;
	for (double v : values) q += (v - out.mean) * (v - out.mean);
	out.std = std::sqrt(q / static_cast<double>(values.size()));
	return out;
}

} // namespace bnblind
