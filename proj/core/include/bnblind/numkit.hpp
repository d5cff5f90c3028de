#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bnblind {

/// Raised when operand shapes do not compose.
class ShapeError : public std::invalid_argument {
public:
	using std::invalid_argument::invalid_argument;
};

/// Raised when an argument lies outside the domain of an operation.
class DomainError : public std::domain_error {
public:
	using std::domain_error::domain_error;
};

using Vector = std::vector<double>;

/**
 * Dense row-major matrix of doubles.
 *
 * Rows index feature dimensions and columns index samples wherever a
 * matrix holds a mini-batch.
 */
class Matrix {
public:
	Matrix() = default;
	Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
	Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
	Matrix(std::initializer_list<std::initializer_list<double>> rows);

	static Matrix identity(std::size_t n);
	static Matrix diagonal(std::span<const double> diag);
	static Matrix from_column(std::span<const double> v);

	std::size_t rows() const noexcept { return rows_; }
	std::size_t cols() const noexcept { return cols_; }
	std::size_t size() const noexcept { return data_.size(); }

	double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
	double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

	std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
	std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }
	Vector row_vector(std::size_t r) const;
	Vector column(std::size_t c) const;
	void set_column(std::size_t c, std::span<const double> v);

	std::span<double> data() noexcept { return data_; }
	std::span<const double> data() const noexcept { return data_; }

	Matrix transposed() const;

	Matrix& operator+=(const Matrix& other);
	Matrix& operator-=(const Matrix& other);
	Matrix& operator*=(double s) noexcept;

	bool operator==(const Matrix& other) const = default;

private:
	std::size_t rows_ = 0;
	std::size_t cols_ = 0;
	std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(double s, Matrix a);

/// Matrix product; each entry accumulates over the inner index in ascending order.
Matrix matmul(const Matrix& a, const Matrix& b);
/// a^T * b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a * b^T without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, std::span<const double> v);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);
double frobenius_norm(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);
double max_abs_diff(std::span<const double> a, std::span<const double> b);
bool all_finite(std::span<const double> v) noexcept;

Vector operator+(Vector a, std::span<const double> b);
Vector operator-(Vector a, std::span<const double> b);
Vector scaled(std::span<const double> v, double s);

/**
 * Seeded, reproducible random stream.
 *
 * The engine is std::mt19937_64 (whose output sequence is fixed by the
 * standard) seeded from (seed, stream_id) through std::seed_seq. Normal
 * variates come from a hand-rolled Box-Muller transform because the
 * standard distributions are implementation-defined.
 */
class RngStream {
public:
	RngStream(std::uint64_t seed, std::uint64_t stream_id);

	std::uint64_t seed() const noexcept { return seed_; }
	std::uint64_t stream_id() const noexcept { return stream_id_; }

	std::uint64_t next_u64();
	/// Uniform on [0, 1) with 53 random bits.
	double uniform();
	double normal();
	double normal(double mean, double std);
	/// Uniform integer in [0, bound).
	std::uint64_t below(std::uint64_t bound);

	/// Child stream with an id derived from this stream's (seed, id) pair.
	RngStream derive(std::uint64_t child) const;

private:
	std::uint64_t seed_;
	std::uint64_t stream_id_;
	std::mt19937_64 engine_;
	bool has_spare_ = false;
	double spare_ = 0.0;
};

Matrix gaussian_matrix(RngStream& rng, std::size_t rows, std::size_t cols, double mean, double std);
Vector gaussian_vector(RngStream& rng, std::size_t len, double mean, double std);

struct Tolerance {
	double abs = 1e-9;
	double rel = 1e-9;

	Tolerance() = default;
	Tolerance(double abs_tol, double rel_tol);

	/// Tolerance for norm comparisons over a D x n batch.
	Tolerance scaled_for(std::size_t dims, std::size_t batch) const;
};

/// |a - b| <= abs + rel * max(|a|, |b|); NaN never compares close.
bool close(double a, double b, const Tolerance& tol) noexcept;

/// Mean and population standard deviation of a sample, in a fixed summation order.
struct MeanStd {
	double mean = 0.0;
	double std = 0.0;
};
MeanStd mean_std(std::span<const double> values);

} // namespace bnblind
