#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "bnblind/numkit.hpp"

using namespace bnblind;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
	const Matrix a{{1, 2, 3}, {4, 5, 6}, {7, 8, 9}};
	EXPECT_EQ(matmul(Matrix::identity(3), a), a);
}

TEST(Matmul, HandExpandedProduct) {
	const Matrix a{{1, 2}, {3, 4}};
	const Matrix b{{0}, {1}};
	EXPECT_EQ(matmul(a, b), (Matrix{{2}, {4}}));
}

TEST(Matmul, MismatchedShapesThrow) {
	EXPECT_THROW(matmul(Matrix(2, 3), Matrix(4, 2)), ShapeError);
	EXPECT_THROW(matmul_tn(Matrix(2, 3), Matrix(4, 2)), ShapeError);
	EXPECT_THROW(matmul_nt(Matrix(2, 3), Matrix(2, 4)), ShapeError);
	EXPECT_THROW(matvec(Matrix(2, 3), Vector(2)), ShapeError);
}

TEST(Matmul, TransposedVariantsAgreeWithExplicitTranspose) {
	RngStream rng(3, 0);
	const Matrix a = gaussian_matrix(rng, 4, 5, 0.0, 1.0);
	const Matrix b = gaussian_matrix(rng, 4, 3, 0.0, 1.0);
	const Matrix c = gaussian_matrix(rng, 6, 5, 0.0, 1.0);
	EXPECT_EQ(matmul_tn(a, b), matmul(a.transposed(), b));
	EXPECT_LE(max_abs_diff(matmul_nt(a, c), matmul(a, c.transposed())), 1e-14);
}

TEST(Matmul, AssociativeWithinTolerance) {
	for (std::uint64_t s = 0; s < 20; ++s) {
		RngStream rng(s, 1);
		const Matrix a = gaussian_matrix(rng, 5, 5, 0.0, 1.0);
		const Matrix b = gaussian_matrix(rng, 5, 5, 0.0, 1.0);
		const Matrix c = gaussian_matrix(rng, 5, 5, 0.0, 1.0);
		const double bound = 1e-10 * frobenius_norm(a) * frobenius_norm(b) * frobenius_norm(c);
		EXPECT_LE(frobenius_norm(matmul(matmul(a, b), c) - matmul(a, matmul(b, c))), bound);
	}
}

TEST(MatrixType, ConstructionChecksShape) {
	EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
	EXPECT_THROW((Matrix{{1, 2}, {3}}), ShapeError);
	const Matrix m(2, 3, 1.5);
	EXPECT_EQ(m.size(), 6u);
	EXPECT_EQ(m.rows() * m.cols(), m.data().size());
}

TEST(MatrixType, FrobeniusNormZeroOnlyForZeroMatrix) {
	EXPECT_EQ(frobenius_norm(Matrix(3, 4)), 0.0);
	Matrix m(3, 4);
	m(2, 1) = -1e-300;
	EXPECT_GT(frobenius_norm(m), 0.0);
	EXPECT_DOUBLE_EQ(frobenius_norm(Matrix{{3, 4}}), 5.0);
}

TEST(Gaussian, ZeroStdGivesConstantMean) {
	RngStream rng(1, 0);
	const Matrix m = gaussian_matrix(rng, 3, 4, 2.5, 0.0);
	for (double v : m.data()) EXPECT_EQ(v, 2.5);
}

TEST(Gaussian, NegativeStdThrows) {
	RngStream rng(1, 0);
	EXPECT_THROW(gaussian_matrix(rng, 2, 2, 0.0, -1.0), DomainError);
	EXPECT_THROW(gaussian_vector(rng, 2, 0.0, -0.1), DomainError);
}

TEST(Gaussian, SameSeedIsBitwiseIdentical) {
	RngStream a(77, 5);
	RngStream b(77, 5);
	EXPECT_EQ(gaussian_matrix(a, 6, 7, 0.0, 1.0), gaussian_matrix(b, 6, 7, 0.0, 1.0));
}

TEST(Gaussian, SampleMeanConverges) {
	RngStream rng(1, 0);
	const double mean = 3.0;
	const double std = 2.0;
	const Matrix m = gaussian_matrix(rng, 1000, 1, mean, std);
	const MeanStd ms = mean_std(m.data());
	EXPECT_LE(std::abs(ms.mean - mean), 5.0 * std / std::sqrt(1000.0));
	EXPECT_NEAR(ms.std, std, 0.2);
}

TEST(Rng, DistinctStreamsDiffer) {
	RngStream a(9, 0);
	RngStream b(9, 1);
	int same = 0;
	for (int i = 0; i < 16; ++i) same += a.next_u64() == b.next_u64();
	EXPECT_EQ(same, 0);
}

TEST(Rng, DeriveIsDeterministicAndSeparates) {
	const RngStream root(4, 2);
	RngStream c1 = root.derive(3);
	RngStream c2 = root.derive(3);
	RngStream c3 = root.derive(4);
	EXPECT_EQ(c1.stream_id(), c2.stream_id());
	EXPECT_NE(c1.stream_id(), c3.stream_id());
	EXPECT_EQ(c1.seed(), 4u);
	EXPECT_EQ(c1.next_u64(), c2.next_u64());
}

TEST(Rng, UniformAndBelowStayInRange) {
	RngStream rng(5, 5);
	for (int i = 0; i < 1000; ++i) {
		const double u = rng.uniform();
		EXPECT_GE(u, 0.0);
		EXPECT_LT(u, 1.0);
		EXPECT_LT(rng.below(7), 7u);
	}
	EXPECT_THROW(rng.below(0), DomainError);
}

TEST(Close, Examples) {
	EXPECT_TRUE(close(1.0, 1.0, Tolerance(0.0, 0.0)));
	EXPECT_TRUE(close(1.0, 1.0 + 1e-12, Tolerance(1e-9, 0.0)));
	EXPECT_FALSE(close(0.0, 1e-3, Tolerance(1e-9, 1e-9)));
	EXPECT_TRUE(close(1e6, 1e6 + 1e-4, Tolerance(0.0, 1e-9)));
}

TEST(Close, NanNeverClose) {
	const double nan = std::numeric_limits<double>::quiet_NaN();
	EXPECT_FALSE(close(nan, nan, Tolerance(1.0, 1.0)));
	EXPECT_FALSE(close(nan, 0.0, Tolerance(1.0, 1.0)));
}

TEST(ToleranceType, RejectsNegativeAndScales) {
	EXPECT_THROW(Tolerance(-1e-9, 0.0), DomainError);
	EXPECT_THROW(Tolerance(0.0, -1e-9), DomainError);
	const Tolerance t = Tolerance().scaled_for(8, 32);
	EXPECT_DOUBLE_EQ(t.abs, 1e-9 * 16.0);
	EXPECT_DOUBLE_EQ(t.rel, 1e-9 * 16.0);
}

TEST(VectorOps, DotNormAndArithmetic) {
	const Vector a{1, 2, 2};
	const Vector b{2, 0, 1};
	EXPECT_EQ(dot(a, b), 4.0);
	EXPECT_EQ(norm2(a), 3.0);
	EXPECT_EQ(a + b, (Vector{3, 2, 3}));
	EXPECT_EQ(a - b, (Vector{-1, 2, 1}));
	EXPECT_EQ(scaled(a, 2.0), (Vector{2, 4, 4}));
	EXPECT_THROW(dot(a, Vector{1.0}), ShapeError);
	EXPECT_FALSE(all_finite(Vector{1.0, std::numeric_limits<double>::infinity()}));
}

TEST(MeanStdFn, PopulationDeviation) {
	const Vector v{0, 2, 4};
	const MeanStd ms = mean_std(v);
	EXPECT_DOUBLE_EQ(ms.mean, 2.0);
	EXPECT_DOUBLE_EQ(ms.std, std::sqrt(8.0 / 3.0));
}
