#include <gtest/gtest.h>

#include <cmath>

#include "bnblind/normlayers.hpp"

using namespace bnblind;

namespace {

Matrix random_batch(std::uint64_t seed, std::size_t dims, std::size_t n) {
	RngStream rng(seed, 0);
	Matrix x = gaussian_matrix(rng, dims, n, 0.0, 1.0);
	for (std::size_t d = 0; d < dims; ++d) {
		const double scale = 0.5 + rng.uniform() * 3.0;
		const double shift = rng.normal(0.0, 2.0);
		for (double& v : x.row(d)) v = scale * v + shift;
	}
	return x;
}

/// Central-difference Jacobian of row d of the standardized output with respect to row d of the input.
Matrix finite_difference_jacobian(const Matrix& x, std::size_t d) {
	const std::size_t n = x.cols();
	double inf_norm = 0.0;
	for (double v : x.row(d)) inf_norm = std::max(inf_norm, std::abs(v));
	const double h = 1e-6 * (1.0 + inf_norm);
	Matrix j(n, n);
	for (std::size_t b = 0; b < n; ++b) {
		Matrix up = x;
		Matrix down = x;
		up(d, b) += h;
		down(d, b) -= h;
		const Matrix yu = standardize_batch(up, 0.0).y;
		const Matrix yd = standardize_batch(down, 0.0).y;
		for (std::size_t a = 0; a < n; ++a) j(a, b) = (yu(d, a) - yd(d, a)) / (2.0 * h);
	}
	return j;
}

} // namespace

TEST(StandardizeBatch, AlreadyStandardizedRow) {
	const auto yb = standardize_batch(Matrix{{-1, 1}}, 0.0);
	EXPECT_DOUBLE_EQ(yb.y(0, 0), -1.0);
	EXPECT_DOUBLE_EQ(yb.y(0, 1), 1.0);
	EXPECT_EQ(yb.mode, NormMode::TrainBatchStats);
}

TEST(StandardizeBatch, BiasedVarianceHandExample) {
	const auto yb = standardize_batch(Matrix{{0, 2, 4}}, 0.0);
	const double sigma = std::sqrt(8.0 / 3.0);
	EXPECT_DOUBLE_EQ(yb.stats.mu[0], 2.0);
	EXPECT_DOUBLE_EQ(yb.stats.sigma[0], sigma);
	EXPECT_DOUBLE_EQ(yb.y(0, 0), -2.0 / sigma);
	EXPECT_DOUBLE_EQ(yb.y(0, 1), 0.0);
	EXPECT_DOUBLE_EQ(yb.y(0, 2), 2.0 / sigma);
}

TEST(StandardizeBatch, ConstantRowNamesDimension) {
	try {
		standardize_batch(Matrix{{1, 2, 3}, {5, 5, 5}}, 0.0);
		FAIL() << "expected DegenerateError";
	} catch (const DegenerateError& e) {
		EXPECT_EQ(e.index(), 1u);
	}
	EXPECT_NO_THROW(standardize_batch(Matrix{{5, 5, 5}}, 1e-5));
	EXPECT_THROW(standardize_batch(Matrix{{1}}, 0.0), DomainError);
	EXPECT_THROW(standardize_batch(Matrix{{1, 2}}, -1.0), DomainError);
}

TEST(StandardizeBatch, RowsHaveZeroMeanAndUnitSecondMoment) {
	for (std::uint64_t s = 0; s < 20; ++s) {
		const auto yb = standardize_batch(random_batch(s, 8, 16), 0.0);
		for (std::size_t d = 0; d < 8; ++d) {
			double sum = 0.0;
			double sq = 0.0;
			for (double v : yb.y.row(d)) {
				sum += v;
				sq += v * v;
			}
			EXPECT_LE(std::abs(sum / 16.0), 1e-12);
			EXPECT_LE(std::abs(sq / 16.0 - 1.0), 1e-12);
		}
	}
}

TEST(StandardizeBatch, EpsilonShrinksScale) {
	const auto yb = standardize_batch(Matrix{{-1, 1}}, 3.0);
	EXPECT_DOUBLE_EQ(yb.scale(0), 2.0);
	EXPECT_DOUBLE_EQ(yb.y(0, 1), 0.5);
}

TEST(Affine, IdentityAndHandExample) {
	const auto yb = standardize_batch(Matrix{{-1, 1}}, 0.0);
	EXPECT_EQ(affine(yb, BnParams::identity(1, 0.0)), yb.y);
	EXPECT_EQ(affine(yb, BnParams{{2.0}, {3.0}, 0.0}), (Matrix{{1, 5}}));
	EXPECT_THROW(affine(yb, BnParams{{1.0, 1.0}, {0.0}, 0.0}), ShapeError);
}

TEST(StandardizeLayer, Examples) {
	const auto same = standardize_layer(Matrix{{-1}, {1}}, 0.0);
	EXPECT_DOUBLE_EQ(same.y(0, 0), -1.0);
	EXPECT_DOUBLE_EQ(same.y(1, 0), 1.0);
	const auto shifted = standardize_layer(Matrix{{0}, {2}}, 0.0);
	EXPECT_DOUBLE_EQ(shifted.y(0, 0), -1.0);
	EXPECT_DOUBLE_EQ(shifted.y(1, 0), 1.0);
	EXPECT_EQ(shifted.mode, NormMode::LayerSampleStats);
}

TEST(StandardizeLayer, ConstantColumnNamesSample) {
	try {
		standardize_layer(Matrix{{1, 4}, {2, 4}}, 0.0);
		FAIL() << "expected DegenerateError";
	} catch (const DegenerateError& e) {
		EXPECT_EQ(e.index(), 1u);
	}
	EXPECT_THROW(standardize_layer(Matrix{{1, 2}}, 0.0), DomainError);
}

TEST(Population, UpdateExamples) {
	const BatchStats batch{{2.0}, {4.0}};
	const auto full = update_population(PopulationStats{{0.0}, {1.0}, 3}, batch, 1.0);
	EXPECT_EQ(full.mu_pop, batch.mu);
	EXPECT_EQ(full.sigma_pop, batch.sigma);
	const auto half = update_population(PopulationStats{{0.0}, {1.0}, 3}, batch, 0.5);
	EXPECT_DOUBLE_EQ(half.mu_pop[0], 1.0);
	EXPECT_DOUBLE_EQ(half.sigma_pop[0], 2.5);
	EXPECT_EQ(half.batches_seen, 4u);
	EXPECT_THROW(update_population(PopulationStats::initial(1), batch, 0.0), DomainError);
	EXPECT_THROW(update_population(PopulationStats::initial(1), batch, 1.5), DomainError);
	EXPECT_THROW(update_population(PopulationStats::initial(2), batch, 0.5), ShapeError);
}

TEST(Population, EmptyAdoptsFirstBatch) {
	const auto ps = update_population(PopulationStats{}, BatchStats{{1.0, 2.0}, {3.0, 4.0}}, 0.1);
	EXPECT_EQ(ps.mu_pop, (Vector{1.0, 2.0}));
	EXPECT_EQ(ps.sigma_pop, (Vector{3.0, 4.0}));
	EXPECT_EQ(ps.batches_seen, 1u);
}

TEST(Population, StandardizeUsesFixedStats) {
	const PopulationStats ps{{1.0}, {2.0}, 1};
	const auto yb = standardize_population(Matrix{{3, -1}}, ps);
	EXPECT_EQ(yb.mode, NormMode::EvalPopulationStats);
	EXPECT_DOUBLE_EQ(yb.y(0, 0), 1.0);
	EXPECT_DOUBLE_EQ(yb.y(0, 1), -1.0);
	EXPECT_THROW(standardize_population(Matrix{{1, 2}}, PopulationStats{{0.0}, {0.0}, 1}), DegenerateError);
}

TEST(JacobianTrain, AnnihilatesOnesAndOwnRow) {
	for (std::uint64_t s = 0; s < 20; ++s) {
		const auto yb = standardize_batch(random_batch(s, 8, 16), 0.0);
		for (std::size_t d = 0; d < 8; ++d) {
			const Matrix j = jacobian_std_train(yb, d);
			EXPECT_LE(norm2(matvec(j, Vector(16, 1.0))), 1e-12 * 16);
			EXPECT_LE(norm2(matvec(j, yb.y.row_vector(d))), 1e-12 * 16);
			EXPECT_LE(frobenius_norm(j - j.transposed()), 1e-12);
		}
	}
}

TEST(JacobianTrain, ScaledJacobianIsRankTwoDeficientProjector) {
	// sigma J = I - 1 1^T/n - y y^T/n with 1 and y orthogonal of norm sqrt(n): an orthogonal
	// projector whose trace n - 2 counts the non-zero eigenvalues.
	const auto yb = standardize_batch(random_batch(11, 4, 12), 0.0);
	for (std::size_t d = 0; d < 4; ++d) {
		Matrix p = jacobian_std_train(yb, d);
		p *= yb.stats.sigma[d];
		EXPECT_LE(max_abs_diff(matmul(p, p), p), 1e-12);
		double trace = 0.0;
		for (std::size_t i = 0; i < 12; ++i) trace += p(i, i);
		EXPECT_NEAR(trace, 10.0, 1e-9);
	}
}

TEST(JacobianTrain, MatchesFiniteDifferences) {
	for (std::uint64_t s = 0; s < 20; ++s) {
		const Matrix x = random_batch(100 + s, 3, 4);
		const auto yb = standardize_batch(x, 0.0);
		for (std::size_t d = 0; d < 3; ++d)
			EXPECT_LE(max_abs_diff(jacobian_std_train(yb, d), finite_difference_jacobian(x, d)), 1e-6);
	}
}

TEST(JacobianTrain, RejectsUnsupportedInputs) {
	const Matrix x = random_batch(1, 2, 5);
	EXPECT_THROW(jacobian_std_train(standardize_batch(x, 1e-5), 0), UnsupportedModeError);
	EXPECT_THROW(jacobian_std_train(standardize_layer(x, 0.0), 0), UnsupportedModeError);
	EXPECT_THROW(jacobian_std_train(standardize_batch(x, 0.0), 2), DomainError);
}

TEST(JacobianEval, ScaledIdentity) {
	const PopulationStats ps{{0.0, 0.0}, {1.0, 2.0}, 1};
	EXPECT_EQ(jacobian_std_eval(ps, 0, 3), Matrix::identity(3));
	Matrix half = Matrix::identity(3);
	half *= 0.5;
	EXPECT_EQ(jacobian_std_eval(ps, 1, 3), half);
	EXPECT_DOUBLE_EQ(norm2(matvec(jacobian_std_eval(ps, 1, 9), Vector(9, 1.0))), 3.0 / 2.0);
	EXPECT_THROW(jacobian_std_eval(PopulationStats{{0.0}, {0.0}, 1}, 0, 3), DegenerateError);
	EXPECT_THROW(jacobian_std_eval(ps, 2, 3), DomainError);
}

TEST(Backward, TrainMatchesJacobianProduct) {
	const auto yb = standardize_batch(random_batch(5, 4, 10), 0.0);
	RngStream rng(6, 0);
	const Matrix dy = gaussian_matrix(rng, 4, 10, 0.0, 1.0);
	const Matrix dx = standardize_backward(yb, dy);
	for (std::size_t d = 0; d < 4; ++d) {
		const Vector expect = matvec(jacobian_std_train(yb, d), dy.row(d));
		EXPECT_LE(max_abs_diff(dx.row(d), expect), 1e-12);
	}
	EXPECT_THROW(standardize_backward(yb, Matrix(3, 10)), ShapeError);
}

TEST(Backward, ExactForPositiveEpsilonAndLayerMode) {
	// Vector-Jacobian product against central differences of <dy, f(x)>.
	const Matrix x = random_batch(8, 5, 6);
	RngStream rng(9, 0);
	const Matrix dy = gaussian_matrix(rng, 5, 6, 0.0, 1.0);
	struct Case {
		const char* name;
		std::function<StandardizedBatch(const Matrix&)> f;
	};
	const Case cases[] = {
	    {"batch eps", [](const Matrix& m) { return standardize_batch(m, 0.3); }},
	    {"layer", [](const Matrix& m) { return standardize_layer(m, 0.0); }},
	    {"layer eps", [](const Matrix& m) { return standardize_layer(m, 0.2); }},
	    {"population", [](const Matrix& m) { return standardize_population(m, PopulationStats{Vector(5, 0.5), Vector(5, 1.5), 1}); }},
	};
	for (const auto& c : cases) {
		const Matrix dx = standardize_backward(c.f(x), dy);
		for (std::size_t d = 0; d < 5; ++d) {
			for (std::size_t i = 0; i < 6; ++i) {
				const double h = 1e-6 * (1.0 + std::abs(x(d, i)));
				Matrix up = x;
				Matrix down = x;
				up(d, i) += h;
				down(d, i) -= h;
				const Matrix yu = c.f(up).y;
				const Matrix yd = c.f(down).y;
				double fd = 0.0;
				for (std::size_t k = 0; k < dy.size(); ++k) fd += dy.data()[k] * (yu.data()[k] - yd.data()[k]);
				EXPECT_NEAR(dx(d, i), fd / (2.0 * h), 1e-6) << c.name;
			}
		}
	}
}
