#include "bnblind/normlayers.hpp"

#include <cmath>

namespace bnblind {

namespace {

void require_epsilon(double epsilon) {
	if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw DomainError("epsilon must be finite and >= 0");
}

struct SliceStats {
	double mean;
	double var;
};

template <typename Get>
SliceStats slice_stats(std::size_t count, Get get) {
	double s = 0.0;
	for (std::size_t i = 0; i < count; ++i) s += get(i);
	const double mean = s / static_cast<double>(count);
	double q = 0.0;
	for (std::size_t i = 0; i < count; ++i) {
		const double c = get(i) - mean;
		q += c * c;
	}
	return {mean, q / static_cast<double>(count)};
}

} // namespace

BnParams BnParams::identity(std::size_t dims, double epsilon) {
	return BnParams{Vector(dims, 1.0), Vector(dims, 0.0), epsilon};
}

double StandardizedBatch::scale(std::size_t i) const {
	const double s = stats.sigma.at(i);
	return epsilon == 0.0 ? s : std::sqrt(s * s + epsilon);
}

PopulationStats PopulationStats::initial(std::size_t dims) {
	return PopulationStats{Vector(dims, 0.0), Vector(dims, 1.0), 0};
}

StandardizedBatch standardize_batch(const Matrix& x, double epsilon) {
	require_epsilon(epsilon);
	const std::size_t dims = x.rows();
	const std::size_t n = x.cols();
	if (n < 2) throw DomainError("standardize_batch: need at least two samples");

	StandardizedBatch out{Matrix(dims, n), {Vector(dims), Vector(dims)}, NormMode::TrainBatchStats, epsilon};
	for (std::size_t d = 0; d < dims; ++d) {
		const auto row = x.row(d);
		const auto st = slice_stats(n, [&](std::size_t i) { return row[i]; });
		if (epsilon == 0.0 && st.var == 0.0) throw DegenerateError("standardize_batch: constant dimension", d);
		out.stats.mu[d] = st.mean;
		out.stats.sigma[d] = std::sqrt(st.var);
		const double s = out.scale(d);
		auto yrow = out.y.row(d);
		for (std::size_t i = 0; i < n; ++i) yrow[i] = (row[i] - st.mean) / s;
	}
	return out;
}

StandardizedBatch standardize_population(const Matrix& x, const PopulationStats& ps, double epsilon) {
	require_epsilon(epsilon);
	if (ps.mu_pop.size() != x.rows() || ps.sigma_pop.size() != x.rows())
		throw ShapeError("standardize_population: population statistics length differs from feature count");
	StandardizedBatch out{Matrix(x.rows(), x.cols()), {ps.mu_pop, ps.sigma_pop}, NormMode::EvalPopulationStats,
	                      epsilon};
	for (std::size_t d = 0; d < x.rows(); ++d) {
		const double s = out.scale(d);
		if (!(s > 0.0)) throw DegenerateError("standardize_population: zero population deviation in dimension", d);
		for (std::size_t i = 0; i < x.cols(); ++i) out.y(d, i) = (x(d, i) - ps.mu_pop[d]) / s;
	}
	return out;
}

StandardizedBatch standardize_layer(const Matrix& x, double epsilon) {
	require_epsilon(epsilon);
	const std::size_t dims = x.rows();
	const std::size_t n = x.cols();
	if (dims < 2) throw DomainError("standardize_layer: need at least two feature dimensions");

	StandardizedBatch out{Matrix(dims, n), {Vector(n), Vector(n)}, NormMode::LayerSampleStats, epsilon};
	for (std::size_t i = 0; i < n; ++i) {
		const auto st = slice_stats(dims, [&](std::size_t d) { return x(d, i); });
		if (epsilon == 0.0 && st.var == 0.0) throw DegenerateError("standardize_layer: constant sample", i);
		out.stats.mu[i] = st.mean;
		out.stats.sigma[i] = std::sqrt(st.var);
		const double s = out.scale(i);
		for (std::size_t d = 0; d < dims; ++d) out.y(d, i) = (x(d, i) - st.mean) / s;
	}
	return out;
}

Matrix affine(const StandardizedBatch& yb, const BnParams& p) {
	const std::size_t dims = yb.dims();
	if (p.gamma.size() != dims || p.beta.size() != dims)
		throw ShapeError("affine: gamma/beta length " + std::to_string(p.gamma.size()) + "/" +
		                 std::to_string(p.beta.size()) + " for " + std::to_string(dims) + " dimensions");
	Matrix z(dims, yb.batch());
	for (std::size_t d = 0; d < dims; ++d)
		for (std::size_t i = 0; i < yb.batch(); ++i) z(d, i) = p.gamma[d] * yb.y(d, i) + p.beta[d];
	return z;
}

PopulationStats update_population(const PopulationStats& ps, const BatchStats& stats, double momentum) {
	if (!(momentum > 0.0 && momentum <= 1.0)) throw DomainError("update_population: momentum must lie in (0, 1]");
	if (stats.mu.size() != stats.sigma.size()) throw ShapeError("update_population: ragged batch statistics");
	if (ps.mu_pop.empty()) return PopulationStats{stats.mu, stats.sigma, 1};
	if (ps.mu_pop.size() != stats.mu.size() || ps.sigma_pop.size() != stats.sigma.size())
		throw ShapeError("update_population: dimension mismatch");

	PopulationStats next = ps;
	for (std::size_t d = 0; d < stats.mu.size(); ++d) {
		next.mu_pop[d] = (1.0 - momentum) * ps.mu_pop[d] + momentum * stats.mu[d];
		next.sigma_pop[d] = (1.0 - momentum) * ps.sigma_pop[d] + momentum * stats.sigma[d];
	}
	++next.batches_seen;
	return next;
}

Matrix jacobian_std_train(const StandardizedBatch& yb, std::size_t d) {
	if (yb.mode != NormMode::TrainBatchStats)
		throw UnsupportedModeError("jacobian_std_train: batch was not standardized with batch statistics");
	if (yb.epsilon != 0.0) throw UnsupportedModeError("jacobian_std_train: closed form requires epsilon == 0");
	if (d >= yb.dims()) throw DomainError("jacobian_std_train: dimension out of range");

	const std::size_t n = yb.batch();
	const double inv_n = 1.0 / static_cast<double>(n);
	const double inv_sigma = 1.0 / yb.stats.sigma[d];
	const auto y = yb.y.row(d);
	Matrix j(n, n);
	for (std::size_t a = 0; a < n; ++a) {
		for (std::size_t b = 0; b < n; ++b) {
			const double ident = a == b ? 1.0 : 0.0;
			j(a, b) = inv_sigma * (ident - inv_n - inv_n * y[a] * y[b]);
		}
	}
	return j;
}

Matrix jacobian_std_eval(const PopulationStats& ps, std::size_t d, std::size_t batch) {
	if (d >= ps.sigma_pop.size()) throw DomainError("jacobian_std_eval: dimension out of range");
	const double s = ps.sigma_pop[d];
	if (!(s > 0.0)) throw DegenerateError("jacobian_std_eval: zero population deviation in dimension", d);
	Matrix j = Matrix::identity(batch);
	j *= 1.0 / s;
	return j;
}

Matrix standardize_backward(const StandardizedBatch& yb, const Matrix& dy) {
	if (dy.rows() != yb.dims() || dy.cols() != yb.batch()) throw ShapeError("standardize_backward: gradient shape");
	const std::size_t dims = yb.dims();
	const std::size_t n = yb.batch();
	Matrix dx(dims, n);

	switch (yb.mode) {
	case NormMode::EvalPopulationStats:
		for (std::size_t d = 0; d < dims; ++d) {
			const double s = yb.scale(d);
			for (std::size_t i = 0; i < n; ++i) dx(d, i) = dy(d, i) / s;
		}
		break;
	case NormMode::TrainBatchStats:
		for (std::size_t d = 0; d < dims; ++d) {
			const auto g = dy.row(d);
			const auto y = yb.y.row(d);
			double mean_g = 0.0;
			double mean_gy = 0.0;
			for (std::size_t i = 0; i < n; ++i) {
				mean_g += g[i];
				mean_gy += g[i] * y[i];
			}
			mean_g /= static_cast<double>(n);
			mean_gy /= static_cast<double>(n);
			const double s = yb.scale(d);
			for (std::size_t i = 0; i < n; ++i) dx(d, i) = (g[i] - mean_g - y[i] * mean_gy) / s;
		}
		break;
	case NormMode::LayerSampleStats:
		for (std::size_t i = 0; i < n; ++i) {
			double mean_g = 0.0;
			double mean_gy = 0.0;
			for (std::size_t d = 0; d < dims; ++d) {
				mean_g += dy(d, i);
				mean_gy += dy(d, i) * yb.y(d, i);
			}
			mean_g /= static_cast<double>(dims);
			mean_gy /= static_cast<double>(dims);
			const double s = yb.scale(i);
			for (std::size_t d = 0; d < dims; ++d) dx(d, i) = (dy(d, i) - mean_g - yb.y(d, i) * mean_gy) / s;
		}
		break;
	}
	return dx;
}

} // namespace bnblind
