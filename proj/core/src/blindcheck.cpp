#include "bnblind/blindcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>

namespace bnblind {

namespace {

constexpr Term kTerms[] = {Term::Grad, Term::Diag, Term::OffLinear, Term::OffNon};

void require_model(const TaylorModel& model, std::size_t dims, const char* where) {
	auto square = [&](const Matrix& m) { return m.rows() == dims && m.cols() == dims; };
	if (model.dims() != dims) throw ShapeError(std::string(where) + ": batch dimension differs from model");
	if (model.y_tilde.size() != dims || !square(model.h) || !square(model.h_diag) || !square(model.h_off))
		throw ShapeError(std::string(where) + ": inconsistent Taylor model (build it with from_parts)");
}

/// y-side gradients of the four terms for row d of a standardized batch.
void fill_y_grads(TermGrads& tg, const TaylorModel& model, const Matrix& y, std::size_t d) {
	require_model(model, y.rows(), "term_grads");
	if (d >= y.rows()) throw DomainError("term_grads: dimension out of range");
	const std::size_t n = y.cols();
	const double yt = model.y_tilde[d];

	tg.grad_y.assign(n, model.g[d]);
	tg.diag_y.resize(n);
	for (std::size_t i = 0; i < n; ++i) tg.diag_y[i] = model.h(d, d) * (y(d, i) - yt);

	const LinearSplit split = project_linear(y, d);
	const Vector hrow = model.off_row(d);
	tg.linear_y.assign(n, 0.0);
	tg.non_y.assign(n, 0.0);
	for (std::size_t j = 0; j < y.rows(); ++j) {
		if (hrow[j] == 0.0) continue;
		for (std::size_t i = 0; i < n; ++i) {
			tg.linear_y[i] += hrow[j] * split.y_linear(j, i);
			tg.non_y[i] += hrow[j] * (split.y_non(j, i) - model.y_tilde[j]);
		}
	}
	tg.linear_y_norm = norm2(tg.linear_y);
	tg.non_y_norm = norm2(tg.non_y);
	tg.total_y_norm = norm2(tg.linear_y + tg.non_y);
}

Vector& x_slot(TermGrads& tg, Term t) {
	switch (t) {
	case Term::Grad: return tg.grad_x;
	case Term::Diag: return tg.diag_x;
	case Term::OffLinear: return tg.linear_x;
	case Term::OffNon: return tg.non_x;
	}
	throw std::logic_error("unknown term");
}

/// x = J v, cross-checked against an independent reverse pass.
/// The residual is measured in units of the Jacobian scale 1/sigma once that exceeds 1.
void propagate(TermGrads& tg, const Matrix& jacobian, double inv_sigma,
               const std::function<Vector(const Vector&)>& backward) {
	const double unit = std::max(1.0, inv_sigma);
	tg.chain_rule_residual = 0.0;
	for (Term t : kTerms) {
		const Vector& v = tg.y_grad(t);
		Vector x = matvec(jacobian, v);
		const Vector alt = backward(v);
		const double residual = norm2(x - alt) / ((1.0 + norm2(v)) * unit);
		tg.chain_rule_residual = std::max(tg.chain_rule_residual, residual);
		x_slot(tg, t) = std::move(x);
	}
	if (!(tg.chain_rule_residual <= 1e-10))
		throw std::logic_error("term_grads: Jacobian product disagrees with reverse pass (residual " +
		                       std::to_string(tg.chain_rule_residual * 1e10) + "e-10)");
}

/// Central differences of f over the n entries of `row`.
Vector central_difference(const std::function<double(const Vector&)>& f, const Vector& row) {
	Vector grad(row.size());
	Vector probe = row;
	for (std::size_t i = 0; i < row.size(); ++i) {
		const double h = 1e-6 * (1.0 + std::abs(row[i]));
		probe[i] = row[i] + h;
		const double up = f(probe);
		probe[i] = row[i] - h;
		const double down = f(probe);
		probe[i] = row[i];
		grad[i] = (up - down) / (2.0 * h);
	}
	return grad;
}

struct RowTerms {
	double g_d;
	double h_dd;
	double y_tilde_d;
	Vector linear_coef; ///< H^off_{d,:} Y^linear, frozen
	Vector non_coef;    ///< H^off_{d,:} (Y^non - y~ 1^T), frozen
};

/// Value of each term's x_d-dependent part, given the re-standardized row.
double term_value(Term t, const RowTerms& rt, const Vector& yd) {
	double s = 0.0;
	switch (t) {
	case Term::Grad:
		for (double v : yd) s += rt.g_d * (v - rt.y_tilde_d);
		return s;
	case Term::Diag:
		for (double v : yd) s += 0.5 * rt.h_dd * (v - rt.y_tilde_d) * (v - rt.y_tilde_d);
		return s;
	case Term::OffLinear:
		return dot(rt.linear_coef, yd);
	case Term::OffNon:
		return dot(rt.non_coef, yd);
	}
	return s;
}

void add_fd_checks(GradReport& report, const TermGrads& tg, const RowTerms& rt, const Vector& x_row,
                   const std::function<Vector(const Vector&)>& restandardize, const char* prefix) {
	for (Term t : kTerms) {
		const Vector fd = central_difference([&](const Vector& r) { return term_value(t, rt, restandardize(r)); }, x_row);
		const double diff = max_abs_diff(fd, tg.x_grad(t));
		report.zero_assertions.push_back(
		    {std::string(prefix) + term_name(t), tg.d, diff, kFiniteDiffTolerance, diff <= kFiniteDiffTolerance});
	}
}

RowTerms row_terms(const TaylorModel& model, const TermGrads& tg) {
	return RowTerms{model.g[tg.d], model.h(tg.d, tg.d), model.y_tilde[tg.d], tg.linear_y, tg.non_y};
}

void push_nonzero(GradReport& report, const std::string& term, std::size_t d, double norm, double coef) {
	if (coef == 0.0) return;
	const double floor = kNonzeroFloor * coef;
	report.nonzero_assertions.push_back({term, d, norm, floor, norm > floor});
}

} // namespace

const char* term_name(Term t) noexcept {
	switch (t) {
	case Term::Grad: return "grad";
	case Term::Diag: return "diag";
	case Term::OffLinear: return "off_linear";
	case Term::OffNon: return "off_non";
	}
	return "?";
}

const Vector& TermGrads::y_grad(Term t) const {
	switch (t) {
	case Term::Grad: return grad_y;
	case Term::Diag: return diag_y;
	case Term::OffLinear: return linear_y;
	case Term::OffNon: return non_y;
	}
	throw std::logic_error("unknown term");
}

const Vector& TermGrads::x_grad(Term t) const {
	switch (t) {
	case Term::Grad: return grad_x;
	case Term::Diag: return diag_x;
	case Term::OffLinear: return linear_x;
	case Term::OffNon: return non_x;
	}
	throw std::logic_error("unknown term");
}

TermGrads term_grads(const TaylorModel& model, const StandardizedBatch& yb, std::size_t d) {
	if (yb.mode != NormMode::TrainBatchStats)
		throw UnsupportedModeError("term_grads: batch is not in train mode (use term_grads_eval)");
	TermGrads tg;
	tg.d = d;
	tg.mode = NormMode::TrainBatchStats;
	fill_y_grads(tg, model, yb.y, d);

	const Matrix j = jacobian_std_train(yb, d);
	const auto y = yb.y.row(d);
	const double sigma = yb.stats.sigma[d];
	propagate(tg, j, 1.0 / sigma, [&](const Vector& v) {
		double mean_v = 0.0;
		double mean_vy = 0.0;
		for (std::size_t i = 0; i < v.size(); ++i) {
			mean_v += v[i];
			mean_vy += v[i] * y[i];
		}
		mean_v /= static_cast<double>(v.size());
		mean_vy /= static_cast<double>(v.size());
		Vector out(v.size());
		for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mean_v - y[i] * mean_vy) / sigma;
		return out;
	});
	return tg;
}

TermGrads term_grads_eval(const TaylorModel& model, const Matrix& y, const PopulationStats& ps, std::size_t d) {
	TermGrads tg;
	tg.d = d;
	tg.mode = NormMode::EvalPopulationStats;
	fill_y_grads(tg, model, y, d);
	const Matrix j = jacobian_std_eval(ps, d, y.cols());
	const double sigma = ps.sigma_pop[d];
	propagate(tg, j, 1.0 / sigma, [&](const Vector& v) { return scaled(v, 1.0 / sigma); });
	return tg;
}

std::size_t GradReport::failed_zero() const {
	std::size_t k = 0;
	for (const auto& a : zero_assertions) k += a.passed ? 0 : 1;
	return k;
}

std::size_t GradReport::failed_nonzero() const {
	std::size_t k = 0;
	for (const auto& a : nonzero_assertions) k += a.passed ? 0 : 1;
	return k;
}

GradReport verify_theorems(const TaylorModel& model, const StandardizedBatch& yb, const Tolerance& tol) {
	if (yb.mode != NormMode::TrainBatchStats || yb.epsilon != 0.0)
		throw UnsupportedModeError("verify_theorems: requires a train-mode batch with epsilon == 0");

	GradReport report;
	report.mode = ReportMode::Train;
	const std::size_t dims = yb.dims();
	const std::size_t n = yb.batch();
	const PopulationStats fixed{yb.stats.mu, yb.stats.sigma, 1};

	double max_zero[3] = {0.0, 0.0, 0.0};
	double min_non_ratio = std::numeric_limits<double>::infinity();
	double max_chain = 0.0;
	double dgamma_grad = 0.0;
	double dgamma_diag = 0.0;

	for (std::size_t d = 0; d < dims; ++d) {
		const TermGrads tg = term_grads(model, yb, d);
		const TermGrads te = term_grads_eval(model, yb.y, fixed, d);
		max_chain = std::max({max_chain, tg.chain_rule_residual, te.chain_rule_residual});

		const double coef_g = std::abs(model.g[d]);
		const double coef_h = std::abs(model.h(d, d));
		const double coef_off = norm2(model.off_row(d));
		const double coefs[3] = {coef_g, coef_h, coef_off};
		const Term zero_terms[3] = {Term::Grad, Term::Diag, Term::OffLinear};
		for (int k = 0; k < 3; ++k) {
			const double norm = norm2(tg.x_grad(zero_terms[k]));
			const double threshold = tol.abs + tol.rel * coefs[k];
			report.zero_assertions.push_back({term_name(zero_terms[k]), d, norm, threshold, norm <= threshold});
			max_zero[k] = std::max(max_zero[k], norm);
		}

		const double non_norm = norm2(tg.non_x);
		push_nonzero(report, "off_non", d, non_norm, coef_off);
		if (coef_off > 0.0) min_non_ratio = std::min(min_non_ratio, non_norm / coef_off);

		for (Term t : kTerms) {
			const double coef = t == Term::Grad ? coef_g : t == Term::Diag ? coef_h : coef_off;
			push_nonzero(report, std::string("eval:") + term_name(t), d, norm2(te.x_grad(t)), coef);
		}

		// Closed form of the non-linear part: (1/sigma_d) (Y^non)^T (H^off_{d,:})^T, ignoring the y~ shift J removes.
		{
			const LinearSplit split = project_linear(yb.y, d);
			const Vector hrow = model.off_row(d);
			Vector closed(n, 0.0);
			for (std::size_t j = 0; j < dims; ++j)
				for (std::size_t i = 0; i < n; ++i) closed[i] += hrow[j] * split.y_non(j, i);
			for (double& v : closed) v /= yb.stats.sigma[d];
			const double diff = norm2(closed - tg.non_x);
			const double threshold = 1e-9 * std::max(1.0, norm2(closed));
			report.zero_assertions.push_back({"closed_form:off_non", d, diff, threshold, diff <= threshold});
		}

		Vector x_row(n);
		for (std::size_t i = 0; i < n; ++i) x_row[i] = yb.stats.mu[d] + yb.stats.sigma[d] * yb.y(d, i);
		add_fd_checks(report, tg, row_terms(model, tg), x_row,
		              [](const Vector& r) {
			              return standardize_batch(Matrix(1, r.size(), r), 0.0).y.row_vector(0);
		              },
		              "fd:");
		const double mu = fixed.mu_pop[d];
		const double sigma = fixed.sigma_pop[d];
		add_fd_checks(report, te, row_terms(model, te), x_row,
		              [mu, sigma](const Vector& r) {
			              Vector y(r.size());
			              for (std::size_t i = 0; i < r.size(); ++i) y[i] = (r[i] - mu) / sigma;
			              return y;
		              },
		              "fd:eval:");

		// Affine-phase gradients, reported only.
		double sum_y = 0.0;
		double sum_c2 = 0.0;
		for (std::size_t i = 0; i < n; ++i) {
			sum_y += yb.y(d, i);
			sum_c2 += (yb.y(d, i) - model.y_tilde[d]) * yb.y(d, i);
		}
		dgamma_grad += std::pow(model.g[d] * sum_y, 2);
		dgamma_diag += std::pow(model.h(d, d) * sum_c2, 2);
	}

	report.delta_metrics["max_norm:grad"] = max_zero[0];
	report.delta_metrics["max_norm:diag"] = max_zero[1];
	report.delta_metrics["max_norm:off_linear"] = max_zero[2];
	report.delta_metrics["min_ratio:off_non"] = min_non_ratio;
	report.delta_metrics["max_chain_rule_residual"] = max_chain;
	report.delta_metrics["info:dgamma_grad_norm"] = std::sqrt(dgamma_grad);
	report.delta_metrics["info:dgamma_diag_norm"] = std::sqrt(dgamma_diag);
	return report;
}

DominanceRatios dominance_ratios(const TaylorModel& model, const StandardizedBatch& yb) {
	const std::size_t dims = yb.dims();
	require_model(model, dims, "dominance_ratios");
	const std::size_t n = yb.batch();
	DominanceRatios out{Vector(dims), Vector(dims), Vector(dims), 0};
	for (std::size_t d = 0; d < dims; ++d) {
		TermGrads tg;
		tg.d = d;
		fill_y_grads(tg, model, yb.y, d);

		// dL_d/dy_d = (H^off_{d,:} (Y - y~ 1^T))^T, formed without the split.
		const Vector hrow = model.off_row(d);
		Vector direct(n, 0.0);
		for (std::size_t j = 0; j < dims; ++j)
			for (std::size_t i = 0; i < n; ++i) direct[i] += hrow[j] * (yb.y(j, i) - model.y_tilde[j]);
		out.residual[d] = norm2(direct - (tg.linear_y + tg.non_y));

		const double total = norm2(direct);
		if (total == 0.0) {
			out.r_linear[d] = std::numeric_limits<double>::quiet_NaN();
			out.r_non[d] = std::numeric_limits<double>::quiet_NaN();
			++out.undefined;
			continue;
		}
		out.r_linear[d] = tg.linear_y_norm / total;
		out.r_non[d] = tg.non_y_norm / total;
	}
	return out;
}

} // namespace bnblind
