#include "bnblind/taylor.hpp"

#include "bnblind/normlayers.hpp"

#include <cmath>

namespace bnblind {

namespace {

double evaluate(const LossFn& loss, const Vector& point) {
	const double v = loss(point);
	if (!std::isfinite(v)) throw EvaluationError("loss evaluation is not finite", point);
	return v;
}

double log1pexp(double x) {
	// log(1 + e^x) without overflow.
	return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

} // namespace

TaylorModel TaylorModel::from_parts(Vector y_tilde, Vector g, const Matrix& hessian) {
	const std::size_t dims = g.size();
	if (y_tilde.size() != dims || hessian.rows() != dims || hessian.cols() != dims)
		throw ShapeError("TaylorModel: expansion point, gradient and Hessian sizes differ");

	TaylorModel m{std::move(y_tilde), std::move(g), Matrix(dims, dims), Matrix(dims, dims), Matrix(dims, dims)};
	for (std::size_t j = 0; j < dims; ++j) {
		for (std::size_t k = 0; k < dims; ++k) {
			const double v = 0.5 * (hessian(j, k) + hessian(k, j));
			m.h(j, k) = v;
			if (j == k)
				m.h_diag(j, k) = v;
			else
				m.h_off(j, k) = v;
		}
	}
	return m;
}

TaylorModel fit_taylor(const LossFn& loss, const Vector& y_tilde, double step) {
	if (!(step > 0.0)) throw DomainError("fit_taylor: step must be positive");
	const std::size_t dims = y_tilde.size();

	Vector grad_step(dims);
	Vector hess_step(dims);
	for (std::size_t j = 0; j < dims; ++j) {
		grad_step[j] = step * (1.0 + std::abs(y_tilde[j]));
		hess_step[j] = kHessianStepFactor * grad_step[j];
	}

	Vector point = y_tilde;
	auto at = [&](std::size_t j, double dj, std::size_t k, double dk) {
		point = y_tilde;
		point[j] += dj;
		point[k] += dk;
		return evaluate(loss, point);
	};

	const double center = evaluate(loss, y_tilde);
	Vector g(dims);
	Matrix h(dims, dims);
	for (std::size_t j = 0; j < dims; ++j) {
		const double s = grad_step[j];
		g[j] = (at(j, s, j, 0.0) - at(j, -s, j, 0.0)) / (2.0 * s);

		const double t = hess_step[j];
		h(j, j) = (at(j, t, j, 0.0) - 2.0 * center + at(j, -t, j, 0.0)) / (t * t);
		for (std::size_t k = j + 1; k < dims; ++k) {
			const double u = hess_step[k];
			const double v = (at(j, t, k, u) - at(j, t, k, -u) - at(j, -t, k, u) + at(j, -t, k, -u)) / (4.0 * t * u);
			h(j, k) = v;
			h(k, j) = v;
		}
	}
	return TaylorModel::from_parts(y_tilde, std::move(g), h);
}

Vector column_mean(const Matrix& y) {
	Vector m(y.rows(), 0.0);
	for (std::size_t d = 0; d < y.rows(); ++d) {
		double s = 0.0;
		for (double v : y.row(d)) s += v;
		m[d] = s / static_cast<double>(y.cols());
	}
	return m;
}

LinearSplit project_linear(const Matrix& y, std::size_t d) {
	if (d >= y.rows()) throw DomainError("project_linear: dimension out of range");
	const auto yd = y.row(d);
	const double len = norm2(yd);
	if (!(len > 0.0)) throw DegenerateError("project_linear: zero-norm row", d);

	Vector o(yd.begin(), yd.end());
	for (double& v : o) v /= len;

	LinearSplit out{Matrix(y.rows(), y.cols()), Matrix(y.rows(), y.cols())};
	for (std::size_t j = 0; j < y.rows(); ++j) {
		if (j == d) {
			for (std::size_t i = 0; i < y.cols(); ++i) out.y_linear(j, i) = y(j, i);
			continue;
		}
		const double coef = dot(o, y.row(j));
		for (std::size_t i = 0; i < y.cols(); ++i) {
			out.y_linear(j, i) = coef * o[i];
			out.y_non(j, i) = y(j, i) - out.y_linear(j, i);
		}
	}
	return out;
}

LossDecomposition decompose_batch_loss(const TaylorModel& model, const Matrix& y, const LossFn& loss) {
	const std::size_t dims = model.dims();
	if (y.rows() != dims) throw ShapeError("decompose_batch_loss: batch dimension differs from model");
	const std::size_t n = y.cols();

	Matrix centered = y;
	for (std::size_t d = 0; d < dims; ++d)
		for (std::size_t i = 0; i < n; ++i) centered(d, i) -= model.y_tilde[d];

	LossDecomposition out;
	out.constant = static_cast<double>(n) * evaluate(loss, model.y_tilde);

	const Matrix off_times = matmul(model.h_off, centered);
	for (std::size_t i = 0; i < n; ++i) {
		for (std::size_t d = 0; d < dims; ++d) {
			const double c = centered(d, i);
			out.grad_term += c * model.g[d];
			out.diag_term += 0.5 * model.h(d, d) * c * c;
			out.off_term += 0.5 * c * off_times(d, i);
		}
	}

	out.total = 0.0;
	for (std::size_t i = 0; i < n; ++i) out.total += evaluate(loss, y.column(i));
	out.remainder = out.total - (out.constant + out.grad_term + out.diag_term + out.off_term);

	out.per_dim_total.assign(dims, 0.0);
	out.per_dim_linear.assign(dims, 0.0);
	out.per_dim_non.assign(dims, 0.0);
	for (std::size_t d = 0; d < dims; ++d) {
		const auto yd = y.row(d);
		const Vector hrow = model.off_row(d);
		const LinearSplit split = project_linear(y, d);

		// lambda_d[j] = o_d^T y_j
		const double len = norm2(yd);
		Vector lambda(dims);
		for (std::size_t j = 0; j < dims; ++j) lambda[j] = dot(yd, y.row(j)) / len;
		out.per_dim_linear[d] = len * dot(hrow, lambda);

		double non = 0.0;
		double total = 0.0;
		for (std::size_t j = 0; j < dims; ++j) {
			if (hrow[j] == 0.0) continue;
			double acc_non = 0.0;
			double acc_total = 0.0;
			for (std::size_t i = 0; i < n; ++i) {
				acc_non += (split.y_non(j, i) - model.y_tilde[j]) * yd[i];
				acc_total += centered(j, i) * yd[i];
			}
			non += hrow[j] * acc_non;
			total += hrow[j] * acc_total;
		}
		out.per_dim_non[d] = non;
		out.per_dim_total[d] = total;
	}
	return out;
}

CaseTwoModel case2_split(const std::vector<TaylorModel>& models) {
	if (models.empty()) throw DomainError("case2_split: no models");
	const std::size_t dims = models.front().dims();
	const Vector& y_tilde = models.front().y_tilde;
	for (const auto& m : models) {
		if (m.dims() != dims) throw ShapeError("case2_split: models have different dimensions");
		if (m.y_tilde != y_tilde) throw DomainError("case2_split: models are expanded at different points");
	}

	const double inv_n = 1.0 / static_cast<double>(models.size());
	CaseTwoModel out{Vector(dims, 0.0), Matrix(dims, dims), {}, {}};
	for (const auto& m : models) {
		for (std::size_t j = 0; j < dims; ++j) out.g_bar[j] += m.g[j];
		out.h_bar += m.h;
	}
	for (double& v : out.g_bar) v *= inv_n;
	out.h_bar *= inv_n;

	out.g_prime.reserve(models.size());
	out.h_prime.reserve(models.size());
	for (const auto& m : models) {
		out.g_prime.push_back(m.g - out.g_bar);
		out.h_prime.push_back(m.h - out.h_bar);
	}
	return out;
}

double sigmoid_loss(double z) { return log1pexp(-z); }

std::vector<double> sigmoid_derivative_coefficients(int m) {
	if (m < 1) throw DomainError("sigmoid_derivative_coefficients: order must be >= 1");
	std::vector<double> p{-1.0};
	for (int order = 1; order < m; ++order) {
		// u (1 + u) P'(u) - order * u * P(u)
		std::vector<double> next(p.size() + 1, 0.0);
		for (std::size_t k = 1; k < p.size(); ++k) {
			const double dk = static_cast<double>(k) * p[k];
			next[k] += dk;
			next[k + 1] += dk;
		}
		for (std::size_t k = 0; k < p.size(); ++k) next[k + 1] -= static_cast<double>(order) * p[k];
		p = std::move(next);
	}
	return p;
}

double sigmoid_loss_derivative(int m, double z) {
	if (m < 1) throw DomainError("sigmoid_loss_derivative: order must be >= 1 (use sigmoid_loss for m = 0)");
	const auto coef = sigmoid_derivative_coefficients(m);
	const double log_s = -log1pexp(-z);
	const double log_1ms = -log1pexp(z);
	double sum = 0.0;
	for (std::size_t k = 0; k < coef.size(); ++k) {
		if (coef[k] == 0.0) continue;
		const double log_mag = std::log(std::abs(coef[k])) + static_cast<double>(k) * log_s +
		                       static_cast<double>(m - static_cast<int>(k)) * log_1ms;
		sum += std::copysign(std::exp(log_mag), coef[k]);
	}
	return sum;
}

} // namespace bnblind
