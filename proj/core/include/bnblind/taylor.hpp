#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bnblind/numkit.hpp"

namespace bnblind {

/// Scalar loss of one standardized sample. Must be deterministic and reentrant.
using LossFn = std::function<double(std::span<const double>)>;

/// A loss evaluation returned NaN or infinity.
class EvaluationError : public std::runtime_error {
public:
	EvaluationError(const std::string& what, Vector point)
	    : std::runtime_error(what), point_(std::move(point)) {}
	const Vector& point() const noexcept { return point_; }

private:
	Vector point_;
};

/// Base step for gradient stencils; Hessian stencils use kHessianStepFactor times this.
inline constexpr double kDefaultTaylorStep = 1e-4;
inline constexpr double kHessianStepFactor = 10.0;

/**
 * Second-order Taylor model of a scalar loss around y_tilde.
 *
 * The Hessian is symmetrized on construction and split into its diagonal
 * and off-diagonal parts, h == h_diag + h_off.
 */
struct TaylorModel {
	Vector y_tilde;
	Vector g;
	Matrix h;
	Matrix h_diag;
	Matrix h_off;

	static TaylorModel from_parts(Vector y_tilde, Vector g, const Matrix& hessian);

	std::size_t dims() const noexcept { return g.size(); }
	/// Row d of the off-diagonal Hessian.
	Vector off_row(std::size_t d) const { return h_off.row_vector(d); }
};

/// Batch loss split into Taylor terms plus the per-dimension off-diagonal split.
struct LossDecomposition {
	double constant = 0.0;
	double grad_term = 0.0;
	double diag_term = 0.0;
	double off_term = 0.0;
	double remainder = 0.0;
	double total = 0.0;
	Vector per_dim_total;  ///< L_d = H^off_{d,:} (Y - y~ 1^T) y_d
	Vector per_dim_linear; ///< part carried by rows linearly correlated with y_d
	Vector per_dim_non;    ///< part carried by the residual rows
};

/// Average and per-sample distinctive gradients and Hessians of a mini-batch.
struct CaseTwoModel {
	Vector g_bar;
	Matrix h_bar;
	std::vector<Vector> g_prime;
	std::vector<Matrix> h_prime;

	TaylorModel shared_model(const Vector& y_tilde) const { return TaylorModel::from_parts(y_tilde, g_bar, h_bar); }
};

/**
 * Central-difference gradient and Hessian of `loss` at `y_tilde`.
 *
 * Coordinate j uses step * (1 + |y_tilde_j|) for the gradient and
 * kHessianStepFactor times that for the Hessian stencil. For piecewise
 * linear losses the result is an equivalent Hessian that reflects gating
 * changes inside the stencil.
 */
TaylorModel fit_taylor(const LossFn& loss, const Vector& y_tilde, double step = kDefaultTaylorStep);

/// Column mean of a D x n batch; the default expansion point.
Vector column_mean(const Matrix& y);

LossDecomposition decompose_batch_loss(const TaylorModel& model, const Matrix& y, const LossFn& loss);

struct LinearSplit {
	Matrix y_linear;
	Matrix y_non;
};

/// Projects every row of `y` onto the direction of row d; row d of y_non is exactly zero.
LinearSplit project_linear(const Matrix& y, std::size_t d);

CaseTwoModel case2_split(const std::vector<TaylorModel>& models);

/// Stable value of L(z) = -log(sigmoid(z)).
double sigmoid_loss(double z);

/**
 * m-th derivative of L(z) = -log(e^z / (1 + e^z)).
 *
 * Uses L^(m)(z) = P_m(e^z) / (1 + e^z)^m with P_1 = -1 and
 * P_{m+1}(u) = u (1 + u) P_m'(u) - m u P_m(u); each monomial
 * e^{kz} / (1 + e^z)^m is evaluated as s^k (1 - s)^{m-k} with s = sigmoid(z),
 * in log space.
 */
double sigmoid_loss_derivative(int m, double z);

/// Integer coefficients of P_m, lowest power first.
std::vector<double> sigmoid_derivative_coefficients(int m);

} // namespace bnblind
