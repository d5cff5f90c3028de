#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "bnblind/normlayers.hpp"
#include "bnblind/numkit.hpp"
#include "bnblind/taylor.hpp"

namespace bnblind {

/// Zero-gradient threshold used by the theorem checks on desk-scale batches.
inline constexpr double kZeroGradTolerance = 1e-8;
/// Nonzero checks require norm > kNonzeroFloor * (norm of the driving coefficient).
inline constexpr double kNonzeroFloor = 1e-3;
/// Finite-difference agreement required of every analytic x-gradient.
inline constexpr double kFiniteDiffTolerance = 1e-5;

enum class Term { Grad, Diag, OffLinear, OffNon };
const char* term_name(Term t) noexcept;

/**
 * Gradients of each Taylor term with respect to row d of Y and row d of X.
 *
 * The off-diagonal split holds Y^linear / Y^non fixed when differentiating,
 * so linear_y lies along y_d and non_y carries the residual rows.
 */
struct TermGrads {
	std::size_t d = 0;
	NormMode mode = NormMode::TrainBatchStats;

	Vector grad_y, diag_y, linear_y, non_y;
	Vector grad_x, diag_x, linear_x, non_x;

	double linear_y_norm = 0.0;
	double non_y_norm = 0.0;
	double total_y_norm = 0.0; ///< norm of dL_d/dy_d = linear_y + non_y
	/// Largest ||J v - backward(v)|| / ((1 + ||v||) max(1, 1/sigma_d)) over the four terms.
	double chain_rule_residual = 0.0;

	const Vector& y_grad(Term t) const;
	const Vector& x_grad(Term t) const;
};

TermGrads term_grads(const TaylorModel& model, const StandardizedBatch& yb, std::size_t d);

/// Same terms propagated through the fixed-statistics Jacobian; `y` is the eval-mode standardized batch.
TermGrads term_grads_eval(const TaylorModel& model, const Matrix& y, const PopulationStats& ps, std::size_t d);

struct Assertion {
	std::string term;
	std::size_t d = 0;
	double norm = 0.0;
	double threshold = 0.0;
	bool passed = false;
};

enum class ReportMode { Train, Eval };

struct GradReport {
	ReportMode mode = ReportMode::Train;
	std::vector<Assertion> zero_assertions;
	std::vector<Assertion> nonzero_assertions;
	std::map<std::string, double> delta_metrics;

	std::size_t failed_zero() const;
	std::size_t failed_nonzero() const;
	bool all_passed() const { return failed_zero() == 0 && failed_nonzero() == 0; }
};

/**
 * Runs every zero / nonzero gradient check for all dimensions of a
 * train-mode batch (epsilon == 0).
 *
 * Train-mode zero checks: grad, diag and off-linear terms at tol.abs.
 * Nonzero checks: the off-non term in train mode, and all four terms under
 * fixed statistics equal to the batch statistics. Nonzero floors are
 * kNonzeroFloor times the driving coefficient (|g_d|, |H_dd| or
 * ||H^off_{d,:}||); checks with a zero coefficient are skipped. Every
 * analytic x-gradient is also compared with central differences taken
 * through standardize_batch ("fd:*" zero checks at kFiniteDiffTolerance).
 */
GradReport verify_theorems(const TaylorModel& model, const StandardizedBatch& yb,
                           const Tolerance& tol = Tolerance(kZeroGradTolerance, 0.0));

struct DominanceRatios {
	Vector r_linear; ///< NaN where the total gradient vanishes
	Vector r_non;
	Vector residual; ///< ||dL_d/dy_d - linear_y - non_y|| with dL_d/dy_d formed directly
	std::size_t undefined = 0;
};

DominanceRatios dominance_ratios(const TaylorModel& model, const StandardizedBatch& yb);

} // namespace bnblind
