#pragma once

#include <cstddef>
#include <string>

#include "bnblind/numkit.hpp"

namespace bnblind {

/// A feature dimension (or, for layer normalization, a sample) has zero variance.
class DegenerateError : public DomainError {
public:
	DegenerateError(const std::string& what, std::size_t index)
	    : DomainError(what + " " + std::to_string(index)), index_(index) {}
	std::size_t index() const noexcept { return index_; }

private:
	std::size_t index_;
};

/// The requested closed form does not apply to the batch's normalization mode or epsilon.
class UnsupportedModeError : public DomainError {
public:
	using DomainError::DomainError;
};

enum class NormMode {
	TrainBatchStats,     ///< per-dimension statistics of the current mini-batch
	EvalPopulationStats, ///< fixed population statistics
	LayerSampleStats,    ///< per-sample statistics over the feature dimensions
};

struct BnParams {
	Vector gamma;
	Vector beta;
	double epsilon = 0.0;

	static BnParams identity(std::size_t dims, double epsilon = 0.0);
};

/// Mean and biased (divide-by-count) standard deviation, one entry per normalized slice.
struct BatchStats {
	Vector mu;
	Vector sigma;
};

struct StandardizedBatch {
	Matrix y;
	BatchStats stats;
	NormMode mode = NormMode::TrainBatchStats;
	double epsilon = 0.0;

	std::size_t dims() const noexcept { return y.rows(); }
	std::size_t batch() const noexcept { return y.cols(); }
	/// sqrt(sigma_i^2 + epsilon), the divisor actually applied to slice i.
	double scale(std::size_t i) const;
};

struct PopulationStats {
	Vector mu_pop;
	Vector sigma_pop;
	std::size_t batches_seen = 0;

	/// Running statistics before any batch: mean 0, deviation 1.
	static PopulationStats initial(std::size_t dims);
};

/// Row-wise standardization with mini-batch statistics.
StandardizedBatch standardize_batch(const Matrix& x, double epsilon);

/// Row-wise standardization with fixed population statistics.
StandardizedBatch standardize_population(const Matrix& x, const PopulationStats& ps, double epsilon = 0.0);

/// Column-wise (per-sample) standardization over the feature dimensions.
StandardizedBatch standardize_layer(const Matrix& x, double epsilon);

/// Z = diag(gamma) Y + beta 1^T.
Matrix affine(const StandardizedBatch& yb, const BnParams& p);

/// Exponential moving average of mean and deviation; an empty population adopts the batch.
PopulationStats update_population(const PopulationStats& ps, const BatchStats& stats, double momentum);

/**
 * Jacobian of row d of Y with respect to row d of X under batch statistics:
 *
 *   J_d = (1/sigma_d) (I - 1 1^T / n - y_d y_d^T / n)
 *
 * Only valid for epsilon == 0; both 1_n and y_d lie in its null space.
 */
Matrix jacobian_std_train(const StandardizedBatch& yb, std::size_t d);

/// Under population statistics the row Jacobian is (1/sigma_pop_d) I.
Matrix jacobian_std_eval(const PopulationStats& ps, std::size_t d, std::size_t batch);

/**
 * Reverse pass of the standardization step for any mode: maps dL/dY to dL/dX.
 *
 * Batch mode uses dx = (dy - mean(dy) - y * mean(dy * y)) / s per row, which
 * is exact for any epsilon. Layer mode applies the same rule per column.
 */
Matrix standardize_backward(const StandardizedBatch& yb, const Matrix& dy);

} // namespace bnblind
