#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bnblind/blindcheck.hpp"
#include "bnblind/normlayers.hpp"
#include "bnblind/numkit.hpp"
#include "bnblind/taylor.hpp"

namespace bnblind {

/// Summed loss over a batch of network outputs (one sample per column).
/// Writes dLoss/dout into `grad` when it is non-null.
using BatchLoss = std::function<double(const Matrix& out, Matrix* grad)>;

/// Loss_k(y | lambda) = sum_i sum_{k'=k..4} lambda_k' (y_i)^k' on a scalar output.
struct PolyLossFamily {
	std::array<double, 5> lambda{};
	int k = 0;

	PolyLossFamily(std::array<double, 5> coefficients, int cutoff);

	double value(double y) const;
	double derivative(double y) const;
	BatchLoss batch_loss() const;
};

enum class Activation { ReLU, Identity };
enum class NormKind { None, Batch, Layer };

struct DenseLayer {
	Matrix w; ///< out x in
	Vector b;
	Activation act = Activation::ReLU;
};

/**
 * Fully connected stack with at most one normalization layer.
 *
 * The normalization (standardization only, no affine) is applied to the
 * input of layers[norm_position]; norm_position == layers.size() puts it on
 * the network output. When `population` is set, batch normalization uses
 * those fixed statistics instead of the batch statistics.
 */
struct MlpNet {
	std::vector<DenseLayer> layers;
	NormKind norm = NormKind::None;
	std::size_t norm_position = 0;
	double epsilon = 0.0;
	std::optional<PopulationStats> population;

	std::size_t input_width() const;
	std::size_t output_width() const;
	/// Width of the activations the normalization layer sees.
	std::size_t norm_width() const;
	void validate() const;

	/// He-initialized weights, zero biases. widths = {in, h1, ..., out}; the last layer uses `output_act`.
	static MlpNet random(RngStream& rng, const std::vector<std::size_t>& widths, Activation output_act,
	                     NormKind norm, std::size_t norm_position, double epsilon = 0.0);
};

struct ForwardCache {
	std::vector<Matrix> inputs;          ///< input to each layer, after normalization
	std::vector<Matrix> pre_activations; ///< W a + b of each layer
	Matrix norm_input;                   ///< X seen by the normalization layer
	std::optional<StandardizedBatch> norm;
	Matrix output;
};

ForwardCache mlp_forward(const MlpNet& net, const Matrix& input);

struct BackwardResult {
	Matrix input_grad;
	Matrix norm_input_grad;  ///< dLoss/dX at the normalization layer (empty without one)
	std::vector<Matrix> weight_grads; ///< filled only when requested
	std::vector<Vector> bias_grads;
};

/**
 * Reverse pass from dLoss/dout. `norm_output_extra` is added to the gradient
 * arriving at the standardized output, for losses defined directly on it.
 */
BackwardResult mlp_backward(const MlpNet& net, const ForwardCache& cache, const Matrix& output_grad,
                            const Matrix* norm_output_extra = nullptr, bool parameter_grads = false);

/// Exact gradient of the summed batch loss with respect to the network input.
Matrix mlp_input_grad(const MlpNet& net, const BatchLoss& loss, const Matrix& input);

/// Softmax cross-entropy of each column against its label, summed.
BatchLoss softmax_cross_entropy(std::vector<std::size_t> labels);

/// Plain gradient descent on a fixed batch; returns the final loss.
double train_steps(MlpNet& net, const Matrix& input, const BatchLoss& loss, std::size_t steps, double learning_rate);

/// Population statistics of the normalization input, accumulated over fresh N(0, 1) batches.
PopulationStats estimate_population(const MlpNet& net, RngStream& rng, std::size_t batch, std::size_t batches,
                                    double momentum);

struct NoiseSpec {
	enum class Variant { Loss2, Loss3, Loss4 };
	Vector epsilon_vec;
	Matrix e_off; ///< zero diagonal
	Variant variant = Variant::Loss2;

	static NoiseSpec draw(RngStream& rng, std::size_t dims, Variant variant, double std = 0.1);
	/// Gradient of the added term with respect to the standardized batch (expansion point 0).
	Matrix gradient(const Matrix& y) const;
};

struct ExperimentResult {
	std::string name;
	std::string metric;
	std::size_t trials = 0;
	double mean = 0.0;
	double std = 0.0;
	Vector raw;
	std::size_t skipped = 0;
	std::optional<bool> passed;
	std::map<std::string, std::string> metadata;

	/// Statistics over raw values sorted ascending, so the aggregate ignores trial order.
	static ExperimentResult from_raw(std::string name, std::string metric, Vector raw);
};

struct NetConfig {
	std::size_t dims = 8;          ///< width at the normalization layer (tables 2-4)
	std::size_t batch = 128;
	std::size_t input_width = 16;  ///< tables 2-4
	std::size_t table1_width = 100;
	std::size_t table1_layers = 5;
	std::size_t classes = 10;
	std::optional<std::size_t> bn_depth; ///< tables 3-4; depths 1..3 when unset
	NormKind norm = NormKind::Batch;
	bool eval_mode = false;
	double epsilon = 0.0;
	std::size_t warmup_steps = 0;
	double learning_rate = 1e-2;
	unsigned threads = 1;
};

/// Runs body(t) for t in [0, count) on up to `threads` workers.
void parallel_trials(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& body);

std::vector<ExperimentResult> experiment_table1(std::size_t trials, const RngStream& rng, const NetConfig& cfg);
std::vector<ExperimentResult> experiment_table2(std::size_t trials, const RngStream& rng, const NetConfig& cfg);
std::vector<ExperimentResult> experiment_table3(std::size_t trials, const RngStream& rng, const NetConfig& cfg);
std::vector<ExperimentResult> experiment_table4(std::size_t trials, const RngStream& rng, const NetConfig& cfg);
std::vector<ExperimentResult> experiment_sigmoid_decay();

/// Per-sample losses with random labels; checks the shared-model grad/diag terms stay blind.
std::vector<ExperimentResult> experiment_case2(std::size_t trials, const RngStream& rng, std::size_t dims,
                                               std::size_t batch);

/// verify_theorems over random models and batches, plus the case-2 check.
std::vector<ExperimentResult> verify_suite(std::size_t trials, const RngStream& rng, std::size_t dims,
                                           std::size_t batch, unsigned threads = 1);

} // namespace bnblind
