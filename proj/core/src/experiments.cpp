#include "bnblind/experiments.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <thread>

namespace bnblind {

// ---------------------------------------------------------------------------
// Losses

PolyLossFamily::PolyLossFamily(std::array<double, 5> coefficients, int cutoff) : lambda(coefficients), k(cutoff) {
	if (cutoff < 0 || cutoff > 4) throw DomainError("PolyLossFamily: cutoff must lie in 0..4");
}

double PolyLossFamily::value(double y) const {
	double s = 0.0;
	for (int p = k; p <= 4; ++p) s += lambda[static_cast<std::size_t>(p)] * std::pow(y, p);
	return s;
}

double PolyLossFamily::derivative(double y) const {
	// The constant term has no derivative; it is skipped so Loss_0 and Loss_1 differentiate identically.
	double s = 0.0;
	for (int p = std::max(k, 1); p <= 4; ++p) s += p * lambda[static_cast<std::size_t>(p)] * std::pow(y, p - 1);
	return s;
}

BatchLoss PolyLossFamily::batch_loss() const {
	return [family = *this](const Matrix& out, Matrix* grad) {
		if (out.rows() != 1) throw ShapeError("PolyLossFamily: expects a scalar output");
		if (grad) *grad = Matrix(1, out.cols());
		double total = 0.0;
		for (std::size_t i = 0; i < out.cols(); ++i) {
			total += family.value(out(0, i));
			if (grad) (*grad)(0, i) = family.derivative(out(0, i));
		}
		return total;
	};
}

namespace {

double cross_entropy(std::span<const double> logits, std::size_t label, std::span<double> grad) {
	const double top = *std::max_element(logits.begin(), logits.end());
	double z = 0.0;
	for (double v : logits) z += std::exp(v - top);
	const double log_z = top + std::log(z);
	if (!grad.empty()) {
		for (std::size_t c = 0; c < logits.size(); ++c) grad[c] = std::exp(logits[c] - log_z);
		grad[label] -= 1.0;
	}
	return log_z - logits[label];
}

} // namespace

BatchLoss softmax_cross_entropy(std::vector<std::size_t> labels) {
	return [labels = std::move(labels)](const Matrix& out, Matrix* grad) {
		if (out.cols() != labels.size()) throw ShapeError("softmax_cross_entropy: one label per sample required");
		if (grad) *grad = Matrix(out.rows(), out.cols());
		double total = 0.0;
		Vector logits(out.rows());
		Vector g(grad ? out.rows() : 0);
		for (std::size_t i = 0; i < out.cols(); ++i) {
			if (labels[i] >= out.rows()) throw DomainError("softmax_cross_entropy: label out of range");
			for (std::size_t c = 0; c < out.rows(); ++c) logits[c] = out(c, i);
			total += cross_entropy(logits, labels[i], g);
			if (grad)
				for (std::size_t c = 0; c < out.rows(); ++c) (*grad)(c, i) = g[c];
		}
		return total;
	};
}

// ---------------------------------------------------------------------------
// MLP

std::size_t MlpNet::input_width() const { return layers.empty() ? 0 : layers.front().w.cols(); }
std::size_t MlpNet::output_width() const { return layers.empty() ? 0 : layers.back().w.rows(); }

std::size_t MlpNet::norm_width() const {
	if (norm_position < layers.size()) return layers[norm_position].w.cols();
	return output_width();
}

void MlpNet::validate() const {
	if (layers.empty()) throw ShapeError("MlpNet: no layers");
	for (std::size_t l = 0; l < layers.size(); ++l) {
		if (layers[l].b.size() != layers[l].w.rows()) throw ShapeError("MlpNet: bias length differs from layer width");
		if (l > 0 && layers[l].w.cols() != layers[l - 1].w.rows())
			throw ShapeError("MlpNet: layer " + std::to_string(l) + " input width does not match previous output");
	}
	if (norm != NormKind::None && norm_position > layers.size()) throw ShapeError("MlpNet: normalization position");
	if (population && norm != NormKind::Batch) throw DomainError("MlpNet: population statistics need batch norm");
}

MlpNet MlpNet::random(RngStream& rng, const std::vector<std::size_t>& widths, Activation output_act, NormKind norm,
                      std::size_t norm_position, double epsilon) {
	if (widths.size() < 2) throw ShapeError("MlpNet::random: need at least input and output widths");
	MlpNet net;
	for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
		const double std = std::sqrt(2.0 / static_cast<double>(widths[l]));
		const bool last = l + 2 == widths.size();
		net.layers.push_back({gaussian_matrix(rng, widths[l + 1], widths[l], 0.0, std), Vector(widths[l + 1], 0.0),
		                      last ? output_act : Activation::ReLU});
	}
	net.norm = norm;
	net.norm_position = norm_position;
	net.epsilon = epsilon;
	net.validate();
	return net;
}

namespace {

void add_bias(Matrix& z, const Vector& b) {
	for (std::size_t r = 0; r < z.rows(); ++r)
		for (double& v : z.row(r)) v += b[r];
}

Matrix activate(const Matrix& z, Activation act) {
	if (act == Activation::Identity) return z;
	Matrix a = z;
	for (double& v : a.data()) v = v > 0.0 ? v : 0.0;
	return a;
}

StandardizedBatch normalize(const MlpNet& net, const Matrix& x) {
	switch (net.norm) {
	case NormKind::Batch:
		return net.population ? standardize_population(x, *net.population, net.epsilon)
		                      : standardize_batch(x, net.epsilon);
	case NormKind::Layer:
		return standardize_layer(x, net.epsilon);
	case NormKind::None:
		break;
	}
	throw std::logic_error("normalize: no normalization configured");
}

} // namespace

ForwardCache mlp_forward(const MlpNet& net, const Matrix& input) {
	net.validate();
	if (input.rows() != net.input_width())
		throw ShapeError("mlp_forward: input has " + std::to_string(input.rows()) + " rows, network expects " +
		                 std::to_string(net.input_width()));

	ForwardCache cache;
	Matrix a = input;
	for (std::size_t l = 0; l <= net.layers.size(); ++l) {
		if (l == net.norm_position) {
			cache.norm_input = a;
			if (net.norm != NormKind::None) {
				cache.norm = normalize(net, a);
				a = cache.norm->y;
			}
		}
		if (l == net.layers.size()) break;
		const DenseLayer& layer = net.layers[l];
		cache.inputs.push_back(a);
		Matrix z = matmul(layer.w, a);
		add_bias(z, layer.b);
		a = activate(z, layer.act);
		cache.pre_activations.push_back(std::move(z));
	}
	cache.output = std::move(a);
	return cache;
}

BackwardResult mlp_backward(const MlpNet& net, const ForwardCache& cache, const Matrix& output_grad,
                            const Matrix* norm_output_extra, bool parameter_grads) {
	if (output_grad.rows() != cache.output.rows() || output_grad.cols() != cache.output.cols())
		throw ShapeError("mlp_backward: output gradient shape");
	if (norm_output_extra && (norm_output_extra->rows() != cache.norm_input.rows() ||
	                          norm_output_extra->cols() != cache.norm_input.cols()))
		throw ShapeError("mlp_backward: injected gradient shape");

	BackwardResult out;
	if (parameter_grads) {
		out.weight_grads.resize(net.layers.size());
		out.bias_grads.resize(net.layers.size());
	}

	auto through_norm = [&](Matrix g) {
		if (norm_output_extra) g += *norm_output_extra;
		if (cache.norm) g = standardize_backward(*cache.norm, g);
		out.norm_input_grad = g;
		return g;
	};

	Matrix g = output_grad;
	if (net.norm_position == net.layers.size()) g = through_norm(std::move(g));
	for (std::size_t l = net.layers.size(); l-- > 0;) {
		const DenseLayer& layer = net.layers[l];
		if (layer.act == Activation::ReLU) {
			const Matrix& z = cache.pre_activations[l];
			for (std::size_t i = 0; i < g.size(); ++i)
				if (!(z.data()[i] > 0.0)) g.data()[i] = 0.0;
		}
		if (parameter_grads) {
			out.weight_grads[l] = matmul_nt(g, cache.inputs[l]);
			Vector db(g.rows(), 0.0);
			for (std::size_t r = 0; r < g.rows(); ++r)
				for (double v : g.row(r)) db[r] += v;
			out.bias_grads[l] = std::move(db);
		}
		g = matmul_tn(layer.w, g);
		if (l == net.norm_position) g = through_norm(std::move(g));
	}
	out.input_grad = std::move(g);
	return out;
}

Matrix mlp_input_grad(const MlpNet& net, const BatchLoss& loss, const Matrix& input) {
	const ForwardCache cache = mlp_forward(net, input);
	Matrix dout;
	loss(cache.output, &dout);
	return mlp_backward(net, cache, dout).input_grad;
}

double train_steps(MlpNet& net, const Matrix& input, const BatchLoss& loss, std::size_t steps, double learning_rate) {
	if (!(learning_rate > 0.0)) throw DomainError("train_steps: learning rate must be positive");
	for (std::size_t s = 0; s < steps; ++s) {
		const ForwardCache cache = mlp_forward(net, input);
		Matrix dout;
		loss(cache.output, &dout);
		const BackwardResult back = mlp_backward(net, cache, dout, nullptr, true);
		for (std::size_t l = 0; l < net.layers.size(); ++l) {
			net.layers[l].w -= learning_rate * back.weight_grads[l];
			for (std::size_t r = 0; r < net.layers[l].b.size(); ++r)
				net.layers[l].b[r] -= learning_rate * back.bias_grads[l][r];
		}
	}
	return loss(mlp_forward(net, input).output, nullptr);
}

namespace {

/// Activations entering layers[position] (before any normalization there).
Matrix forward_until(const MlpNet& net, const Matrix& input, std::size_t position) {
	Matrix a = input;
	for (std::size_t l = 0; l < position; ++l) {
		Matrix z = matmul(net.layers[l].w, a);
		add_bias(z, net.layers[l].b);
		a = activate(z, net.layers[l].act);
	}
	return a;
}

/// One sample through layers[position..] with no normalization.
Vector head_forward(const MlpNet& net, std::size_t position, Vector a) {
	for (std::size_t l = position; l < net.layers.size(); ++l) {
		const DenseLayer& layer = net.layers[l];
		Vector z = matvec(layer.w, a);
		for (std::size_t r = 0; r < z.size(); ++r) {
			z[r] += layer.b[r];
			if (layer.act == Activation::ReLU && !(z[r] > 0.0)) z[r] = 0.0;
		}
		a = std::move(z);
	}
	return a;
}

} // namespace

PopulationStats estimate_population(const MlpNet& net, RngStream& rng, std::size_t batch, std::size_t batches,
                                    double momentum) {
	if (net.norm != NormKind::Batch) throw DomainError("estimate_population: network has no batch normalization");
	if (batches == 0) throw DomainError("estimate_population: need at least one batch");
	PopulationStats ps;
	for (std::size_t b = 0; b < batches; ++b) {
		const Matrix x = forward_until(net, gaussian_matrix(rng, net.input_width(), batch, 0.0, 1.0), net.norm_position);
		BatchStats stats{Vector(x.rows()), Vector(x.rows())};
		for (std::size_t d = 0; d < x.rows(); ++d) {
			const MeanStd ms = mean_std(x.row(d));
			stats.mu[d] = ms.mean;
			stats.sigma[d] = ms.std;
		}
		ps = update_population(ps, stats, momentum);
	}
	return ps;
}

// ---------------------------------------------------------------------------
// Noise and results

NoiseSpec NoiseSpec::draw(RngStream& rng, std::size_t dims, Variant variant, double std) {
	NoiseSpec spec{gaussian_vector(rng, dims, 0.0, std), gaussian_matrix(rng, dims, dims, 0.0, std), variant};
	for (std::size_t d = 0; d < dims; ++d) spec.e_off(d, d) = 0.0;
	return spec;
}

Matrix NoiseSpec::gradient(const Matrix& y) const {
	const std::size_t dims = epsilon_vec.size();
	if (y.rows() != dims) throw ShapeError("NoiseSpec::gradient: dimension mismatch");
	Matrix g(dims, y.cols());
	switch (variant) {
	case Variant::Loss2:
		for (std::size_t d = 0; d < dims; ++d)
			for (double& v : g.row(d)) v = epsilon_vec[d];
		break;
	case Variant::Loss3:
		for (std::size_t d = 0; d < dims; ++d)
			for (std::size_t i = 0; i < y.cols(); ++i) g(d, i) = 2.0 * epsilon_vec[d] * y(d, i);
		break;
	case Variant::Loss4:
		g = matmul(e_off + e_off.transposed(), y);
		break;
	}
	return g;
}

ExperimentResult ExperimentResult::from_raw(std::string name, std::string metric, Vector raw) {
	ExperimentResult r;
	r.name = std::move(name);
	r.metric = std::move(metric);
	std::sort(raw.begin(), raw.end());
	const MeanStd ms = raw.empty() ? MeanStd{std::numeric_limits<double>::quiet_NaN(), 0.0} : mean_std(raw);
	r.mean = ms.mean;
	r.std = ms.std;
	r.trials = raw.size();
	r.raw = std::move(raw);
	return r;
}

void parallel_trials(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& body) {
	const std::size_t workers = std::min<std::size_t>(std::max(1U, threads), count);
	if (workers <= 1) {
		for (std::size_t t = 0; t < count; ++t) body(t);
		return;
	}
	std::exception_ptr failure;
	std::mutex lock;
	std::vector<std::thread> pool;
	for (std::size_t w = 0; w < workers; ++w) {
		pool.emplace_back([&, w] {
			for (std::size_t t = w; t < count; t += workers) {
				try {
					body(t);
				} catch (...) {
					const std::scoped_lock guard(lock);
					if (!failure) failure = std::current_exception();
					return;
				}
			}
		});
	}
	for (auto& th : pool) th.join();
	if (failure) std::rethrow_exception(failure);
}

namespace {

std::string fmt(double v) {
	char buf[64];
	const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
	return ec == std::errc() ? std::string(buf, end) : std::string("nan");
}

const char* norm_name(NormKind k) {
	switch (k) {
	case NormKind::Batch: return "bn";
	case NormKind::Layer: return "ln";
	case NormKind::None: return "none";
	}
	return "?";
}

/// Runs `attempt` on the trial stream; a nullopt or degenerate draw is re-rolled once on a child stream.
template <typename T, typename Fn>
std::optional<T> with_reroll(const RngStream& root, std::size_t t, Fn attempt) {
	for (std::uint64_t roll = 0; roll < 2; ++roll) {
		RngStream r = roll == 0 ? root.derive(t) : root.derive(t).derive(roll);
		try {
			std::optional<T> out = attempt(r);
			if (out) return out;
		} catch (const DegenerateError&) {
		}
	}
	return std::nullopt;
}

struct Collected {
	std::vector<Vector> per_trial;
	std::vector<char> ok;
};

void stamp(ExperimentResult& r, const RngStream& rng, const NetConfig& cfg, std::size_t skipped) {
	r.skipped = skipped;
	r.metadata["seed"] = std::to_string(rng.seed());
	r.metadata["batch"] = std::to_string(cfg.batch);
	r.metadata["norm"] = norm_name(cfg.norm);
	r.metadata["mode"] = cfg.eval_mode ? "eval" : "train";
	r.metadata["epsilon"] = fmt(cfg.epsilon);
	r.metadata["skipped"] = std::to_string(skipped);
}

double frob_diff(const Matrix& a, const Matrix& b) { return frobenius_norm(a - b); }

std::vector<std::size_t> random_labels(RngStream& r, std::size_t n, std::size_t classes) {
	std::vector<std::size_t> labels(n);
	for (auto& l : labels) l = static_cast<std::size_t>(r.below(classes));
	return labels;
}

} // namespace

// ---------------------------------------------------------------------------
// Table 1

std::vector<ExperimentResult> experiment_table1(std::size_t trials, const RngStream& rng, const NetConfig& cfg) {
	if (trials == 0) throw DomainError("experiment_table1: need at least one trial");
	const std::size_t width = cfg.table1_width;
	std::vector<std::size_t> widths(cfg.table1_layers + 1, width);
	widths.push_back(1);
	const std::size_t last = cfg.table1_layers;

	std::vector<std::optional<std::array<double, 4>>> results(trials);
	parallel_trials(trials, cfg.threads, [&](std::size_t t) {
		results[t] = with_reroll<std::array<double, 4>>(rng, t, [&](RngStream& r) -> std::optional<std::array<double, 4>> {
			std::array<double, 5> lambda{};
			for (double& v : lambda) v = r.normal();
			// BN acts on the scalar output; LN needs a wide input, so it sits before the final linear map.
			const std::size_t position = cfg.norm == NormKind::Layer ? last : last + 1;
			MlpNet net = MlpNet::random(r, widths, Activation::Identity, cfg.norm, position, cfg.epsilon);
			const Matrix input = gaussian_matrix(r, width, cfg.batch, 0.0, 1.0);
			if (cfg.eval_mode && cfg.norm == NormKind::Batch) net.population = estimate_population(net, r, cfg.batch, 4, 0.5);

			const ForwardCache cache = mlp_forward(net, input);
			std::array<Matrix, 5> grads;
			for (int k = 0; k <= 4; ++k) {
				Matrix dout;
				PolyLossFamily(lambda, k).batch_loss()(cache.output, &dout);
				grads[static_cast<std::size_t>(k)] = mlp_backward(net, cache, dout).input_grad;
			}
			std::array<double, 4> delta{};
			for (std::size_t q = 0; q < 4; ++q) {
				const double den = frobenius_norm(grads[q]);
				if (!(den > 0.0)) return std::nullopt;
				delta[q] = frob_diff(grads[q], grads[q + 1]) / den;
			}
			return delta;
		});
	});

	std::size_t skipped = 0;
	std::array<Vector, 4> raw;
	for (const auto& r : results) {
		if (!r) {
			++skipped;
			continue;
		}
		for (std::size_t q = 0; q < 4; ++q) raw[q].push_back((*r)[q]);
	}

	const bool blind = cfg.norm == NormKind::Batch && !cfg.eval_mode && cfg.epsilon == 0.0;
	std::vector<ExperimentResult> out;
	for (std::size_t q = 0; q < 4; ++q) {
		ExperimentResult res = ExperimentResult::from_raw("table1", "delta_grad_" + std::to_string(q), raw[q]);
		if (blind) {
			if (q == 0) res.passed = res.mean == 0.0;
			if (q == 1 || q == 2) res.passed = res.mean <= 1e-6;
			if (q == 3) res.passed = res.mean >= 0.05 && res.mean <= 1.5;
		} else if (cfg.norm == NormKind::Layer && q <= 2) {
			res.passed = res.mean > 1e-3;
		} else if (cfg.norm == NormKind::Batch && cfg.eval_mode && (q == 1 || q == 2)) {
			res.passed = res.mean > 1e-3;
		}
		stamp(res, rng, cfg, skipped);
		res.metadata["width"] = std::to_string(width);
		res.metadata["layers"] = std::to_string(cfg.table1_layers);
		out.push_back(std::move(res));
	}
	return out;
}

// ---------------------------------------------------------------------------
// Table 2

std::vector<ExperimentResult> experiment_table2(std::size_t trials, const RngStream& rng, const NetConfig& cfg) {
	if (trials == 0) throw DomainError("experiment_table2: need at least one trial");
	constexpr std::size_t kHidden = 32;
	const std::vector<std::size_t> widths{cfg.input_width, cfg.dims, kHidden, cfg.classes};
	using Variant = NoiseSpec::Variant;
	constexpr Variant kVariants[] = {Variant::Loss2, Variant::Loss3, Variant::Loss4};

	std::vector<std::optional<std::array<double, 3>>> results(trials);
	parallel_trials(trials, cfg.threads, [&](std::size_t t) {
		results[t] = with_reroll<std::array<double, 3>>(rng, t, [&](RngStream& r) -> std::optional<std::array<double, 3>> {
			MlpNet net = MlpNet::random(r, widths, Activation::Identity, cfg.norm, 1, cfg.epsilon);
			const Matrix input = gaussian_matrix(r, cfg.input_width, cfg.batch, 0.0, 1.0);
			const BatchLoss base = softmax_cross_entropy(random_labels(r, cfg.batch, cfg.classes));
			NoiseSpec noise = NoiseSpec::draw(r, cfg.dims, Variant::Loss2);
			if (cfg.eval_mode && cfg.norm == NormKind::Batch) net.population = estimate_population(net, r, cfg.batch, 4, 0.5);

			const ForwardCache cache = mlp_forward(net, input);
			Matrix dout;
			base(cache.output, &dout);
			const Matrix g_star = mlp_backward(net, cache, dout).norm_input_grad;
			const double den = frobenius_norm(g_star);
			if (!(den > 0.0))
				throw std::runtime_error("experiment_table2: base loss has zero gradient at the normalization input (trial " +
				                         std::to_string(t) + ")");

			const Matrix& y = cache.norm ? cache.norm->y : cache.norm_input;
			std::array<double, 3> delta{};
			for (std::size_t v = 0; v < 3; ++v) {
				noise.variant = kVariants[v];
				const Matrix extra = noise.gradient(y);
				delta[v] = frob_diff(g_star, mlp_backward(net, cache, dout, &extra).norm_input_grad) / den;
			}
			return delta;
		});
	});

	std::size_t skipped = 0;
	std::array<Vector, 3> raw;
	for (const auto& r : results) {
		if (!r) {
			++skipped;
			continue;
		}
		for (std::size_t v = 0; v < 3; ++v) raw[v].push_back((*r)[v]);
	}

	const bool blind = cfg.norm == NormKind::Batch && !cfg.eval_mode && cfg.epsilon == 0.0;
	const bool contrast = cfg.norm == NormKind::Layer || (cfg.norm == NormKind::Batch && cfg.eval_mode);
	const char* names[] = {"delta_grad_first", "delta_grad_second_diag", "delta_grad_second_off"};
	std::vector<ExperimentResult> out;
	for (std::size_t v = 0; v < 3; ++v) {
		ExperimentResult res = ExperimentResult::from_raw("table2", names[v], raw[v]);
		if (blind) res.passed = v < 2 ? res.mean <= 1e-6 : res.mean >= std::max(10.0 * kZeroGradTolerance, 0.01);
		else if (contrast) res.passed = res.mean > 1e-3;
		stamp(res, rng, cfg, skipped);
		res.metadata["dims"] = std::to_string(cfg.dims);
		res.metadata["classes"] = std::to_string(cfg.classes);
		out.push_back(std::move(res));
	}
	return out;
}

// ---------------------------------------------------------------------------
// Tables 3 and 4

namespace {

struct SubnetSetup {
	MlpNet net;
	std::size_t position = 0;
	std::vector<std::size_t> active;
	StandardizedBatch yb;
	TaylorModel model;
	Matrix x_active;
	std::size_t dead = 0;
};

/// Builds a random net with BN before the depth-th FC layer from the top and fits H above it.
std::optional<SubnetSetup> build_subnet(RngStream& r, const NetConfig& cfg, std::size_t depth, bool warmup) {
	const std::vector<std::size_t> widths{cfg.input_width, cfg.dims, cfg.dims, cfg.dims, cfg.classes};
	const std::size_t n_layers = widths.size() - 1;
	SubnetSetup s;
	s.position = n_layers - depth;
	s.net = MlpNet::random(r, widths, Activation::Identity, NormKind::Batch, s.position, 0.0);
	const Matrix input = gaussian_matrix(r, cfg.input_width, cfg.batch, 0.0, 1.0);
	const std::size_t label = static_cast<std::size_t>(r.below(cfg.classes));
	if (warmup && cfg.warmup_steps > 0)
		train_steps(s.net, input, softmax_cross_entropy(random_labels(r, cfg.batch, cfg.classes)), cfg.warmup_steps,
		            cfg.learning_rate);

	const Matrix x = forward_until(s.net, input, s.position);
	for (std::size_t d = 0; d < x.rows(); ++d) {
		if (mean_std(x.row(d)).std > 0.0)
			s.active.push_back(d);
		else
			++s.dead;
	}
	if (s.active.size() < 2) return std::nullopt;

	s.x_active = Matrix(s.active.size(), x.cols());
	for (std::size_t a = 0; a < s.active.size(); ++a)
		for (std::size_t i = 0; i < x.cols(); ++i) s.x_active(a, i) = x(s.active[a], i);
	s.yb = standardize_batch(s.x_active, 0.0);

	const auto net = std::make_shared<const MlpNet>(s.net);
	const std::size_t position = s.position;
	const std::size_t full = cfg.dims;
	const std::vector<std::size_t> active = s.active;
	const LossFn loss = [net, position, full, active, label](std::span<const double> ya) {
		Vector y(full, 0.0);
		for (std::size_t a = 0; a < active.size(); ++a) y[active[a]] = ya[a];
		const Vector logits = head_forward(*net, position, std::move(y));
		return cross_entropy(logits, label, {});
	};
	s.model = fit_taylor(loss, column_mean(s.yb.y));
	return s;
}

std::vector<std::size_t> depths_for(const NetConfig& cfg) {
	if (cfg.bn_depth) {
		if (*cfg.bn_depth < 1 || *cfg.bn_depth > 3) throw DomainError("bn depth must be 1, 2 or 3");
		return {*cfg.bn_depth};
	}
	return {1, 2, 3};
}

void require_blind_setup(const NetConfig& cfg, const char* who) {
	if (cfg.norm != NormKind::Batch) throw DomainError(std::string(who) + ": requires batch normalization");
	if (cfg.epsilon != 0.0) throw DomainError(std::string(who) + ": requires epsilon == 0");
	if (cfg.dims < 2) throw DomainError(std::string(who) + ": need at least two normalized dimensions");
}

} // namespace

std::vector<ExperimentResult> experiment_table3(std::size_t trials, const RngStream& rng, const NetConfig& cfg) {
	require_blind_setup(cfg, "experiment_table3");
	if (trials == 0) throw DomainError("experiment_table3: need at least one trial");

	struct Trial {
		Vector train_norms;
		Vector eval_norms;
		double hoff = 0.0;
		std::size_t dead = 0;
	};

	std::vector<ExperimentResult> out;
	for (std::size_t depth : depths_for(cfg)) {
		const RngStream root = rng.derive(100 + depth);
		std::vector<std::optional<Trial>> results(trials);
		parallel_trials(trials, cfg.threads, [&](std::size_t t) {
			results[t] = with_reroll<Trial>(root, t, [&](RngStream& r) -> std::optional<Trial> {
				auto setup = build_subnet(r, cfg, depth, false);
				if (!setup) return std::nullopt;
				Trial tr;
				tr.dead = setup->dead;
				tr.hoff = frobenius_norm(setup->model.h_off);

				PopulationStats ps_full = estimate_population(setup->net, r, cfg.batch, 4, 0.5);
				PopulationStats ps{Vector(setup->active.size()), Vector(setup->active.size()), ps_full.batches_seen};
				for (std::size_t a = 0; a < setup->active.size(); ++a) {
					ps.mu_pop[a] = ps_full.mu_pop[setup->active[a]];
					ps.sigma_pop[a] = ps_full.sigma_pop[setup->active[a]];
				}
				const StandardizedBatch y_eval = standardize_population(setup->x_active, ps);
				for (std::size_t d = 0; d < setup->active.size(); ++d) {
					tr.train_norms.push_back(norm2(term_grads(setup->model, setup->yb, d).linear_x));
					tr.eval_norms.push_back(norm2(term_grads_eval(setup->model, y_eval.y, ps, d).linear_x));
				}
				return tr;
			});
		});

		Vector train, eval, hoff;
		std::size_t skipped = 0;
		std::size_t dead = 0;
		for (const auto& r : results) {
			if (!r) {
				++skipped;
				continue;
			}
			train.insert(train.end(), r->train_norms.begin(), r->train_norms.end());
			eval.insert(eval.end(), r->eval_norms.begin(), r->eval_norms.end());
			hoff.push_back(r->hoff);
			dead += r->dead;
		}

		const std::string tag = "depth" + std::to_string(depth) + ":";
		ExperimentResult lin = ExperimentResult::from_raw("table3", tag + "linear_grad_norm", train);
		lin.passed = lin.mean <= kZeroGradTolerance;
		ExperimentResult h = ExperimentResult::from_raw("table3", tag + "hoff_norm", hoff);
		ExperimentResult ev = ExperimentResult::from_raw("table3", tag + "eval_linear_grad_norm", eval);
		ev.passed = ev.mean > kNonzeroFloor * h.mean;
		for (ExperimentResult* res : {&lin, &ev, &h}) {
			stamp(*res, rng, cfg, skipped);
			res->metadata["depth"] = std::to_string(depth);
			res->metadata["dead_dims"] = std::to_string(dead);
			res->metadata["nets"] = std::to_string(trials - skipped);
			out.push_back(std::move(*res));
		}
	}
	return out;
}

std::vector<ExperimentResult> experiment_table4(std::size_t trials, const RngStream& rng, const NetConfig& cfg) {
	require_blind_setup(cfg, "experiment_table4");
	if (trials == 0) throw DomainError("experiment_table4: need at least one trial");

	struct Trial {
		Vector r_linear;
		Vector r_non;
		double residual = 0.0;
		double pythagoras_gap = 0.0;
		double parallel_gap = 0.0;
		std::size_t undefined = 0;
	};

	std::vector<ExperimentResult> out;
	for (std::size_t depth : depths_for(cfg)) {
		const RngStream root = rng.derive(200 + depth);
		std::vector<std::optional<Trial>> results(trials);
		parallel_trials(trials, cfg.threads, [&](std::size_t t) {
			results[t] = with_reroll<Trial>(root, t, [&](RngStream& r) -> std::optional<Trial> {
				auto setup = build_subnet(r, cfg, depth, true);
				if (!setup) return std::nullopt;
				Trial tr;
				const DominanceRatios dr = dominance_ratios(setup->model, setup->yb);
				tr.undefined = dr.undefined;
				for (std::size_t d = 0; d < dr.r_linear.size(); ++d) {
					tr.residual = std::max(tr.residual, dr.residual[d]);
					if (std::isnan(dr.r_linear[d])) continue;
					tr.r_linear.push_back(dr.r_linear[d]);
					tr.r_non.push_back(dr.r_non[d]);
					const double sq = dr.r_linear[d] * dr.r_linear[d] + dr.r_non[d] * dr.r_non[d];
					tr.pythagoras_gap = std::max(tr.pythagoras_gap, std::abs(sq - 1.0));
				}

				// Rows that are all affine images of one vector leave nothing outside the linear part.
				const std::size_t dims = setup->active.size();
				const Vector v = gaussian_vector(r, cfg.batch, 0.0, 1.0);
				Matrix xp(dims, cfg.batch);
				for (std::size_t j = 0; j < dims; ++j) {
					const double a = (r.uniform() < 0.5 ? -1.0 : 1.0) * (0.5 + r.uniform());
					const double b = r.normal();
					for (std::size_t i = 0; i < cfg.batch; ++i) xp(j, i) = a * v[i] + b;
				}
				const DominanceRatios par = dominance_ratios(setup->model, standardize_batch(xp, 0.0));
				for (std::size_t d = 0; d < dims; ++d)
					if (!std::isnan(par.r_linear[d]))
						tr.parallel_gap = std::max(tr.parallel_gap, std::abs(par.r_linear[d] - 1.0));
				return tr;
			});
		});

		Vector rl, rn, residual, pyth, parallel;
		std::size_t skipped = 0;
		std::size_t undefined = 0;
		for (const auto& r : results) {
			if (!r) {
				++skipped;
				continue;
			}
			rl.insert(rl.end(), r->r_linear.begin(), r->r_linear.end());
			rn.insert(rn.end(), r->r_non.begin(), r->r_non.end());
			residual.push_back(r->residual);
			pyth.push_back(r->pythagoras_gap);
			parallel.push_back(r->parallel_gap);
			undefined += r->undefined;
		}

		const std::string tag = "depth" + std::to_string(depth) + ":";
		const auto positive_finite = [](const Vector& v) {
			return !v.empty() && std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x) && x > 0.0; });
		};
		ExperimentResult a = ExperimentResult::from_raw("table4", tag + "r_linear", rl);
		a.passed = positive_finite(a.raw) && a.mean <= 1.5;
		ExperimentResult b = ExperimentResult::from_raw("table4", tag + "r_non", rn);
		b.passed = positive_finite(b.raw) && b.mean <= 1.5;
		ExperimentResult c = ExperimentResult::from_raw("table4", tag + "decomposition_residual", residual);
		c.passed = !c.raw.empty() && c.raw.back() <= 1e-9;
		ExperimentResult p = ExperimentResult::from_raw("table4", tag + "parallel_r_linear_gap", parallel);
		p.passed = !p.raw.empty() && p.raw.back() <= 1e-12;
		ExperimentResult g = ExperimentResult::from_raw("table4", tag + "pythagoras_gap", pyth);
		for (ExperimentResult* res : {&a, &b, &c, &p, &g}) {
			stamp(*res, rng, cfg, skipped);
			res->metadata["depth"] = std::to_string(depth);
			res->metadata["undefined_ratios"] = std::to_string(undefined);
			res->metadata["warmup_steps"] = std::to_string(cfg.warmup_steps);
			out.push_back(std::move(*res));
		}
	}
	return out;
}

// ---------------------------------------------------------------------------
// Sigmoid decay

std::vector<ExperimentResult> experiment_sigmoid_decay() {
	std::vector<ExperimentResult> out;
	for (int m = 1; m <= 5; ++m) {
		for (double z : {-30.0, -2.0, 0.0, 2.0, 30.0}) {
			ExperimentResult r =
			    ExperimentResult::from_raw("sigmoid-decay", "order" + std::to_string(m) + "@z=" + fmt(z),
			                               Vector{sigmoid_loss_derivative(m, z)});
			if (m >= 3 && std::abs(z) == 30.0) r.passed = std::abs(r.mean) <= 1e-10;
			r.metadata["order"] = std::to_string(m);
			r.metadata["z"] = fmt(z);
			out.push_back(std::move(r));
		}
	}
	return out;
}

// ---------------------------------------------------------------------------
// Case 2 and the verification suite

std::vector<ExperimentResult> experiment_case2(std::size_t trials, const RngStream& rng, std::size_t dims,
                                               std::size_t batch) {
	if (trials == 0) throw DomainError("experiment_case2: need at least one trial");
	constexpr std::size_t kClasses = 10;
	Vector grad_norms, diag_norms, distinct_norms;
	std::size_t skipped = 0;
	for (std::size_t t = 0; t < trials; ++t) {
		struct Out {
			double grad, diag, distinct;
		};
		auto res = with_reroll<Out>(rng, t, [&](RngStream& r) -> std::optional<Out> {
			const StandardizedBatch yb = standardize_batch(gaussian_matrix(r, dims, batch, 0.0, 1.0), 0.0);
			const Matrix w = gaussian_matrix(r, kClasses, dims, 0.0, 1.0 / std::sqrt(static_cast<double>(dims)));
			const Vector b = gaussian_vector(r, kClasses, 0.0, 0.1);
			const auto labels = random_labels(r, batch, kClasses);
			const Vector y_tilde = column_mean(yb.y);

			std::vector<TaylorModel> models;
			models.reserve(batch);
			for (std::size_t i = 0; i < batch; ++i) {
				const std::size_t label = labels[i];
				models.push_back(fit_taylor(
				    [&w, &b, label](std::span<const double> y) {
					    Vector z = matvec(w, y);
					    for (std::size_t c = 0; c < z.size(); ++c) z[c] += b[c];
					    return cross_entropy(z, label, {});
				    },
				    y_tilde));
			}
			const CaseTwoModel split = case2_split(models);
			const TaylorModel shared = split.shared_model(y_tilde);

			Out o{0.0, 0.0, 0.0};
			for (std::size_t d = 0; d < dims; ++d) {
				const TermGrads tg = term_grads(shared, yb, d);
				o.grad = std::max(o.grad, norm2(tg.grad_x));
				o.diag = std::max(o.diag, norm2(tg.diag_x));
				Vector distinct(batch);
				for (std::size_t i = 0; i < batch; ++i) distinct[i] = split.g_prime[i][d];
				o.distinct = std::max(o.distinct, norm2(matvec(jacobian_std_train(yb, d), distinct)));
			}
			return o;
		});
		if (!res) {
			++skipped;
			continue;
		}
		grad_norms.push_back(res->grad);
		diag_norms.push_back(res->diag);
		distinct_norms.push_back(res->distinct);
	}

	std::vector<ExperimentResult> out;
	ExperimentResult g = ExperimentResult::from_raw("case2", "max_grad_norm", grad_norms);
	g.passed = !g.raw.empty() && g.raw.back() <= kZeroGradTolerance;
	ExperimentResult h = ExperimentResult::from_raw("case2", "max_diag_norm", diag_norms);
	h.passed = !h.raw.empty() && h.raw.back() <= kZeroGradTolerance;
	ExperimentResult p = ExperimentResult::from_raw("case2", "distinct_grad_norm", distinct_norms);
	for (ExperimentResult* res : {&g, &h, &p}) {
		res->skipped = skipped;
		res->metadata["seed"] = std::to_string(rng.seed());
		res->metadata["dims"] = std::to_string(dims);
		res->metadata["batch"] = std::to_string(batch);
		out.push_back(std::move(*res));
	}
	return out;
}

std::vector<ExperimentResult> verify_suite(std::size_t trials, const RngStream& rng, std::size_t dims,
                                           std::size_t batch, unsigned threads) {
	if (trials == 0) throw DomainError("verify_suite: need at least one trial");
	if (dims < 2 || batch < 2) throw DomainError("verify_suite: need dims >= 2 and batch >= 2");

	struct Trial {
		double zero_failures = 0.0;
		double inconclusive = 0.0;
		double max_grad = 0.0, max_diag = 0.0, max_linear = 0.0;
		double min_non_ratio = 0.0;
		double fd_error = 0.0;
		double chain = 0.0;
	};

	const RngStream root = rng.derive(1);
	std::vector<Trial> results(trials);
	parallel_trials(trials, threads, [&](std::size_t t) {
		Trial tr;
		for (std::uint64_t roll = 0; roll < 2; ++roll) {
			RngStream r = roll == 0 ? root.derive(t) : root.derive(t).derive(roll);
			Matrix x = gaussian_matrix(r, dims, batch, 0.0, 1.0);
			for (std::size_t d = 0; d < dims; ++d) {
				const double scale = std::exp(r.normal(0.0, 0.5));
				const double shift = r.normal();
				for (double& v : x.row(d)) v = scale * v + shift;
			}
			const StandardizedBatch yb = standardize_batch(x, 0.0);
			Matrix h = gaussian_matrix(r, dims, dims, 0.0, 1.0);
			h = 0.5 * (h + h.transposed());
			const TaylorModel model =
			    TaylorModel::from_parts(gaussian_vector(r, dims, 0.0, 0.1), gaussian_vector(r, dims, 0.0, 1.0), h);

			const GradReport report = verify_theorems(model, yb);
			tr.zero_failures += static_cast<double>(report.failed_zero());
			tr.max_grad = std::max(tr.max_grad, report.delta_metrics.at("max_norm:grad"));
			tr.max_diag = std::max(tr.max_diag, report.delta_metrics.at("max_norm:diag"));
			tr.max_linear = std::max(tr.max_linear, report.delta_metrics.at("max_norm:off_linear"));
			tr.min_non_ratio = report.delta_metrics.at("min_ratio:off_non");
			tr.chain = std::max(tr.chain, report.delta_metrics.at("max_chain_rule_residual"));
			for (const auto& a : report.zero_assertions)
				if (a.term.rfind("fd:", 0) == 0) tr.fd_error = std::max(tr.fd_error, a.norm);
			if (report.failed_nonzero() == 0) {
				tr.inconclusive = 0.0;
				break;
			}
			tr.inconclusive = 1.0;
		}
		results[t] = tr;
	});

	Vector zero, inconclusive, grad, diag, linear, non_ratio, fd, chain;
	for (const auto& tr : results) {
		zero.push_back(tr.zero_failures);
		inconclusive.push_back(tr.inconclusive);
		grad.push_back(tr.max_grad);
		diag.push_back(tr.max_diag);
		linear.push_back(tr.max_linear);
		non_ratio.push_back(tr.min_non_ratio);
		fd.push_back(tr.fd_error);
		chain.push_back(tr.chain);
	}

	const auto max_of = [](const ExperimentResult& r) { return r.raw.empty() ? 0.0 : r.raw.back(); };
	std::vector<ExperimentResult> out;
	ExperimentResult z = ExperimentResult::from_raw("verify", "zero_assertion_failures", zero);
	z.passed = max_of(z) == 0.0;
	ExperimentResult inc = ExperimentResult::from_raw("verify", "inconclusive_fraction", inconclusive);
	inc.passed = inc.mean <= 0.01;
	ExperimentResult g = ExperimentResult::from_raw("verify", "max_norm:grad", grad);
	g.passed = max_of(g) <= kZeroGradTolerance;
	ExperimentResult dg = ExperimentResult::from_raw("verify", "max_norm:diag", diag);
	dg.passed = max_of(dg) <= kZeroGradTolerance;
	ExperimentResult l = ExperimentResult::from_raw("verify", "max_norm:off_linear", linear);
	l.passed = max_of(l) <= kZeroGradTolerance;
	ExperimentResult nr = ExperimentResult::from_raw("verify", "min_ratio:off_non", non_ratio);
	ExperimentResult f = ExperimentResult::from_raw("verify", "finite_difference_error", fd);
	f.passed = max_of(f) <= kFiniteDiffTolerance;
	ExperimentResult c = ExperimentResult::from_raw("verify", "chain_rule_residual", chain);
	c.passed = max_of(c) <= 1e-10;
	for (ExperimentResult* res : {&z, &inc, &g, &dg, &l, &nr, &f, &c}) {
		res->metadata["seed"] = std::to_string(rng.seed());
		res->metadata["dims"] = std::to_string(dims);
		res->metadata["batch"] = std::to_string(batch);
		out.push_back(std::move(*res));
	}

	auto case2 = experiment_case2(std::min<std::size_t>(trials, 100), rng.derive(2), dims, batch);
	out.insert(out.end(), std::make_move_iterator(case2.begin()), std::make_move_iterator(case2.end()));
	return out;
}

} // namespace bnblind
