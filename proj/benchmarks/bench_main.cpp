#include <benchmark/benchmark.h>

#include <cmath>

#include "bnblind/blindcheck.hpp"
#include "bnblind/experiments.hpp"

using namespace bnblind;

namespace {

TaylorModel random_model(RngStream& rng, std::size_t dims) {
	Vector y_tilde = gaussian_vector(rng, dims, 0.0, 0.1);
	Vector g = gaussian_vector(rng, dims, 0.0, 1.0);
	return TaylorModel::from_parts(std::move(y_tilde), std::move(g), gaussian_matrix(rng, dims, dims, 0.0, 1.0));
}

} // namespace

static void BM_Matmul(benchmark::State& state) {
	const auto n = static_cast<std::size_t>(state.range(0));
	RngStream rng(1, 0);
	const Matrix a = gaussian_matrix(rng, n, n, 0.0, 1.0);
	const Matrix b = gaussian_matrix(rng, n, n, 0.0, 1.0);
	for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
	state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(8, 128)->Complexity(benchmark::oNCubed);

static void BM_StandardizeBatch(benchmark::State& state) {
	RngStream rng(2, 0);
	const Matrix x = gaussian_matrix(rng, 100, static_cast<std::size_t>(state.range(0)), 0.0, 1.0);
	for (auto _ : state) benchmark::DoNotOptimize(standardize_batch(x, 0.0));
}
BENCHMARK(BM_StandardizeBatch)->Arg(16)->Arg(128)->Arg(1024);

static void BM_StandardizeBackward(benchmark::State& state) {
	RngStream rng(3, 0);
	const Matrix x = gaussian_matrix(rng, 100, 128, 0.0, 1.0);
	const Matrix dy = gaussian_matrix(rng, 100, 128, 0.0, 1.0);
	const StandardizedBatch yb = standardize_batch(x, 0.0);
	for (auto _ : state) benchmark::DoNotOptimize(standardize_backward(yb, dy));
}
BENCHMARK(BM_StandardizeBackward);

static void BM_JacobianTrain(benchmark::State& state) {
	RngStream rng(4, 0);
	const StandardizedBatch yb = standardize_batch(gaussian_matrix(rng, 8, static_cast<std::size_t>(state.range(0)), 0.0, 1.0), 0.0);
	for (auto _ : state) benchmark::DoNotOptimize(jacobian_std_train(yb, 3));
}
BENCHMARK(BM_JacobianTrain)->Arg(16)->Arg(128);

static void BM_TermGrads(benchmark::State& state) {
	RngStream rng(5, 0);
	const TaylorModel m = random_model(rng, 8);
	const StandardizedBatch yb = standardize_batch(gaussian_matrix(rng, 8, 16, 0.0, 1.0), 0.0);
	for (auto _ : state) benchmark::DoNotOptimize(term_grads(m, yb, 2));
}
BENCHMARK(BM_TermGrads);

static void BM_FitTaylor(benchmark::State& state) {
	const auto dims = static_cast<std::size_t>(state.range(0));
	const LossFn loss = [](std::span<const double> y) {
		double s = 0.0;
		for (std::size_t i = 0; i < y.size(); ++i) s += std::log1p(std::exp(-y[i] * (1.0 + 0.1 * static_cast<double>(i))));
		return s;
	};
	const Vector at(dims, 0.3);
	for (auto _ : state) benchmark::DoNotOptimize(fit_taylor(loss, at));
}
BENCHMARK(BM_FitTaylor)->Arg(8)->Arg(32);

static void BM_VerifyTheorems(benchmark::State& state) {
	RngStream rng(6, 0);
	const TaylorModel m = random_model(rng, 8);
	const StandardizedBatch yb = standardize_batch(gaussian_matrix(rng, 8, 16, 0.0, 1.0), 0.0);
	for (auto _ : state) benchmark::DoNotOptimize(verify_theorems(m, yb));
}
BENCHMARK(BM_VerifyTheorems)->Unit(benchmark::kMicrosecond);

static void BM_MlpForwardBackward(benchmark::State& state) {
	RngStream rng(7, 0);
	const MlpNet net = MlpNet::random(rng, {100, 100, 100, 100, 100, 100, 1}, Activation::Identity, NormKind::Batch, 6);
	const Matrix x = gaussian_matrix(rng, 100, 128, 0.0, 1.0);
	const BatchLoss loss = PolyLossFamily({0.1, 0.2, 0.3, 0.4, 0.5}, 2).batch_loss();
	for (auto _ : state) benchmark::DoNotOptimize(mlp_input_grad(net, loss, x));
}
BENCHMARK(BM_MlpForwardBackward)->Unit(benchmark::kMillisecond);

static void BM_Table1Trial(benchmark::State& state) {
	const RngStream rng(42, 11);
	for (auto _ : state) benchmark::DoNotOptimize(experiment_table1(1, rng, NetConfig{}));
}
BENCHMARK(BM_Table1Trial)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
