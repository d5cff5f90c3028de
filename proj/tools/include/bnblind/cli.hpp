#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bnblind/experiments.hpp"

namespace bnblind::cli {

enum class Command { Verify, Experiment };
enum class Format { Csv, Json };

inline constexpr int kExitOk = 0;
inline constexpr int kExitAssertion = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIo = 3;

/// Name of the optional environment variable that redirects relative output paths.
inline constexpr const char* kOutputDirEnv = "BNBLIND_OUTPUT_DIR";

struct RunConfig {
	Command command = Command::Verify;
	std::string experiment; ///< table1..table4 or sigmoid-decay
	std::uint64_t seed = 42;
	std::size_t dims = 8;
	std::size_t batch = 128;
	std::size_t trials = 100;
	std::optional<std::size_t> bn_depth;
	NormKind norm = NormKind::Batch;
	bool eval_mode = false;
	double epsilon = 0.0;
	Format format = Format::Csv;
	std::string output; ///< empty writes to stdout
	unsigned threads = 1;
	std::size_t warmup_steps = 0;
};

class UsageError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

struct ResultRecord {
	std::string experiment;
	std::string metric;
	double mean = 0.0;
	double std = 0.0;
	std::size_t trials = 0;
	std::uint64_t seed = 0;
	std::optional<bool> passed;

	/// Field-wise equality where NaN equals NaN.
	bool same_as(const ResultRecord& other) const;
};

/// Throws UsageError; `--help` is reported by returning std::nullopt after printing to `out`.
std::optional<RunConfig> parse_args(int argc, const char* const* argv, std::ostream& out);

std::vector<ExperimentResult> run_experiments(const RunConfig& config);
std::vector<ResultRecord> collect(const RunConfig& config);
std::vector<ResultRecord> to_records(const std::vector<ExperimentResult>& results, std::uint64_t seed);

std::string to_csv(const std::vector<ResultRecord>& records);
std::string to_json(const std::vector<ResultRecord>& records);
std::vector<ResultRecord> parse_csv(const std::string& text);
std::vector<ResultRecord> parse_json(const std::string& text);

/// Shortest decimal that parses back to the same double.
std::string format_double(double v);

/// Writes to `path`, or to `out` when the path is empty. Throws IoError.
void emit(const std::vector<ResultRecord>& records, Format format, const std::string& path, std::ostream& out);

/// Output path after applying the output-directory override.
std::string resolve_output(const std::string& path);

int run(const RunConfig& config, std::ostream& out, std::ostream& err);

/// parse_args + run with exit-code mapping.
int main_entry(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace bnblind::cli
