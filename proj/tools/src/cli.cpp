#include "bnblind/cli.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

namespace bnblind::cli {

namespace {

constexpr const char* kCsvHeader = "experiment,metric,mean,std,trials,seed,passed";

std::uint64_t stream_for(const std::string& experiment) {
	if (experiment == "table1") return 11;
	if (experiment == "table2") return 12;
	if (experiment == "table3") return 13;
	if (experiment == "table4") return 14;
	if (experiment == "sigmoid-decay") return 15;
	return 1;
}

bool same_double(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

std::string csv_field(const std::string& s) {
	if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
	std::string out = "\"";
	for (char c : s) {
		if (c == '"') out += '"';
		out += c;
	}
	out += '"';
	return out;
}

double parse_double(const std::string& s) {
	double v = 0.0;
	const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
	if (ec != std::errc() || ptr != s.data() + s.size()) throw std::invalid_argument("not a number: '" + s + "'");
	return v;
}

template <typename T>
T parse_unsigned(const std::string& s) {
	T v = 0;
	const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
	if (ec != std::errc() || ptr != s.data() + s.size()) throw std::invalid_argument("not an integer: '" + s + "'");
	return v;
}

std::optional<bool> parse_passed(const std::string& s) {
	if (s.empty()) return std::nullopt;
	if (s == "true") return true;
	if (s == "false") return false;
	throw std::invalid_argument("passed must be true, false or empty: '" + s + "'");
}

/// Splits RFC-4180 text into rows of fields.
std::vector<std::vector<std::string>> split_csv(const std::string& text) {
	std::vector<std::vector<std::string>> rows;
	std::vector<std::string> row;
	std::string field;
	bool quoted = false;
	bool any = false;
	for (std::size_t i = 0; i < text.size(); ++i) {
		const char c = text[i];
		if (quoted) {
			if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
				field += '"';
				++i;
			} else if (c == '"') {
				quoted = false;
			} else {
				field += c;
			}
			continue;
		}
		any = true;
		if (c == '"') {
			quoted = true;
		} else if (c == ',') {
			row.push_back(std::move(field));
			field.clear();
		} else if (c == '\n' || c == '\r') {
			if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
			row.push_back(std::move(field));
			field.clear();
			rows.push_back(std::move(row));
			row.clear();
			any = false;
		} else {
			field += c;
		}
	}
	if (quoted) throw std::invalid_argument("unterminated quoted field");
	if (any) {
		row.push_back(std::move(field));
		rows.push_back(std::move(row));
	}
	return rows;
}

} // namespace

bool ResultRecord::same_as(const ResultRecord& o) const {
	return experiment == o.experiment && metric == o.metric && same_double(mean, o.mean) && same_double(std, o.std) &&
	       trials == o.trials && seed == o.seed && passed == o.passed;
}

std::string format_double(double v) {
	if (std::isnan(v)) return "nan";
	char buf[64];
	const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
	if (ec != std::errc()) throw std::logic_error("format_double: buffer too small");
	return std::string(buf, end);
}

std::optional<RunConfig> parse_args(int argc, const char* const* argv, std::ostream& out) {
	RunConfig c;
	CLI::App app{"Checks which Taylor terms of a loss batch normalization hides from earlier layers.", "bnblind"};

	std::string command;
	std::string norm = "bn";
	std::string mode = "train";
	std::string format = "csv";
	std::size_t depth = 0;

	app.add_option("command", command, "verify | experiment")->required()->check(CLI::IsMember({"verify", "experiment"}));
	app.add_option("name", c.experiment, "table1 | table2 | table3 | table4 | sigmoid-decay")
	    ->check(CLI::IsMember({"table1", "table2", "table3", "table4", "sigmoid-decay"}));
	app.add_option("--seed", c.seed, "root seed for every random stream")->capture_default_str();
	app.add_option("--dims", c.dims, "feature dimensions at the normalization layer")
	    ->check(CLI::Range(std::size_t{2}, std::size_t{4096}))
	    ->capture_default_str();
	app.add_option("--batch", c.batch, "mini-batch size")->check(CLI::Range(std::size_t{2}, std::size_t{1} << 20))->capture_default_str();
	app.add_option("--trials", c.trials, "number of random trials")
	    ->check(CLI::Range(std::size_t{1}, std::size_t{1} << 30))
	    ->capture_default_str();
	app.add_option("--bn-depth", depth, "FC layer from the top that the BN layer feeds (tables 3 and 4)")
	    ->check(CLI::Range(std::size_t{1}, std::size_t{3}));
	app.add_option("--norm", norm, "bn | ln | none")->check(CLI::IsMember({"bn", "ln", "none"}))->capture_default_str();
	app.add_option("--mode", mode, "train | eval")->check(CLI::IsMember({"train", "eval"}))->capture_default_str();
	app.add_option("--epsilon", c.epsilon, "variance offset of the normalization layer")
	    ->check(CLI::NonNegativeNumber)
	    ->capture_default_str();
	app.add_option("--format", format, "csv | json")->check(CLI::IsMember({"csv", "json"}))->capture_default_str();
	app.add_option("--output", c.output, "output file (stdout when omitted)");
	app.add_option("--threads", c.threads, "worker threads for independent trials")
	    ->check(CLI::Range(1U, 256U))
	    ->capture_default_str();
	app.add_option("--warmup-steps", c.warmup_steps, "gradient-descent steps before measuring (table 4)")
	    ->capture_default_str();
	app.set_config("--config", "", "key=value file; flags on the command line take precedence");

	try {
		app.parse(argc, argv);
	} catch (const CLI::CallForHelp&) {
		out << app.help();
		return std::nullopt;
	} catch (const CLI::ParseError& e) {
		throw UsageError(e.what());
	}

	c.command = command == "verify" ? Command::Verify : Command::Experiment;
	if (c.command == Command::Experiment && c.experiment.empty()) throw UsageError("experiment: missing experiment name");
	if (c.command == Command::Verify && !c.experiment.empty()) throw UsageError("verify takes no experiment name");
	if (depth != 0) c.bn_depth = depth;
	c.norm = norm == "bn" ? NormKind::Batch : norm == "ln" ? NormKind::Layer : NormKind::None;
	c.eval_mode = mode == "eval";
	c.format = format == "json" ? Format::Json : Format::Csv;
	if (!std::isfinite(c.epsilon)) throw UsageError("--epsilon must be finite");
	return c;
}

std::vector<ResultRecord> to_records(const std::vector<ExperimentResult>& results, std::uint64_t seed) {
	std::vector<ResultRecord> out;
	out.reserve(results.size());
	for (const auto& r : results) out.push_back({r.name, r.metric, r.mean, r.std, r.trials, seed, r.passed});
	return out;
}

std::vector<ExperimentResult> run_experiments(const RunConfig& c) {
	const RngStream rng(c.seed, stream_for(c.experiment));
	if (c.command == Command::Verify) return verify_suite(c.trials, rng, c.dims, c.batch, c.threads);

	NetConfig net;
	net.dims = c.dims;
	net.batch = c.batch;
	net.bn_depth = c.bn_depth;
	net.norm = c.norm;
	net.eval_mode = c.eval_mode;
	net.epsilon = c.epsilon;
	net.threads = c.threads;
	net.warmup_steps = c.warmup_steps;

	if (c.experiment == "table1") return experiment_table1(c.trials, rng, net);
	if (c.experiment == "table2") return experiment_table2(c.trials, rng, net);
	if (c.experiment == "table3") return experiment_table3(c.trials, rng, net);
	if (c.experiment == "table4") return experiment_table4(c.trials, rng, net);
	if (c.experiment == "sigmoid-decay") return experiment_sigmoid_decay();
	throw UsageError("unknown experiment '" + c.experiment + "'");
}

std::vector<ResultRecord> collect(const RunConfig& c) { return to_records(run_experiments(c), c.seed); }

std::string to_csv(const std::vector<ResultRecord>& records) {
	std::string out = kCsvHeader;
	out += '\n';
	for (const auto& r : records) {
		out += csv_field(r.experiment) + ',' + csv_field(r.metric) + ',' + format_double(r.mean) + ',' +
		       format_double(r.std) + ',' + std::to_string(r.trials) + ',' + std::to_string(r.seed) + ',';
		if (r.passed) out += *r.passed ? "true" : "false";
		out += '\n';
	}
	return out;
}

std::string to_json(const std::vector<ResultRecord>& records) {
	nlohmann::ordered_json arr = nlohmann::ordered_json::array();
	for (const auto& r : records) {
		nlohmann::ordered_json o;
		o["experiment"] = r.experiment;
		o["metric"] = r.metric;
		o["mean"] = r.mean;
		o["std"] = r.std;
		o["trials"] = r.trials;
		o["seed"] = r.seed;
		o["passed"] = r.passed ? nlohmann::ordered_json(*r.passed) : nlohmann::ordered_json(nullptr);
		arr.push_back(std::move(o));
	}
	return arr.dump(2) + "\n";
}

std::vector<ResultRecord> parse_csv(const std::string& text) {
	const auto rows = split_csv(text);
	if (rows.empty()) throw std::invalid_argument("parse_csv: missing header");
	std::string header;
	for (std::size_t i = 0; i < rows[0].size(); ++i) header += (i ? "," : "") + rows[0][i];
	if (header != kCsvHeader) throw std::invalid_argument("parse_csv: unexpected header '" + header + "'");

	std::vector<ResultRecord> out;
	for (std::size_t i = 1; i < rows.size(); ++i) {
		const auto& f = rows[i];
		if (f.size() != 7) throw std::invalid_argument("parse_csv: row " + std::to_string(i) + " has wrong field count");
		out.push_back({f[0], f[1], parse_double(f[2]), parse_double(f[3]), parse_unsigned<std::size_t>(f[4]),
		               parse_unsigned<std::uint64_t>(f[5]), parse_passed(f[6])});
	}
	return out;
}

std::vector<ResultRecord> parse_json(const std::string& text) {
	const auto arr = nlohmann::json::parse(text);
	if (!arr.is_array()) throw std::invalid_argument("parse_json: expected an array");
	const auto num = [](const nlohmann::json& v) {
		return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
	};
	std::vector<ResultRecord> out;
	for (const auto& o : arr) {
		ResultRecord r{o.at("experiment").get<std::string>(), o.at("metric").get<std::string>(), num(o.at("mean")),
		               num(o.at("std")), o.at("trials").get<std::size_t>(), o.at("seed").get<std::uint64_t>(),
		               std::nullopt};
		if (!o.at("passed").is_null()) r.passed = o.at("passed").get<bool>();
		out.push_back(std::move(r));
	}
	return out;
}

std::string resolve_output(const std::string& path) {
	if (path.empty()) return path;
	const char* dir = std::getenv(kOutputDirEnv);
	if (!dir || !*dir || std::filesystem::path(path).is_absolute()) return path;
	return (std::filesystem::path(dir) / path).string();
}

void emit(const std::vector<ResultRecord>& records, Format format, const std::string& path, std::ostream& out) {
	const std::string text = format == Format::Csv ? to_csv(records) : to_json(records);
	if (path.empty()) {
		out << text;
		out.flush();
		if (!out) throw IoError("failed writing results to stdout");
		return;
	}
	std::ofstream file(path, std::ios::binary | std::ios::trunc);
	if (!file) throw IoError("cannot open '" + path + "' for writing");
	file.write(text.data(), static_cast<std::streamsize>(text.size()));
	file.close();
	if (!file) throw IoError("failed writing '" + path + "'");
}

int run(const RunConfig& config, std::ostream& out, std::ostream& err) {
	std::vector<ResultRecord> records;
	try {
		records = collect(config);
	} catch (const UsageError& e) {
		err << "usage error: " << e.what() << '\n';
		return kExitUsage;
	} catch (const DomainError& e) {
		err << "invalid configuration: " << e.what() << '\n';
		return kExitUsage;
	}

	try {
		emit(records, config.format, resolve_output(config.output), out);
	} catch (const IoError& e) {
		err << "I/O error: " << e.what() << '\n';
		return kExitIo;
	}

	int code = kExitOk;
	for (const auto& r : records) {
		if (r.passed == false) {
			err << "FAILED " << r.experiment << ' ' << r.metric << " mean=" << format_double(r.mean) << '\n';
			code = kExitAssertion;
		}
	}
	return code;
}

int main_entry(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
	std::optional<RunConfig> config;
	try {
		config = parse_args(argc, argv, out);
	} catch (const UsageError& e) {
		err << "usage error: " << e.what() << "\nrun with --help for the list of options\n";
		return kExitUsage;
	}
	if (!config) return kExitOk;
	try {
		return run(*config, out, err);
	} catch (const std::exception& e) {
		err << "error: " << e.what() << '\n';
		return kExitAssertion;
	}
}

} // namespace bnblind::cli
