#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "bnblind/cli.hpp"

using namespace bnblind;
using namespace bnblind::cli;

namespace {

std::optional<RunConfig> parse(std::vector<const char*> args) {
	args.insert(args.begin(), "bnblind");
	std::ostringstream out;
	return parse_args(static_cast<int>(args.size()), args.data(), out);
}

int invoke(std::vector<const char*> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
	args.insert(args.begin(), "bnblind");
	std::ostringstream out;
	std::ostringstream err;
	const int code = main_entry(static_cast<int>(args.size()), args.data(), out, err);
	if (out_text) *out_text = out.str();
	if (err_text) *err_text = err.str();
	return code;
}

std::filesystem::path scratch_dir(const std::string& name) {
	const auto dir = std::filesystem::temp_directory_path() / ("bnblind_cli_" + name);
	std::filesystem::remove_all(dir);
	std::filesystem::create_directories(dir);
	return dir;
}

std::string slurp(const std::filesystem::path& p) {
	std::ifstream in(p, std::ios::binary);
	return {std::istreambuf_iterator<char>(in), {}};
}

ResultRecord sample_record() {
	return {"table1", "delta_grad_0", 2.85e-7, 0.1, 1000, 42, true};
}

} // namespace

TEST(ParseArgs, VerifyWithSeed) {
	const auto c = parse({"verify", "--seed", "7"});
	ASSERT_TRUE(c);
	EXPECT_EQ(c->command, Command::Verify);
	EXPECT_EQ(c->seed, 7u);
	EXPECT_EQ(c->dims, 8u);
	EXPECT_EQ(c->batch, 128u);
	EXPECT_EQ(c->trials, 100u);
	EXPECT_EQ(c->epsilon, 0.0);
	EXPECT_EQ(c->format, Format::Csv);
}

TEST(ParseArgs, ExperimentTrials) {
	const auto c = parse({"experiment", "table1", "--trials", "1000"});
	ASSERT_TRUE(c);
	EXPECT_EQ(c->command, Command::Experiment);
	EXPECT_EQ(c->experiment, "table1");
	EXPECT_EQ(c->trials, 1000u);
}

TEST(ParseArgs, AllFlags) {
	const auto c = parse({"experiment", "table3", "--dims", "4", "--batch", "16", "--bn-depth", "2", "--norm", "ln", "--mode",
	                      "eval", "--epsilon", "1e-5", "--format", "json", "--output", "x.json", "--threads", "3"});
	ASSERT_TRUE(c);
	EXPECT_EQ(c->dims, 4u);
	EXPECT_EQ(c->batch, 16u);
	EXPECT_EQ(c->bn_depth, 2u);
	EXPECT_EQ(c->norm, NormKind::Layer);
	EXPECT_TRUE(c->eval_mode);
	EXPECT_EQ(c->epsilon, 1e-5);
	EXPECT_EQ(c->format, Format::Json);
	EXPECT_EQ(c->output, "x.json");
	EXPECT_EQ(c->threads, 3u);
}

TEST(ParseArgs, UsageErrors) {
	EXPECT_THROW(parse({"experiment", "table9"}), UsageError);
	EXPECT_THROW(parse({"verify", "--bogus"}), UsageError);
	EXPECT_THROW(parse({"verify", "--dims", "1"}), UsageError);
	EXPECT_THROW(parse({"verify", "--batch", "1"}), UsageError);
	EXPECT_THROW(parse({"verify", "--trials", "0"}), UsageError);
	EXPECT_THROW(parse({"verify", "--epsilon", "-1"}), UsageError);
	EXPECT_THROW(parse({"verify", "--norm", "gn"}), UsageError);
	EXPECT_THROW(parse({"experiment"}), UsageError);
	EXPECT_THROW(parse({"verify", "table1"}), UsageError);
	EXPECT_THROW(parse({}), UsageError);
}

TEST(ParseArgs, HelpReturnsNothing) {
	std::ostringstream out;
	const char* argv[] = {"bnblind", "--help"};
	EXPECT_FALSE(parse_args(2, argv, out));
	EXPECT_NE(out.str().find("--seed"), std::string::npos);
}

TEST(ParseArgs, ConfigFileBelowFlags) {
	const auto dir = scratch_dir("config");
	const auto file = dir / "run.toml";
	std::ofstream(file) << "seed = 9\ntrials = 3\ndims = 5\n";
	const std::string path = file.string();
	const auto c = parse({"verify", "--config", path.c_str(), "--seed", "11"});
	ASSERT_TRUE(c);
	EXPECT_EQ(c->seed, 11u);
	EXPECT_EQ(c->trials, 3u);
	EXPECT_EQ(c->dims, 5u);
	EXPECT_EQ(c->batch, 128u);
}

TEST(Emit, EmptyList) {
	EXPECT_EQ(to_csv({}), "experiment,metric,mean,std,trials,seed,passed\n");
	EXPECT_EQ(to_json({}), "[]\n");
}

TEST(Emit, CsvRoundTrip) {
	const std::vector<ResultRecord> rs{sample_record(), {"verify", "m", -0.0, 1e300, 1, 0, std::nullopt},
	                                   {"table2", "x", 0.1, 3.0, 7, 18446744073709551615ull, false}};
	const auto back = parse_csv(to_csv(rs));
	ASSERT_EQ(back.size(), rs.size());
	for (std::size_t i = 0; i < rs.size(); ++i) EXPECT_TRUE(back[i].same_as(rs[i])) << i;
}

TEST(Emit, JsonRoundTrip) {
	const std::vector<ResultRecord> rs{sample_record(), {"verify", "m", 0.1, 0.2, 3, 5, std::nullopt}};
	const auto back = parse_json(to_json(rs));
	ASSERT_EQ(back.size(), rs.size());
	for (std::size_t i = 0; i < rs.size(); ++i) EXPECT_TRUE(back[i].same_as(rs[i])) << i;
}

TEST(Emit, ShortestDecimal) {
	EXPECT_EQ(format_double(2.85e-7), "2.85e-07");
	EXPECT_EQ(std::stod(format_double(2.85e-7)), 2.85e-7);
	EXPECT_EQ(format_double(0.1), "0.1");
	EXPECT_EQ(format_double(std::numeric_limits<double>::quiet_NaN()), "nan");
	const auto back = parse_csv(to_csv({sample_record()}));
	EXPECT_EQ(back.at(0).mean, 2.85e-7);
}

TEST(Emit, NanSurvivesBothFormats) {
	ResultRecord r = sample_record();
	r.mean = std::numeric_limits<double>::quiet_NaN();
	EXPECT_TRUE(parse_csv(to_csv({r})).at(0).same_as(r));
	EXPECT_TRUE(parse_json(to_json({r})).at(0).same_as(r));
	EXPECT_NE(to_json({r}).find("null"), std::string::npos);
}

TEST(Emit, CsvQuoting) {
	ResultRecord r = sample_record();
	r.metric = "a,\"b\"\nc";
	const std::string csv = to_csv({r});
	EXPECT_NE(csv.find("\"a,\"\"b\"\"\nc\""), std::string::npos);
	EXPECT_EQ(parse_csv(csv).at(0).metric, r.metric);
}

TEST(Emit, NoCarriageReturns) {
	const std::string csv = to_csv({sample_record(), sample_record()});
	EXPECT_EQ(csv.find('\r'), std::string::npos);
	EXPECT_EQ(to_json({sample_record()}).find('\r'), std::string::npos);
}

TEST(Emit, MalformedInputRejected) {
	EXPECT_ANY_THROW(parse_csv("wrong,header\n"));
	EXPECT_ANY_THROW(parse_json("{"));
}

TEST(Run, VerifyDefaultsExitZero) {
	std::string out;
	EXPECT_EQ(invoke({"verify"}, &out), kExitOk);
	EXPECT_EQ(out.rfind("experiment,metric,mean,std,trials,seed,passed\n", 0), 0u);
}

TEST(Run, Table1HasFourRows) {
	std::string out;
	EXPECT_EQ(invoke({"experiment", "table1", "--trials", "3", "--batch", "16"}, &out), kExitOk);
	const auto rows = parse_csv(out);
	ASSERT_EQ(rows.size(), 4u);
	for (std::size_t q = 0; q < 4; ++q) EXPECT_EQ(rows[q].metric, "delta_grad_" + std::to_string(q));
}

TEST(Run, ExitCodes) {
	std::string err;
	EXPECT_EQ(invoke({"experiment", "table9"}, nullptr, &err), kExitUsage);
	EXPECT_FALSE(err.empty());
	EXPECT_EQ(invoke({"verify", "--trials", "1", "--output", "/proc/definitely/not/here.csv"}, nullptr, &err), kExitIo);
	EXPECT_FALSE(err.empty());
	EXPECT_EQ(invoke({"experiment", "table1", "--trials", "2", "--batch", "8", "--norm", "ln"}, nullptr, &err),
	          kExitAssertion);
	EXPECT_NE(err.find("FAILED"), std::string::npos);
	EXPECT_EQ(invoke({"experiment", "table3", "--norm", "ln", "--trials", "1"}), kExitUsage);
}

TEST(Run, ByteIdenticalFiles) {
	const auto dir = scratch_dir("bytes");
	const std::string a = (dir / "a.json").string();
	const std::string b = (dir / "b.json").string();
	for (const std::string* p : {&a, &b})
		ASSERT_EQ(invoke({"experiment", "table2", "--trials", "4", "--batch", "16", "--format", "json", "--output", p->c_str()}),
		          kExitOk);
	EXPECT_EQ(slurp(a), slurp(b));
	EXPECT_FALSE(slurp(a).empty());
}

TEST(Run, SeedChangesOutput) {
	std::string a;
	std::string b;
	invoke({"experiment", "table2", "--trials", "2", "--batch", "16", "--seed", "1"}, &a);
	invoke({"experiment", "table2", "--trials", "2", "--batch", "16", "--seed", "2"}, &b);
	EXPECT_NE(a, b);
}

TEST(Run, OutputDirectoryOverride) {
	const auto dir = scratch_dir("env");
	::setenv(kOutputDirEnv, dir.c_str(), 1);
	EXPECT_EQ(resolve_output("r.csv"), (dir / "r.csv").string());
	EXPECT_EQ(resolve_output("/abs/r.csv"), "/abs/r.csv");
	EXPECT_EQ(resolve_output(""), "");
	EXPECT_EQ(invoke({"experiment", "sigmoid-decay", "--output", "r.csv"}), kExitOk);
	::unsetenv(kOutputDirEnv);
	EXPECT_EQ(parse_csv(slurp(dir / "r.csv")).size(), 25u);
	EXPECT_EQ(resolve_output("r.csv"), "r.csv");
}
