// SPDX-License-Identifier: Apache-2.0

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#ifndef RELLAX_CLI_PATH
#define RELLAX_CLI_PATH "rellax"
#endif

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(RELLAX_CLI_PATH) + " " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> echo_lines(const fs::path& p) {
  std::map<std::string, std::string> m;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) m[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return m;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("rellax_cli_test_" + std::to_string(getpid()));
    fs::create_directories(root_);
    std::ofstream c(root_ / "small.toml");
    c << "users = 60\nitems = 40\nmin-events = 12\nmax-events = 16\n"
         "crm-embed-dim = 4\ncrm-hidden-dim = 8\ncrm-epochs = 2\n"
         "lm-dim = 16\nlm-ffn = 32\nlm-context = 256\nlm-epochs = 1\nlm-prompts = 20\n"
         "d-q = 8\nprojector-hidden = 8\nspa-hidden = 8\n"
         "shots = 40\nepochs = 1\ntest-limit = 30\n";
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static std::string small(const std::string& out) {
    return "--config " + (root_ / "small.toml").string() + " --out " + (root_ / out).string();
  }

  static fs::path root_;
};

fs::path Cli::root_;

TEST_F(Cli, UnknownFlagIsUsageError) {
  const Result r = run("train --no-such-flag 3");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("no-such-flag"), std::string::npos);
}

TEST_F(Cli, UnknownOrMissingSubcommandIsUsageError) {
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("--seed 3").code, 2);
}

TEST_F(Cli, HelpExitsZero) {
  const Result r = run("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("heterogeneity"), std::string::npos);
}

TEST_F(Cli, SelftestPasses) {
  const Result r = run("selftest");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("selftest: all checks passed"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

TEST_F(Cli, BadVariantIsContractFailure) {
  const Result r = run(small("bad") + " --variant gpt train");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("gpt"), std::string::npos);
}

TEST_F(Cli, EvalWithoutTrainingNamesTheFix) {
  const Result r = run(small("untrained") + " eval");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("run train first"), std::string::npos);
}

TEST_F(Cli, FlagsOverrideConfigAndEchoIsAReusableConfig) {
  const Result r = run(small("ingest") + " --users 70 ingest");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto echo = echo_lines(root_ / "ingest" / "config.echo");
  EXPECT_EQ(echo.at("users"), "70");
  EXPECT_EQ(echo.at("items"), "40");
  EXPECT_TRUE(fs::exists(root_ / "ingest" / "samples.tsv"));

  // Feeding the echo back reproduces it exactly.
  const std::string first = slurp(root_ / "ingest" / "config.echo");
  const Result again = run("--config " + (root_ / "ingest" / "config.echo").string() + " ingest");
  ASSERT_EQ(again.code, 0) << again.out;
  EXPECT_EQ(slurp(root_ / "ingest" / "config.echo"), first);
}

TEST_F(Cli, HeterogeneityRetrievedNotAboveRecent) {
  const Result recent = run(small("het") + " heterogeneity --mode recent --k 5");
  ASSERT_EQ(recent.code, 0) << recent.out;
  const Result retrieved = run(small("het") + " heterogeneity --mode retrieved --k 5");
  ASSERT_EQ(retrieved.code, 0) << retrieved.out;
  auto mean_of = [](const std::string& out) {
    std::istringstream in(out);
    std::string tag, mode, k, mean;
    in >> tag >> mode >> k >> mean;
    EXPECT_EQ(tag, "heterogeneity");
    return std::stod(mean);
  };
  EXPECT_LE(mean_of(retrieved.out), mean_of(recent.out));
  // Both rows land in one file.
  const std::string tsv = slurp(root_ / "het" / "heterogeneity.tsv");
  EXPECT_NE(tsv.find("recent\t5"), std::string::npos);
  EXPECT_NE(tsv.find("retrieved\t5"), std::string::npos);
}

TEST_F(Cli, VariantsDifferOnlyInVariantSettings) {
  ASSERT_EQ(run(small("v1") + " --variant identity-W train").code, 0);
  ASSERT_EQ(run(small("v2") + " --variant rella train").code, 0);
  auto a = echo_lines(root_ / "v1" / "config.echo");
  auto b = echo_lines(root_ / "v2" / "config.echo");
  std::set<std::string> differing;
  for (const auto& [k, v] : a)
    if (k != "out" && b[k] != v) differing.insert(k);
  EXPECT_EQ(differing, (std::set<std::string>{"variant", "subr"}));
}

TEST_F(Cli, RerunIsByteIdentical) {
  ASSERT_EQ(run(small("r1") + " train").code, 0);
  ASSERT_EQ(run(small("r1") + " eval --sweep-l 8,16").code, 0);
  ASSERT_EQ(run(small("r2") + " train").code, 0);
  ASSERT_EQ(run(small("r2") + " eval --sweep-l 8,16").code, 0);
  for (const char* f : {"metrics.tsv", "digests.txt", "loss.tsv", "eval.jsonl"})
    EXPECT_EQ(slurp(root_ / "r1" / f), slurp(root_ / "r2" / f)) << f;
  const std::string metrics = slurp(root_ / "r1" / "metrics.tsv");
  EXPECT_NE(metrics.find("train\trellax\tnone"), std::string::npos);
  EXPECT_NE(metrics.find("eval\trellax\tl_id\t8"), std::string::npos);
  EXPECT_NE(metrics.find("eval\trellax\tl_id\t16"), std::string::npos);
}

TEST_F(Cli, ChangedSettingsInvalidateTrainedParts) {
  ASSERT_EQ(run(small("stale") + " train").code, 0);
  const Result r = run(small("stale") + " --rank 2 eval");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("different settings"), std::string::npos);
}

TEST_F(Cli, CaseStudyWritesAttentionRows) {
  const Result r = run(small("case") + " case-study --zero-shot --samples 2");
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string tsv = slurp(root_ / "case" / "attention.tsv");
  EXPECT_NE(tsv.find("\ttarget\t"), std::string::npos);
  EXPECT_NE(tsv.find("\thistory\t"), std::string::npos);
}

}  // namespace
