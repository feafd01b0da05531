#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "ducisc/cli.hpp"
#include "test_support.hpp"

using namespace ducisc;
using namespace ducisc::testing;

namespace {

struct Outcome {
    int code;
    std::string err;
};

Outcome invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "ducisc");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), err);
    return {code, err.str()};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Cli, MissingVerbIsUsageError) {
    const auto r = invoke({});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("gen-data"), std::string::npos);
}

TEST(Cli, UnknownFlagIsUsageError) {
    TempDir dir("cli_flag");
    const auto r = invoke({"gen-data", "--out", dir.path().string(), "--bogus", "3"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("--bogus"), std::string::npos);
}

TEST(Cli, ValidationFailureExitsWithOne) {
    TempDir dir("cli_invalid");
    EXPECT_EQ(invoke({"gen-data", "--out", (dir.path() / "c").string(), "--n", "5", "--quiet"}).code, 1);
    EXPECT_EQ(invoke({"gen-data", "--out", (dir.path() / "d").string(), "--shape", "64", "--quiet"}).code, 1);
}

TEST(Cli, RuntimeFailureExitsWithTwo) {
    TempDir dir("cli_runtime");
    const auto r = invoke({"evaluate", "--checkpoint", (dir.path() / "none.ckpt").string(), "--corpus",
                           (dir.path() / "nowhere").string(), "--out", (dir.path() / "e").string(), "--quiet"});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("error:"), std::string::npos);
}

TEST(Cli, GenerateTrainEvaluatePipeline) {
    TempDir dir("cli_pipeline");
    const auto corpus = (dir.path() / "corpus").string();
    const auto run = (dir.path() / "run").string();
    ASSERT_EQ(invoke({"gen-data", "--out", corpus, "--n", "24", "--shape", "16x16", "--labeled-fraction", "0.25",
                      "--test-fraction", "0.25", "--quiet"})
                  .code,
              0);
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "corpus" / "manifest.json"));

    ASSERT_EQ(invoke({"train", "--corpus", corpus, "--out", run, "--max-iters", "3", "--patch-shape", "8x8", "--levels", "2",
                      "--base-width", "2", "--quiet"})
                  .code,
              0);
    for (const char* f : {"last.ckpt", "runlog.csv", "thresholds.csv", "summary.json", "config.json", "command.txt"})
        EXPECT_TRUE(std::filesystem::exists(dir.path() / "run" / f)) << f;
    EXPECT_NE(slurp(dir.path() / "run" / "command.txt").find("--max-iters"), std::string::npos);

    const auto ev = (dir.path() / "eval").string();
    ASSERT_EQ(invoke({"evaluate", "--checkpoint", run, "--corpus", corpus, "--out", ev, "--quiet"}).code, 0);
    const auto csv = slurp(dir.path() / "eval" / "eval.csv");
    EXPECT_EQ(csv.rfind("case_id,class,dice,jaccard,hd95,asd\n", 0), 0u);
    EXPECT_NE(csv.find("\nmean,all,"), std::string::npos);

    const auto ma = (dir.path() / "match").string();
    ASSERT_EQ(invoke({"matching", "--checkpoint", run, "--corpus", corpus, "--out", ma, "--quiet"}).code, 0);
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "match" / "matching_M.bin"));
    const auto j = nlohmann::json::parse(slurp(dir.path() / "match" / "matching.json"));
    EXPECT_GT(j.at("Q").get<double>(), 0.0);
    EXPECT_LE(j.at("Q").get<double>(), 1.0);
}

TEST(Cli, TrainRejectsConfigWithUnknownKey) {
    TempDir dir("cli_config");
    const auto corpus = (dir.path() / "corpus").string();
    ASSERT_EQ(invoke({"gen-data", "--out", corpus, "--n", "12", "--shape", "16x16", "--quiet"}).code, 0);
    std::ofstream(dir.path() / "bad.json") << R"({"lambda9": 1.0})";
    const auto r = invoke({"train", "--corpus", corpus, "--config", (dir.path() / "bad.json").string(), "--out",
                           (dir.path() / "run").string(), "--quiet"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("lambda9"), std::string::npos);
}

TEST(Cli, HelpSucceeds) { EXPECT_EQ(invoke({"--help"}).code, 0); }
