#include <gtest/gtest.h>

#include <sstream>

#include "fixtures.hpp"
#include "opdlab/cli.hpp"
#include "support.hpp"

using testsupport::slurp;
using testsupport::TempDir;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "opdlab");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = opdlab::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> train_args(const testsupport::TinyFixture& f, const std::string& algo,
                                    const std::filesystem::path& out) {
  return {"train", "--algo", algo, "--student", f.student.string(), "--dataset", f.dataset.string(), "--out",
          out.string(), "--set", "group_size=2", "--set", "prompts_per_step=1", "--set", "max_new_tokens=4"};
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_EQ(run({"--help"}).code, 0);
  TempDir dir("cli");
  auto f = testsupport::write_tiny_fixture(dir.path());
  for (const char* algo : {"tgpo", "rkl_opd", "kdrl"}) {
    auto r = run(train_args(f, algo, dir / "x"));
    EXPECT_EQ(r.code, 1) << algo;
    EXPECT_NE(r.err.find("--teacher"), std::string::npos) << r.err;
  }
  auto args = train_args(f, "grpo", dir / "x");
  args.push_back("--set");
  args.push_back("bogus=1");
  EXPECT_EQ(run(args).code, 1);
  EXPECT_EQ(run({"train", "--algo", "grpo", "--dataset", f.dataset.string()}).code, 1);
  EXPECT_FALSE(std::filesystem::exists(dir / "x"));
}

TEST(Cli, TrainWritesOneRecordPerStep) {
  TempDir dir("cli");
  auto f = testsupport::write_tiny_fixture(dir.path());
  auto args = train_args(f, "grpo", dir / "run");
  args.insert(args.end(), {"--steps", "5", "--seed", "3"});
  auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(opdlab::tasks::read_lines(dir / "run" / "metrics.jsonl").size(), 5u);
  EXPECT_NE(r.out.find("final mean_reward="), std::string::npos);
}

TEST(Cli, ConfigFileWithOverrides) {
  TempDir dir("cli");
  auto f = testsupport::write_tiny_fixture(dir.path());
  std::ofstream(dir / "c.json") << R"({"steps": 2, "group_size": 2, "prompts_per_step": 1, "max_new_tokens": 4})";
  auto r = run({"train", "--config", (dir / "c.json").string(), "--set", "steps=3", "--student", f.student.string(),
                "--dataset", f.dataset.string(), "--out", (dir / "run").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(opdlab::tasks::read_lines(dir / "run" / "metrics.jsonl").size(), 3u);
  EXPECT_EQ(run({"train", "--config", (dir / "missing.json").string()}).code, 1);
}

// The large-model schedule reaches zero at step 200 and stays there.
TEST(Cli, LargeModelScheduleReachesZeroAtStep200) {
  TempDir dir("cli");
  auto f = testsupport::write_tiny_fixture(dir.path());
  auto args = train_args(f, "tgpo", dir / "run");
  args.insert(args.end(), {"--teacher", f.teacher.string(), "--steps", "205", "--set", "w_init=2e-3", "--set",
                           "delta=1e-5", "--set", "max_new_tokens=1"});
  auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lines = opdlab::tasks::read_lines(dir / "run" / "metrics.jsonl");
  ASSERT_EQ(lines.size(), 205u);
  EXPECT_EQ(lines[0].at("guidance_weight").get<double>(), 2e-3);
  EXPECT_GT(lines[199].at("guidance_weight").get<double>(), 0.0);
  for (std::size_t s = 200; s < lines.size(); ++s) EXPECT_EQ(lines[s].at("guidance_weight").get<double>(), 0.0);
}

TEST(Cli, AnalyzeRkl) {
  TempDir dir("cli");
  auto r = run({"analyze-rkl", "--out", dir.path().string(), "--epsilons", "1e-2,1e-4"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(slurp(dir / "second_moment.csv"));
  std::vector<std::string> lines;
  for (std::string l; std::getline(csv, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0], "epsilon,second_moment,ratio");
  EXPECT_EQ(lines[1].rfind("0.01,", 0), 0u);

  const auto summary = slurp(dir / "summary.txt");
  EXPECT_NE(summary.find("dual_gradient_agree=yes"), std::string::npos);
  const auto s = opdlab::cli::run_analysis({1e-2, 1e-4}, 0);
  EXPECT_LE(s.dual_gradient_max_abs_diff, 1e-10);
  EXPECT_LT(s.asymmetry.max_negative_reward, -10.0);
  EXPECT_LT(s.asymmetry.max_positive_reward, 1.0);
}

TEST(Cli, AnalyzeRklDefaultsAndBadEpsilons) {
  TempDir dir("cli");
  ASSERT_EQ(run({"analyze-rkl", "--out", dir.path().string()}).code, 0);
  EXPECT_EQ(slurp(dir / "second_moment.csv").rfind("epsilon,second_moment,ratio\n", 0), 0u);
  for (const char* bad : {"", "abc", "1e-2,,1e-4", "0", "-1e-3", "0.5", "1e-2,x"}) {
    EXPECT_EQ(run({"analyze-rkl", "--out", (dir / "bad").string(), "--epsilons", bad}).code, 1) << bad;
  }
}

TEST(Cli, PlotErrors) {
  TempDir dir("cli");
  EXPECT_EQ(run({"plot", (dir / "nope.jsonl").string(), "--out", (dir / "a.svg").string()}).code, 2);
  std::ofstream(dir / "empty.jsonl").close();
  EXPECT_EQ(run({"plot", (dir / "empty.jsonl").string(), "--out", (dir / "a.svg").string()}).code, 2);
  EXPECT_EQ(run({"plot", "--out", (dir / "a.svg").string()}).code, 1);
}

TEST(Cli, MakeTaskAndTeacherAndEval) {
  TempDir dir("cli");
  auto r = run({"make-task", "--out", (dir / "task").string(), "--set", "n_train=30", "--set", "n_heldout=10"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(opdlab::tasks::read_lines(dir / "task" / "train.jsonl").size(), 30u);
  EXPECT_EQ(opdlab::tasks::read_lines(dir / "task" / "heldout.jsonl").size(), 10u);
  for (const char* c : {"student_format", "in_family", "cross_family"})
    EXPECT_TRUE(std::filesystem::exists(dir / "task" / "corpora" / (std::string(c) + ".jsonl")));
  EXPECT_EQ(run({"make-task", "--out", (dir / "t2").string(), "--set", "operand_lo=50", "--set", "operand_hi=10"}).code,
            1);

  r = run({"train-teacher", "--corpus", (dir / "task" / "corpora" / "cross_family.jsonl").string(), "--out",
           (dir / "teacher").string(), "--freeze", "--set", "steps=2", "--set", "embed_dim=8", "--set", "num_heads=2",
           "--set", "num_layers=1"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(nlohmann::json::parse(slurp(dir / "teacher" / "manifest.json")).at("frozen").get<bool>());

  r = run({"eval", "--student", (dir / "teacher").string(), "--dataset", (dir / "task" / "heldout.jsonl").string(),
           "--k", "2", "--max-new", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("k").get<int>(), 2);
  EXPECT_GE(j.at("accuracy_avg_at_k").get<double>(), 0.0);
  EXPECT_LE(j.at("mean_length").get<double>(), 4.0);
  EXPECT_EQ(run({"eval", "--student", (dir / "nothing").string(), "--dataset", (dir / "task" / "heldout.jsonl").string()}).code, 2);
  EXPECT_EQ(run({"eval", "--student", (dir / "teacher").string(), "--dataset", (dir / "nothing.jsonl").string()}).code, 1);
}
