// End-to-end checks of the dkt-lab binary (path supplied via DKT_LAB_BIN).

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

std::string bin_path() {
  const char* env = std::getenv("DKT_LAB_BIN");
  if (!env) throw std::runtime_error("DKT_LAB_BIN not set");
  return env;
}

struct RunResult {
  int exit_code;
  std::string output;
};

RunResult run(const std::string& args, const fs::path& dir) {
  const fs::path log = dir / "cmd.log";
  const std::string cmd = bin_path() + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult result;
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream buf;
  buf << in.rdbuf();
  result.output = buf.str();
  return result;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

long count_lines(const std::string& text) {
  long n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("dktlab_cli_" + std::string(::testing::UnitTest::GetInstance()
                                            ->current_test_info()
                                            ->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, TrainWritesCheckpointAndTrace) {
  RunResult r = run("train --experiment sine-regression --method dkt --kernel spectral "
                    "--iterations 100 --seed 1 --trace --out " + dir_.string(),
                    dir_);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  const fs::path ckpt = dir_ / "ckpt_sine-regression_dkt_spectral_s1.txt";
  const fs::path trace = dir_ / "ckpt_sine-regression_dkt_spectral_s1_trace.csv";
  EXPECT_TRUE(fs::exists(ckpt));
  ASSERT_TRUE(fs::exists(trace));
  const std::string text = slurp(trace);
  EXPECT_EQ(count_lines(text), 102);  // provenance + header + 100 rows
  EXPECT_EQ(text.rfind("# dkt-lab", 0), 0u);
  EXPECT_NE(r.output.find("final loss"), std::string::npos);
  EXPECT_NE(r.output.find("wall time"), std::string::npos);
}

TEST_F(CliTest, UnknownKernelExitsTwoAndListsValid) {
  RunResult r = run("train --kernel nosuch --iterations 1 --out " + dir_.string(), dir_);
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("spectral"), std::string::npos);
  EXPECT_NE(r.output.find("bncossim"), std::string::npos);
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run("", dir_).exit_code, 2);                       // missing subcommand
  EXPECT_EQ(run("eval --mode sideways", dir_).exit_code, 2);   // bad mode
  EXPECT_EQ(run("train --method dk-baseline --out " + dir_.string(), dir_).exit_code, 2);
  EXPECT_EQ(run("--help", dir_).exit_code, 0);
}

TEST_F(CliTest, IdenticalConfigsGiveIdenticalArtifacts) {
  const std::string args = "train --experiment sine-regression --kernel rbf --iterations 150 "
                           "--seed 7 --trace --out ";
  ASSERT_EQ(run(args + (dir_ / "a").string(), dir_).exit_code, 0);
  ASSERT_EQ(run(args + (dir_ / "b").string(), dir_).exit_code, 0);
  EXPECT_EQ(slurp(dir_ / "a/ckpt_sine-regression_dkt_rbf_s7.txt"),
            slurp(dir_ / "b/ckpt_sine-regression_dkt_rbf_s7.txt"));
  EXPECT_EQ(slurp(dir_ / "a/ckpt_sine-regression_dkt_rbf_s7_trace.csv"),
            slurp(dir_ / "b/ckpt_sine-regression_dkt_rbf_s7_trace.csv"));
}

TEST_F(CliTest, EvalAggregatesOverThreeRuns) {
  std::vector<std::string> ckpts;
  for (int seed : {1, 2, 3}) {
    ASSERT_EQ(run("train --kernel rbf --iterations 60 --seed " + std::to_string(seed) +
                      " --out " + dir_.string(),
                  dir_)
                  .exit_code,
              0);
    ckpts.push_back((dir_ / ("ckpt_sine-regression_dkt_rbf_s" + std::to_string(seed) + ".txt"))
                        .string());
  }
  std::string args = "eval --experiment sine-regression --method dkt --kernel rbf "
                     "--mode in-range --n-tasks 20 --out " + dir_.string();
  for (const std::string& c : ckpts) args += " --checkpoint " + c;
  RunResult r = run(args, dir_);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  const std::string csv = slurp(dir_ / "results.csv");
  EXPECT_NE(csv.find("row_type,seed,metric,value,n_tasks"), std::string::npos);
  EXPECT_NE(csv.find("run,1,mse,"), std::string::npos);
  EXPECT_NE(csv.find("run,2,mse,"), std::string::npos);
  EXPECT_NE(csv.find("run,3,mse,"), std::string::npos);
  EXPECT_NE(csv.find("aggregate,,mse_mean,"), std::string::npos);
  // aggregate rows report the run count
  EXPECT_NE(csv.find(",3\n"), std::string::npos);
}

TEST_F(CliTest, PredictionsCsvHas200QueryRows) {
  ASSERT_EQ(run("train --kernel rbf --iterations 60 --seed 1 --out " + dir_.string(), dir_)
                .exit_code,
            0);
  const std::string ckpt = (dir_ / "ckpt_sine-regression_dkt_rbf_s1.txt").string();
  RunResult r = run("eval --experiment sine-regression --method dkt --kernel rbf --mode in-range "
                    "--n-tasks 5 --checkpoint " + ckpt + " --predictions " +
                    (dir_ / "pred.csv").string() + " --out " + dir_.string(),
                    dir_);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  const std::string csv = slurp(dir_ / "pred.csv");
  EXPECT_NE(csv.find("x,mean,variance,truth"), std::string::npos);
  EXPECT_EQ(count_lines(csv), 202);  // provenance + header + 200 query rows
}

TEST_F(CliTest, UntrainedModelLosesToTrainedModel) {
  ASSERT_EQ(run("train --kernel spectral --iterations 0 --seed 4 --out " +
                    (dir_ / "raw").string(),
                dir_)
                .exit_code,
            0);
  ASSERT_EQ(run("train --kernel spectral --iterations 2000 --seed 4 --out " +
                    (dir_ / "fit").string(),
                dir_)
                .exit_code,
            0);
  auto eval_mse = [&](const std::string& sub) {
    RunResult r = run("eval --experiment sine-regression --method dkt --kernel spectral "
                      "--mode in-range --n-tasks 60 --checkpoint " +
                          (dir_ / sub / "ckpt_sine-regression_dkt_spectral_s4.txt").string() +
                          " --out " + (dir_ / sub).string(),
                      dir_);
    EXPECT_EQ(r.exit_code, 0) << r.output;
    const std::string csv = slurp(dir_ / sub / "results.csv");
    const std::size_t pos = csv.find("aggregate,,mse_mean,");
    return std::stod(csv.substr(pos + 20));
  };
  const double untrained = eval_mse("raw");
  const double trained = eval_mse("fit");
  EXPECT_GT(untrained, trained);
}

TEST_F(CliTest, DumpTasksFeedsEval) {
  ASSERT_EQ(run("dump-tasks --experiment sine-regression --mode out-range --n-tasks 12 "
                "--seed 5 --file " + (dir_ / "tasks.txt").string(),
                dir_)
                .exit_code,
            0);
  const std::string dump = slurp(dir_ / "tasks.txt");
  EXPECT_EQ(count_lines(dump), 13);  // provenance + 12 records
  ASSERT_EQ(run("train --kernel rbf --iterations 40 --seed 1 --out " + dir_.string(), dir_)
                .exit_code,
            0);
  RunResult r = run("eval --experiment sine-regression --method dkt --kernel rbf "
                    "--mode out-range --tasks-file " + (dir_ / "tasks.txt").string() +
                    " --checkpoint " + (dir_ / "ckpt_sine-regression_dkt_rbf_s1.txt").string() +
                    " --out " + dir_.string(),
                    dir_);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_NE(slurp(dir_ / "results.csv").find(",12\n"), std::string::npos);
}

TEST_F(CliTest, EnvSeedFallback) {
  const fs::path log = dir_ / "cmd.log";
  const std::string cmd = "DKTLAB_SEED=6 " + bin_path() +
                          " train --kernel rbf --iterations 5 --out " + dir_.string() + " > " +
                          log.string() + " 2>&1";
  ASSERT_EQ(WEXITSTATUS(std::system(cmd.c_str())), 0);
  EXPECT_TRUE(fs::exists(dir_ / "ckpt_sine-regression_dkt_rbf_s6.txt"));
}

TEST_F(CliTest, LatentVarianceFlagDropsNoise) {
  ASSERT_EQ(run("train --kernel rbf --iterations 30 --seed 1 --out " + dir_.string(), dir_)
                .exit_code,
            0);
  const std::string ckpt = (dir_ / "ckpt_sine-regression_dkt_rbf_s1.txt").string();
  auto first_variance = [&](const std::string& flag, const std::string& name) {
    RunResult r = run("eval --experiment sine-regression --method dkt --kernel rbf "
                      "--mode in-range --n-tasks 2 --checkpoint " + ckpt + " --predictions " +
                          (dir_ / name).string() + " " + flag + " --out " + dir_.string(),
                      dir_);
    EXPECT_EQ(r.exit_code, 0) << r.output;
    std::ifstream in(dir_ / name);
    std::string line;
    std::getline(in, line);  // provenance
    std::getline(in, line);  // header
    std::getline(in, line);  // first row
    // variance is the third comma-separated column
    std::size_t p1 = line.find(','), p2 = line.find(',', p1 + 1);
    std::size_t p3 = line.find(',', p2 + 1);
    return std::stod(line.substr(p2 + 1, p3 - p2 - 1));
  };
  const double predictive = first_variance("", "pred.csv");
  const double latent = first_variance("--latent", "latent.csv");
  EXPECT_GT(predictive, latent);  // observation noise included only in the former
}

TEST_F(CliTest, GradcheckPassesAndIsDeterministic) {
  RunResult a = run("gradcheck --seed 11", dir_);
  RunResult b = run("gradcheck --seed 11", dir_);
  EXPECT_EQ(a.exit_code, 0);
  EXPECT_EQ(a.output, b.output);
  EXPECT_NE(a.output.find("max_rel_err"), std::string::npos);
  EXPECT_NE(a.output.find("all checks passed"), std::string::npos);
}

TEST_F(CliTest, CalibrateRejectsBadInputs) {
  ASSERT_EQ(run("train --kernel rbf --iterations 30 --seed 1 --out " + dir_.string(), dir_)
                .exit_code,
            0);
  const std::string reg_ckpt = (dir_ / "ckpt_sine-regression_dkt_rbf_s1.txt").string();
  EXPECT_EQ(run("calibrate --checkpoint " + reg_ckpt, dir_).exit_code, 2);

  ASSERT_EQ(run("train --experiment synth-classification --iterations 50 --seed 2 --out " +
                    dir_.string(),
                dir_)
                .exit_code,
            0);
  const std::string clf_ckpt = (dir_ / "ckpt_synth-classification_dkt_bncossim_s2.txt").string();
  EXPECT_EQ(run("calibrate --checkpoint " + clf_ckpt + " --calib-seed 5 --test-seed 5", dir_)
                .exit_code,
            2);
  RunResult ok = run("calibrate --checkpoint " + clf_ckpt +
                         " --n-tasks 10 --calib-seed 5 --test-seed 6 --report " +
                         (dir_ / "cal.json").string(),
                     dir_);
  EXPECT_EQ(ok.exit_code, 0) << ok.output;
  const std::string json = slurp(dir_ / "cal.json");
  EXPECT_NE(json.find("\"seeds_disjoint\": true"), std::string::npos);
  EXPECT_NE(json.find("\"bin_count\": 15"), std::string::npos);
  EXPECT_NE(json.find("\"temperature\""), std::string::npos);
  // temperature fitting must not hurt ECE on the split it was fitted on
  auto field = [&](const std::string& key, std::size_t from) {
    const std::size_t pos = json.find(key, from);
    EXPECT_NE(pos, std::string::npos) << key;
    return std::stod(json.substr(pos + key.size()));
  };
  const std::size_t calib_at = json.find("\"calibration_split\"");
  const double before = field("\"ece_before\": ", calib_at);
  const double after = field("\"ece_after\": ", calib_at);
  EXPECT_LE(after, before + 1e-12);
}

TEST_F(CliTest, ClassificationEvalReadsTaskFiles) {
  ASSERT_EQ(run("train --experiment synth-classification --iterations 40 --seed 3 --out " +
                    dir_.string(),
                dir_)
                .exit_code,
            0);
  ASSERT_EQ(run("dump-tasks --experiment synth-classification --split test --n-tasks 8 "
                "--seed 4 --file " + (dir_ / "ctasks.txt").string(),
                dir_)
                .exit_code,
            0);
  RunResult r = run("eval --experiment synth-classification --checkpoint " +
                        (dir_ / "ckpt_synth-classification_dkt_bncossim_s3.txt").string() +
                        " --tasks-file " + (dir_ / "ctasks.txt").string() + " --out " +
                        dir_.string(),
                    dir_);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  const std::string csv = slurp(dir_ / "results.csv");
  EXPECT_NE(csv.find("run,3,accuracy,"), std::string::npos);
  EXPECT_NE(csv.find(",8\n"), std::string::npos);
}

TEST_F(CliTest, BenchmarkEmitsResultGrid) {
  RunResult r = run("benchmark --iterations 120 --seeds 1 --seeds 2 --n-tasks 10 --budget 5 "
                    "--workers 2 --out " + dir_.string(),
                    dir_);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  const std::string csv = slurp(dir_ / "benchmark.csv");
  EXPECT_NE(csv.find("method,kernel,mode,mse_mean,mse_std,runs"), std::string::npos);
  for (const char* row : {"dkt,spectral,in-range", "dkt,spectral,out-range", "dkt,rbf,in-range",
                          "feature-transfer/1,none,out-range", "feature-transfer/100,none,in-range",
                          "dk-baseline,rbf,out-range", "dk-baseline,spectral,in-range"})
    EXPECT_NE(csv.find(row), std::string::npos) << row;
}
