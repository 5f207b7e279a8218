#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "armformer/cli.hpp"
#include "armformer/config.hpp"
#include "armformer/datapipe.hpp"
#include "armformer/model.hpp"
#include "armformer/profiler.hpp"

namespace fs = std::filesystem;
using namespace armformer;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("armformer_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    RunConfig cfg;
    cfg.model = ModelConfig::reduced();
    cfg.train.steps = 4;
    cfg.train.batch_size = 4;
    cfg.train.eval_every = 2;
    std::ofstream(dir_ / "run.cfg") << format_run_config(cfg);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void synth_and_train() {
    ASSERT_EQ(run({"synth", "--out", path("data"), "--n", "12", "--size", "64", "--seed", "0"}).code, 0);
    auto r = run({"train", "--config", path("run.cfg"), "--data", path("data"), "--out", path("m.ckpt")});
    ASSERT_EQ(r.code, 0) << r.err;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, NoArgumentsPrintsUsage) {
  auto r = run({});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("synth"), std::string::npos);
  EXPECT_NE(r.err.find("gradcheck"), std::string::npos);
}

TEST_F(CliTest, HelpIsSuccess) {
  auto r = run({"--help"});
  EXPECT_EQ(r.code, cli::kExitOk);
  EXPECT_NE(r.out.find("Usage"), std::string::npos);
}

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(run({"synth"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"synth", "--out", path("d"), "--bogus"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"gradcheck", "--level", "medium"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"eval", "--ckpt", "x"}).code, cli::kExitUsage);
  auto r = run({"synth", "--out", path("d"), "--n", "abc"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST_F(CliTest, SynthWritesDatasetContract) {
  auto r = run({"synth", "--out", path("data"), "--n", "20", "--size", "32", "--seed", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  DatasetLayout layout{path("data")};
  EXPECT_EQ(read_split(layout, "train").size(), 16u);
  EXPECT_EQ(read_split(layout, "val").size(), 2u);
  EXPECT_EQ(read_split(layout, "test").size(), 2u);
  EXPECT_TRUE(fs::exists(layout.image_path("0019")));
  EXPECT_TRUE(fs::exists(layout.mask_path("0019")));
  auto expected = synth_dataset(3, 20, 32);
  auto loaded = load_split(layout, "test", 32);
  EXPECT_EQ(loaded[1].labels, expected[19].labels);
}

TEST_F(CliTest, SynthValidation) {
  EXPECT_EQ(run({"synth", "--out", path("a"), "--n", "0"}).code, cli::kExitValidation);
  EXPECT_EQ(run({"synth", "--out", path("a"), "--n", "2", "--size", "50"}).code, cli::kExitValidation);
  std::ofstream(path("file")) << "x";
  EXPECT_EQ(run({"synth", "--out", path("file"), "--n", "2"}).code, cli::kExitIo);
}

TEST_F(CliTest, TrainEvalInferPipeline) {
  synth_and_train();
  auto log = slurp(path("m.ckpt.log"));
  EXPECT_NE(log.find("step=4 loss="), std::string::npos);
  EXPECT_NE(log.find("val_miou="), std::string::npos);
  EXPECT_NO_THROW(checkpoint_load(read_file_bytes(path("m.ckpt")), ModelConfig::reduced()));

  auto e = run({"eval", "--ckpt", path("m.ckpt"), "--data", path("data"), "--split", "test", "--format", "kv"});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_NE(e.out.find("miou="), std::string::npos);
  EXPECT_NE(e.out.find("samples=1\n"), std::string::npos);
  auto t = run({"eval", "--ckpt", path("m.ckpt"), "--data", path("data"), "--split", "train", "--no-background"});
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_NE(t.out.find("mean(fg)"), std::string::npos);

  DatasetLayout layout{path("data")};
  auto i1 = run({"infer", "--ckpt", path("m.ckpt"), "--image", layout.image_path("0000"), "--out", path("a.pgm")});
  auto i2 = run({"infer", "--ckpt", path("m.ckpt"), "--image", layout.image_path("0000"), "--out", path("b.pgm")});
  ASSERT_EQ(i1.code, 0) << i1.err;
  ASSERT_EQ(i2.code, 0);
  EXPECT_EQ(slurp(path("a.pgm")), slurp(path("b.pgm")));
  auto mask = read_pgm(path("a.pgm"));
  EXPECT_EQ(mask.width, 64);
  const std::set<int> palette{0, 51, 102, 153, 204, 255};
  for (auto b : mask.pixels) ASSERT_TRUE(palette.count(b)) << int(b);
}

TEST_F(CliTest, InferResizesToImageDimensions) {
  synth_and_train();
  auto s = synth_dataset(9, 1, 32)[0];
  write_ppm(path("small.ppm"), tensor_to_raster(s.image));
  auto r = run({"infer", "--ckpt", path("m.ckpt"), "--image", path("small.ppm"), "--out", path("small.pgm")});
  ASSERT_EQ(r.code, 0) << r.err;
  auto mask = read_pgm(path("small.pgm"));
  EXPECT_EQ(mask.width, 32);
  EXPECT_EQ(mask.height, 32);
}

TEST_F(CliTest, TrainingIsDeterministic) {
  synth_and_train();
  auto r = run({"train", "--config", path("run.cfg"), "--data", path("data"), "--out", path("m2.ckpt")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(path("m.ckpt")), slurp(path("m2.ckpt")));
  EXPECT_EQ(slurp(path("m.ckpt.log")), slurp(path("m2.ckpt.log")));
  auto r3 = run({"train", "--config", path("run.cfg"), "--data", path("data"), "--out", path("m3.ckpt"), "--seed", "5"});
  ASSERT_EQ(r3.code, 0);
  EXPECT_NE(slurp(path("m.ckpt.log")), slurp(path("m3.ckpt.log")));
}

TEST_F(CliTest, IoAndValidationExitCodes) {
  EXPECT_EQ(run({"train", "--config", path("missing.cfg"), "--data", path("."), "--out", path("m")}).code, cli::kExitIo);
  EXPECT_EQ(run({"train", "--config", path("run.cfg"), "--data", path("nodata"), "--out", path("m")}).code,
            cli::kExitIo);
  std::ofstream(path("bad.cfg")) << "model.nonsense = 3\n";
  ASSERT_EQ(run({"synth", "--out", path("data"), "--n", "3"}).code, 0);
  EXPECT_EQ(run({"train", "--config", path("bad.cfg"), "--data", path("data"), "--out", path("m")}).code,
            cli::kExitValidation);
  EXPECT_EQ(run({"train", "--config", path("run.cfg"), "--data", path("data"), "--out", path("no/such/m")}).code,
            cli::kExitIo);

  std::ofstream(path("junk.ckpt")) << "not a checkpoint";
  auto r = run({"eval", "--ckpt", path("junk.ckpt"), "--data", path("data"), "--split", "train"});
  EXPECT_EQ(r.code, cli::kExitIo);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
  EXPECT_EQ(run({"infer", "--ckpt", path("junk.ckpt"), "--image", path("none.ppm"), "--out", path("o.pgm")}).code,
            cli::kExitIo);
}

TEST_F(CliTest, BenchReportsComplexity) {
  auto r = run({"bench", "--config", path("run.cfg"), "--no-speed", "--format", "kv"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto m = Model::create(ModelConfig::reduced());
  EXPECT_NE(r.out.find("params=" + std::to_string(m.parameters().total_elements()) + "\n"), std::string::npos);
  EXPECT_NE(r.out.find("flops=" + std::to_string(count_flops(m, 64, 64).total_flops) + "\n"), std::string::npos);

  auto s = run({"bench", "--config", path("run.cfg"), "--iters", "10", "--warmup", "1"});
  ASSERT_EQ(s.code, 0) << s.err;
  EXPECT_NE(s.out.find("FPS"), std::string::npos);
  EXPECT_NE(s.out.find("host:"), std::string::npos);
  EXPECT_EQ(run({"bench", "--config", path("run.cfg"), "--iters", "5"}).code, cli::kExitValidation);
}

TEST_F(CliTest, BenchRejectsMismatchedCheckpoint) {
  synth_and_train();
  RunConfig other;
  std::ofstream(path("default.cfg")) << format_run_config(other);
  EXPECT_EQ(run({"bench", "--config", path("default.cfg"), "--ckpt", path("m.ckpt"), "--no-speed"}).code,
            cli::kExitValidation);
  EXPECT_EQ(run({"bench", "--config", path("run.cfg"), "--ckpt", path("m.ckpt"), "--no-speed"}).code, cli::kExitOk);
}

TEST_F(CliTest, GradcheckQuickPasses) {
  auto r = run({"gradcheck", "--level", "quick"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("gradient checks passed"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}
