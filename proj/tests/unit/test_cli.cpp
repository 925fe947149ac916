#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "commands.hpp"
#include "tomoforge/checkpoint.hpp"

namespace fs = std::filesystem;
using namespace tomoforge;
using tomoforge::cli::run_cli;

namespace {

const char* kTiny = R"([geometry]
image_size = 32
n_angles = 32
n_detectors = 32
pixel_spacing = 0.0625
[model]
latent_height = 2
latent_width = 2
disc_depth = 3
[train]
steps = 4
batch_size = 2
checkpoint_every = 2
warmup_batches = 1
[posterior]
steps = 3
[gan]
steps = 3
n_critic = 2
[refine]
iters = 5
snapshots = 2
[eval]
count = 2
)";

struct Result {
  int rc;
  std::string out, err;
};

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "tomoforge-cli-test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "tiny.ini") << kTiny;
  }

  static Result run(std::vector<std::string> args) {
    // Global options may follow the subcommand.
    args.insert(args.end(), {"--config", (dir_ / "tiny.ini").string()});
    std::ostringstream out, err;
    const int rc = run_cli(args, out, err);
    return {rc, out.str(), err.str()};
  }

  static std::string path(const std::string& name) { return (dir_ / name).string(); }

  static std::string bytes(const std::string& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
  }

  static std::vector<std::string> lines(const std::string& p) {
    std::ifstream is(p);
    std::vector<std::string> out;
    for (std::string l; std::getline(is, l);) out.push_back(l);
    return out;
  }

  static const std::string& gan_checkpoint() {
    static const std::string ck = [] {
      const auto r = run({"train", "gan", "--run-dir", path("gan")});
      EXPECT_EQ(r.rc, 0) << r.err;
      return path("gan/step-3.tnsr");
    }();
    return ck;
  }

  static const std::string& readings() {
    static const std::string p = [] {
      const auto r = run({"simulate", "--out", path("sim.tnsr"), "--count", "2"});
      EXPECT_EQ(r.rc, 0) << r.err;
      return path("sim.tnsr");
    }();
    return p;
  }

  static fs::path dir_;
};

fs::path Cli::dir_;

// PNG IHDR bit depth sits right after the 8-byte signature, chunk header and width/height.
int png_bit_depth(const std::string& data) { return data.size() > 24 ? static_cast<unsigned char>(data[24]) : -1; }

TEST_F(Cli, UnknownKeyAndBadValueNameTheKey) {
  auto r = run({"config", "dump", "--set", "train.stepz=3"});
  EXPECT_EQ(r.rc, 2);
  EXPECT_NE(r.err.find("train.stepz"), std::string::npos);
  r = run({"config", "dump", "--set", "train.steps=lots"});
  EXPECT_EQ(r.rc, 2);
  EXPECT_NE(r.err.find("train.steps"), std::string::npos);
  std::ofstream(path("bad.ini")) << "[noise]\nsignal_ladder = 3,x\n";
  std::ostringstream out, err;
  EXPECT_EQ(run_cli({"config", "dump", "--config", path("bad.ini")}, out, err), 2);
  EXPECT_NE(err.str().find("noise.signal_ladder"), std::string::npos);
}

TEST_F(Cli, PaperProfileRejectsSmallGeometry) {
  std::ostringstream out, err;
  EXPECT_EQ(run_cli({"config", "dump", "--profile", "paper", "--set", "geometry.image_size=64"}, out, err), 2);
  EXPECT_EQ(run_cli({"config", "dump", "--profile", "paper"}, out, err), 0);
  EXPECT_NE(out.str().find("image_size = 256"), std::string::npos);
}

TEST_F(Cli, MissingInputIsAnIoError) {
  EXPECT_EQ(run({"fbp", "--input", path("nope.tnsr"), "--out", path("x.png")}).rc, 4);
}

TEST_F(Cli, SimulateRoundTripsAndReplaysFromSeed) {
  const auto r = run({"simulate", "--out", path("a.tnsr"), "--count", "2", "--seed", "5"});
  ASSERT_EQ(r.rc, 0) << r.err;
  ASSERT_EQ(run({"simulate", "--out", path("b.tnsr"), "--count", "2", "--seed", "5"}).rc, 0);
  ASSERT_EQ(run({"simulate", "--out", path("c.tnsr"), "--count", "2", "--seed", "6"}).rc, 0);
  EXPECT_EQ(bytes(path("a.tnsr")), bytes(path("b.tnsr")));
  EXPECT_NE(bytes(path("a.tnsr")), bytes(path("c.tnsr")));
  EXPECT_TRUE(fs::exists(path("a-truth.png")));

  const auto f = cli::read_readings(path("a.tnsr"));
  EXPECT_EQ(f.count, 2u);
  EXPECT_EQ(f.geometry.image_size, 32);
  cli::write_readings(path("a2.tnsr"), f);
  EXPECT_EQ(bytes(path("a.tnsr")), bytes(path("a2.tnsr")));
}

TEST_F(Cli, ReadingsNeverExceedTheAdcRange) {
  ASSERT_EQ(run({"simulate", "--out", path("sat.tnsr"), "--count", "1", "--set", "noise.bits=8"}).rc, 0);
  const auto f = cli::read_readings(path("sat.tnsr"));
  EXPECT_EQ(*std::max_element(f.readings.begin(), f.readings.end()), 255);  // exp(s) = 1000 saturates 8 bits
}

TEST_F(Cli, FbpWritesSixteenBitPngs) {
  auto r = run({"fbp", "--input", readings(), "--out", path("fbp-r.png")});
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_EQ(png_bit_depth(bytes(path("fbp-r.png"))), 16);
  r = run({"fbp", "--input", readings(), "--input-kind", "sinogram", "--window", "hann", "--out", path("fbp-s.png")});
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_EQ(png_bit_depth(bytes(path("fbp-s.png"))), 16);
  EXPECT_EQ(run({"fbp", "--input", readings(), "--window", "cosine", "--out", path("x.png")}).rc, 2);
}

TEST_F(Cli, TrainLogsEveryStepAndResumesIdentically) {
  ASSERT_EQ(run({"train", "recon", "--run-dir", path("full")}).rc, 0);
  const auto full = lines(path("full/loss.csv"));
  ASSERT_EQ(full.size(), 5u);
  EXPECT_EQ(full[0], "step,phase,signal_s,lr,loss,aux");
  EXPECT_TRUE(fs::exists(path("full/config.ini")));
  EXPECT_TRUE(fs::exists(path("full/step-2.tnsr")));
  EXPECT_TRUE(fs::exists(path("full/step-4.tnsr")));

  ASSERT_EQ(run({"train", "recon", "--run-dir", path("part"), "--set", "train.steps=2"}).rc, 0);
  ASSERT_EQ(run({"train", "recon", "--run-dir", path("part"), "--resume"}).rc, 0);
  EXPECT_EQ(lines(path("part/loss.csv")), full);
  const auto a = load_checkpoint(path("full/step-4.tnsr"));
  const auto b = load_checkpoint(path("part/step-4.tnsr"));
  ASSERT_EQ(a.entries.size(), b.entries.size());
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    EXPECT_EQ(a.entries[i].name, b.entries[i].name);
    EXPECT_TRUE(a.entries[i].tensor == b.entries[i].tensor) << a.entries[i].name;
  }
}

TEST_F(Cli, PosteriorTrainingRunsThreePhases) {
  ASSERT_EQ(run({"train", "posterior", "--run-dir", path("post")}).rc, 0);
  const auto l = lines(path("post/loss.csv"));
  ASSERT_EQ(l.size(), 10u);
  EXPECT_NE(l[1].find(",mu,"), std::string::npos);
  EXPECT_NE(l[4].find(",sigma,"), std::string::npos);
  EXPECT_NE(l[7].find(",joint,"), std::string::npos);
  const auto ck = load_checkpoint(path("post/step-9.tnsr"));
  EXPECT_EQ(ck.descriptors.count("joint"), 1u);
  // The trained posterior drives FBP.
  EXPECT_EQ(run({"fbp", "--input", readings(), "--posterior", path("post/step-9.tnsr"), "--out", path("fp.png")}).rc,
            0);
}

TEST_F(Cli, SampleGridHasFbpColumnPlusSamples) {
  const auto r = run({"sample", "--checkpoint", gan_checkpoint(), "--input", readings(), "--n", "3", "--out",
                      path("grid.png")});
  ASSERT_EQ(r.rc, 0) << r.err;
  const auto png = bytes(path("grid.png"));
  auto be32 = [&](std::size_t off) {
    return (static_cast<unsigned char>(png[off]) << 24) | (static_cast<unsigned char>(png[off + 1]) << 16) |
           (static_cast<unsigned char>(png[off + 2]) << 8) | static_cast<unsigned char>(png[off + 3]);
  };
  // 2 readings x (1 + 3) tiles of 32 px, with at most a few pixels of gutter per tile.
  EXPECT_GE(be32(16), 4 * 32);
  EXPECT_LT(be32(16), 4 * 40);
  EXPECT_GE(be32(20), 2 * 32);
  EXPECT_LT(be32(20), 2 * 40);
  EXPECT_NE(r.out.find("reading 1 mean pairwise distance"), std::string::npos);
}

TEST_F(Cli, RefineWritesTrace) {
  const auto r = run({"refine", "--checkpoint", gan_checkpoint(), "--input", readings(), "--index", "1", "--iters",
                      "6", "--snapshots", "3", "--out", path("ref")});
  ASSERT_EQ(r.rc, 0) << r.err;
  const auto csv = lines(path("ref/objective.csv"));
  ASSERT_EQ(csv.size(), 8u);
  EXPECT_EQ(csv[0], "iteration,objective,z_norm");
  int snaps = 0;
  for (const auto& e : fs::directory_iterator(path("ref")))
    snaps += e.path().filename().string().rfind("snapshot-", 0) == 0;
  EXPECT_EQ(snaps, 3);
  EXPECT_TRUE(fs::exists(path("ref/final.png")));
  EXPECT_TRUE(fs::exists(path("ref/trajectory.png")));
  const std::string last = csv.back();
  const double obj_csv = std::stod(last.substr(last.find(',') + 1));
  const double obj_out = std::stod(r.out.substr(r.out.find("final objective ") + 16));
  EXPECT_NEAR(obj_out, obj_csv, 1e-9 * std::abs(obj_csv));
  EXPECT_EQ(run({"refine", "--checkpoint", gan_checkpoint(), "--input", readings(), "--index", "7", "--out",
                 path("ref2")})
                .rc,
            2);
}

TEST_F(Cli, EvalReportIsDeterministic) {
  ASSERT_EQ(run({"eval", "--checkpoint", gan_checkpoint(), "--out", path("e1.csv")}).rc, 0);
  ASSERT_EQ(run({"eval", "--checkpoint", gan_checkpoint(), "--out", path("e2.csv")}).rc, 0);
  EXPECT_EQ(bytes(path("e1.csv")), bytes(path("e2.csv")));
  const auto l = lines(path("e1.csv"));
  ASSERT_EQ(l.size(), 1u + 2 * 3 * 2);  // 2 phantoms x 3 signals x {fbp, gan}
  EXPECT_EQ(l[0], "sample_id,signal_s,method,ssim");
  int fbp = 0, gan = 0;
  for (const auto& row : l) {
    fbp += row.find(",fbp,") != std::string::npos;
    gan += row.find(",gan,") != std::string::npos;
  }
  EXPECT_EQ(fbp, 6);
  EXPECT_EQ(gan, 6);
}

}  // namespace
