#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

#include "colorgan/checkpoint.hpp"
#include "colorgan/image_io.hpp"
#include "support.hpp"

#ifndef COLORGAN_CLI
#error "COLORGAN_CLI must name the colorgan executable"
#endif

using colorgan::testing::ScratchDir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;  // stdout and stderr together
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

Run cli(const std::string& args, const ScratchDir& dir, const std::string& env = "") {
  const auto log = dir / "cli.log";
  const std::string cmd = env + (env.empty() ? "" : " ") + "'" COLORGAN_CLI "' " + args + " > '" + log.string() +
                          "' 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

const char* kTiny =
    " --image_size 32 --batch_size 2 --base_width 4 --backbone_width 4 --critic_width 4"
    " --noise_channels 4 --heads 2 --mlp_ratio 2 --log_every 0";

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST(Cli, TrainWithMissingDataDirIsAUsageError) {
  ScratchDir dir("cli_missing");
  const auto r = cli("train " + q(dir / "nowhere") + " " + q(dir / "out") + kTiny, dir);
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_NE(r.out.find((dir / "nowhere").string()), std::string::npos) << r.out;
}

TEST(Cli, TrainColorizeEvaluate) {
  ScratchDir dir("cli_flow");
  colorgan::testing::write_synthetic_folder(dir / "data", 5, 40);
  auto r = cli(std::string("train ") + q(dir / "data") + " " + q(dir / "out") + kTiny + " --steps 1", dir);
  ASSERT_EQ(r.code, 0) << r.out;
  ASSERT_TRUE(fs::exists(dir / "out/final.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "out/loss.csv"));

  const auto input = dir / "data/img00.png";
  r = cli("colorize --seed 3 " + q(dir / "out/final.ckpt") + " " + q(input) + " " + q(dir / "c1.png"), dir);
  ASSERT_EQ(r.code, 0) << r.out;
  cli("colorize --seed 3 " + q(dir / "out/final.ckpt") + " " + q(input) + " " + q(dir / "c2.png"), dir);
  cli("colorize --seed 4 " + q(dir / "out/final.ckpt") + " " + q(input) + " " + q(dir / "c3.png"), dir);
  const auto c1 = colorgan::read_png(dir / "c1.png");
  EXPECT_EQ(c1.width, 40u);
  EXPECT_EQ(c1.height, 40u);
  EXPECT_EQ(slurp(dir / "c1.png"), slurp(dir / "c2.png"));
  EXPECT_NE(slurp(dir / "c1.png"), slurp(dir / "c3.png"));

  r = cli("evaluate " + q(dir / "out/final.ckpt") + " " + q(dir / "data") + " --out " + q(dir / "m1"), dir);
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream jf(dir / "m1/metrics.json");
  const auto j = nlohmann::json::parse(jf);
  EXPECT_EQ(j.size(), 5u);
  for (const char* k : {"psnr_db", "ssim", "colorfulness_pred", "colorfulness_gt", "delta_colorfulness"})
    EXPECT_TRUE(j.contains(k)) << k;
  cli("evaluate " + q(dir / "out/final.ckpt") + " " + q(dir / "data") + " --out " + q(dir / "m2"), dir);
  EXPECT_EQ(slurp(dir / "m1/metrics.csv"), slurp(dir / "m2/metrics.csv"));

  fs::create_directories(dir / "empty");
  r = cli("evaluate " + q(dir / "out/final.ckpt") + " " + q(dir / "empty"), dir);
  EXPECT_EQ(r.code, 2) << r.out;
}

TEST(Cli, AblationFlagReachesTheManifest) {
  ScratchDir dir("cli_ablation");
  colorgan::testing::write_synthetic_folder(dir / "data", 3, 32);
  const auto r = cli(std::string("train ") + q(dir / "data") + " " + q(dir / "out") + kTiny +
                         " --steps 0 --ablation unet",
                     dir);
  ASSERT_EQ(r.code, 0) << r.out;
  const auto m = colorgan::read_manifest(dir / "out/final.ckpt");
  EXPECT_EQ(m.at("meta").at("config").at("ablation").get<std::string>(), "unet");
}

TEST(Cli, ConfigFileAndOverrides) {
  ScratchDir dir("cli_config");
  colorgan::testing::write_synthetic_folder(dir / "data", 3, 32);
  { std::ofstream(dir / "bad.cfg") << "steps = 1\nbogus_key = 3\n"; }
  auto r = cli("train --config " + q(dir / "bad.cfg") + " " + q(dir / "data") + " " + q(dir / "o1") + kTiny, dir);
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_NE(r.out.find("bogus_key"), std::string::npos) << r.out;

  r = cli("train --no_such_flag 1 " + q(dir / "data") + " " + q(dir / "o1"), dir);
  EXPECT_EQ(r.code, 2) << r.out;

  { std::ofstream(dir / "good.cfg") << "# tiny run\nsteps = 5\nseed = 11\nablation = no_color_transformer\n"; }
  r = cli("train --config " + q(dir / "good.cfg") + " --steps 0 " + q(dir / "data") + " " + q(dir / "o2") + kTiny,
          dir);
  ASSERT_EQ(r.code, 0) << r.out;
  const auto cfg = colorgan::read_manifest(dir / "o2/final.ckpt").at("meta").at("config");
  EXPECT_EQ(cfg.at("steps").get<std::string>(), "0");
  EXPECT_EQ(cfg.at("seed").get<std::string>(), "11");
  EXPECT_EQ(cfg.at("ablation").get<std::string>(), "no_color_transformer");

  r = cli("train --profile paper " + q(dir / "data") + " " + q(dir / "o3"), dir);
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_NE(r.out.find("steps"), std::string::npos) << r.out;
}

TEST(Cli, SelftestPassesAndCatchesABrokenBackwardPass) {
  ScratchDir dir("cli_selftest");
  auto r = cli("selftest", dir);
  EXPECT_EQ(r.code, 0) << r.out;
  std::size_t pass = 0;
  for (std::size_t at = r.out.find("PASS "); at != std::string::npos; at = r.out.find("PASS ", at + 1)) ++pass;
  EXPECT_GE(pass, 6u) << r.out;

  r = cli("selftest", dir, "COLORGAN_FAULT=conv_backward");
  EXPECT_EQ(r.code, 1) << r.out;
  EXPECT_NE(r.out.find("FAIL gradients"), std::string::npos) << r.out;
}

TEST(Cli, NoSubcommandIsAUsageError) {
  ScratchDir dir("cli_usage");
  EXPECT_EQ(cli("", dir).code, 2);
  EXPECT_EQ(cli("frobnicate", dir).code, 2);
  EXPECT_EQ(cli("--help", dir).code, 0);
}
