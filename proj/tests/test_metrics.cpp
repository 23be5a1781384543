#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "colorgan/metrics.hpp"
#include "colorgan/reference.hpp"
#include "support.hpp"

using namespace colorgan;
namespace ref = colorgan::reference;
using colorgan::testing::synthetic_image;

namespace {

RgbImage perturbed(const RgbImage& img, int amplitude, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(-amplitude, amplitude);
  RgbImage out = img;
  for (auto& v : out.data) v = static_cast<std::uint8_t>(std::clamp(int(v) + u(rng), 0, 255));
  return out;
}

}  // namespace

TEST(Metrics, AgreeWithDirectOraclesOnRandomPairs) {
  for (std::uint64_t k = 0; k < 20; ++k) {
    const auto a = synthetic_image(24 + k % 5, 20 + k % 3, k + 1);
    const auto b = perturbed(a, 1 + int(k) * 3, k + 100);
    EXPECT_NEAR(psnr(a, b), ref::psnr(a, b), 1e-9) << k;
    EXPECT_NEAR(ssim(a, b), ref::ssim(a, b), 1e-9) << k;
    EXPECT_NEAR(colorfulness(srgb_to_lab(b)), ref::colorfulness(srgb_to_lab(b)), 1e-6) << k;
  }
}

TEST(Metrics, PsnrFallsAsNoiseGrows) {
  const auto a = synthetic_image(32, 32, 3);
  double prev = kPsnrCap + 1;
  for (int amp : {1, 5, 20}) {
    const double p = psnr(a, perturbed(a, amp, 7));
    EXPECT_LT(p, prev) << amp;
    prev = p;
  }
}

TEST(Metrics, ConstantOffsetOfTenGives28Point13) {
  RgbImage a(16, 16, 100), b(16, 16, 110);
  EXPECT_NEAR(psnr(a, b), 28.13, 0.01);
}

TEST(Metrics, IdenticalImagesHitTheCaps) {
  const auto a = synthetic_image(16, 16, 1);
  EXPECT_EQ(psnr(a, a), kPsnrCap);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  EXPECT_EQ(delta_colorfulness(a, a), 0.0);
}

TEST(Metrics, SizeMismatchAndTinyImagesAreRejected) {
  EXPECT_THROW(psnr(RgbImage(4, 4), RgbImage(4, 5)), std::invalid_argument);
  EXPECT_THROW(ssim(RgbImage(10, 10), RgbImage(10, 10)), std::invalid_argument);
}

TEST(Metrics, SsimIsSymmetricAndBounded) {
  const auto a = synthetic_image(20, 20, 2), b = perturbed(a, 30, 3);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
  EXPECT_LT(ssim(a, b), 1.0);
  EXPECT_GT(ssim(a, b), -1.0);
}

TEST(Colorfulness, InvariantToPixelPermutation) {
  const auto a = synthetic_image(16, 16, 4);
  RgbImage p = a;
  std::vector<std::size_t> order(a.pixels());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), std::mt19937_64(5));
  for (std::size_t i = 0; i < order.size(); ++i)
    for (int c = 0; c < 3; ++c) p.data[3 * i + c] = a.data[3 * order[i] + c];
  EXPECT_NEAR(colorfulness(p), colorfulness(a), 1e-9);
  EXPECT_NEAR(colorfulness(p, ColorfulnessMode::hasler_susstrunk),
              colorfulness(a, ColorfulnessMode::hasler_susstrunk), 1e-9);
}

TEST(Colorfulness, GrayIsZeroInBothModes) {
  const auto g = colorgan::testing::gray_image(16, 16);
  EXPECT_NEAR(colorfulness(g), 0.0, 1e-9);
  // rg = 0 and yb = 0 on gray pixels
  EXPECT_NEAR(colorfulness(g, ColorfulnessMode::hasler_susstrunk), 0.0, 1e-12);
}

TEST(Colorfulness, HaslerSusstrunkOnTwoPixels) {
  RgbImage img(2, 1);
  // pixel 0: rg = 255, yb = 127.5; pixel 1: black
  img.at(0, 0, 0) = 255;
  const double sd = std::sqrt(127.5 * 127.5 + 63.75 * 63.75);
  const double mu = std::sqrt(127.5 * 127.5 + 63.75 * 63.75);
  EXPECT_NEAR(colorfulness(img, ColorfulnessMode::hasler_susstrunk), sd + 0.3 * mu, 1e-9);
  EXPECT_EQ(parse_colorfulness_mode("hasler_susstrunk"), ColorfulnessMode::hasler_susstrunk);
  EXPECT_THROW(parse_colorfulness_mode("cie"), std::invalid_argument);
}

TEST(Report, DeltaModesDiffer) {
  MetricReport rep;
  rep.rows.push_back({"a", 30, 0.9, 10, 20, 10});
  rep.rows.push_back({"b", 20, 0.7, 30, 20, 10});
  EXPECT_DOUBLE_EQ(rep.summary().delta_colorfulness, 10.0);
  EXPECT_DOUBLE_EQ(rep.summary().psnr_db, 25.0);
  rep.delta_mode = DeltaMode::delta_of_means;
  EXPECT_DOUBLE_EQ(rep.summary().delta_colorfulness, 0.0);
  EXPECT_EQ(parse_delta_mode("delta_of_means"), DeltaMode::delta_of_means);
  EXPECT_THROW(parse_delta_mode("median"), std::invalid_argument);
}

TEST(Report, MeasureFillsEveryColumn) {
  const auto gt = synthetic_image(16, 16, 9), pred = perturbed(gt, 10, 1);
  const auto r = measure("x.png", pred, gt);
  EXPECT_EQ(r.image, "x.png");
  EXPECT_EQ(r.psnr_db, psnr(pred, gt));
  EXPECT_EQ(r.ssim, ssim(pred, gt));
  EXPECT_EQ(r.colorfulness_pred, colorfulness(pred));
  EXPECT_EQ(r.colorfulness_gt, colorfulness(gt));
  EXPECT_EQ(r.delta_colorfulness, std::abs(r.colorfulness_pred - r.colorfulness_gt));
}

TEST(Report, CsvAndJsonLayout) {
  MetricReport rep;
  rep.rows.push_back({"a.png", 30, 0.9, 10, 12, 2});
  rep.rows.push_back({"b.png", 20, 0.7, 30, 20, 10});
  const auto csv = metrics_csv(rep);
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "image,psnr_db,ssim,colorfulness_pred,colorfulness_gt,delta_colorfulness");
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 5);
    ++rows;
  }
  EXPECT_EQ(rows, 2u);

  const auto j = metrics_json(rep);
  EXPECT_EQ(j.size(), 5u);
  for (const char* c : kMetricColumns) EXPECT_TRUE(j.contains(c)) << c;
  EXPECT_DOUBLE_EQ(j["psnr_db"].get<double>(), 25.0);
  EXPECT_DOUBLE_EQ(j["delta_colorfulness"].get<double>(), 6.0);

  colorgan::testing::ScratchDir dir("metrics");
  write_metrics(rep, dir / "m.csv", dir / "m.json");
  std::ifstream f(dir / "m.json");
  EXPECT_EQ(nlohmann::json::parse(f), j);
}
