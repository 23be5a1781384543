#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "colorgan/pipeline.hpp"
#include "colorgan/selftest.hpp"
#include "support.hpp"

using namespace colorgan;
using colorgan::selftest::tiny_config;
using colorgan::testing::ScratchDir;
using colorgan::testing::write_synthetic_folder;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

TrainConfig quick_config(std::size_t steps) {
  auto c = tiny_config();
  c.steps = steps;
  c.checkpoint_every = 0;
  c.log_every = 0;
  return c;
}

}  // namespace

TEST(Dataset, HashSplitIsDisjointAndDeterministic) {
  ScratchDir dir("split");
  write_synthetic_folder(dir.path(), 10, 32);
  const TrainConfig cfg;
  const auto tr = load_dataset(dir.path(), Split::train, cfg), te = load_dataset(dir.path(), Split::test, cfg);
  EXPECT_EQ(tr.size(), 8u);
  EXPECT_EQ(te.size(), 2u);
  std::set<fs::path> all(tr.paths.begin(), tr.paths.end());
  all.insert(te.paths.begin(), te.paths.end());
  EXPECT_EQ(all.size(), 10u);
  EXPECT_EQ(load_dataset(dir.path(), Split::train, cfg).paths, tr.paths);
  EXPECT_EQ(load_dataset(dir.path(), Split::all, cfg).size(), 10u);

  // A different seed reshuffles which files land in test.
  std::set<std::set<fs::path>> test_sets;
  for (std::uint64_t s = 1; s <= 6; ++s) {
    auto c = cfg;
    c.seed = s;
    const auto t = load_dataset(dir.path(), Split::test, c);
    test_sets.insert({t.paths.begin(), t.paths.end()});
  }
  EXPECT_GT(test_sets.size(), 1u);
}

TEST(Dataset, GrayscaleImagesAreRejected) {
  ScratchDir dir("gray");
  write_synthetic_folder(dir.path(), 3, 32);
  write_png(dir / "zz_gray.png", colorgan::testing::gray_image(32, 32));
  TrainConfig cfg;
  cfg.split_ratio = 1.0;
  try {
    load_dataset(dir.path(), Split::train, cfg);
    FAIL() << "expected DatasetError";
  } catch (const DatasetError& e) {
    EXPECT_FALSE(e.usage());
    EXPECT_NE(std::string(e.what()).find("zz_gray.png"), std::string::npos);
  }
}

TEST(Dataset, MissingOrEmptyDirectoryIsAUsageError) {
  ScratchDir dir("empty");
  const TrainConfig cfg;
  for (const auto& p : {dir.path(), dir / "nope"}) {
    try {
      load_dataset(p, Split::train, cfg);
      FAIL() << "expected DatasetError for " << p;
    } catch (const DatasetError& e) {
      EXPECT_TRUE(e.usage());
      EXPECT_NE(std::string(e.what()).find(p.string()), std::string::npos);
    }
  }
}

TEST(Batches, ShapesRangeAndReconstruction) {
  ScratchDir dir("batch");
  write_synthetic_folder(dir.path(), 3, 40);
  TrainConfig cfg;
  cfg.split_ratio = 1.0;
  const auto ds = load_dataset(dir.path(), Split::train, cfg);
  const std::vector<std::size_t> idx{2, 0};
  const auto b = make_batch(ds, idx, 32);
  EXPECT_EQ(b.Ln.shape(), (Shape{2, 1, 32, 32}));
  EXPECT_EQ(b.abn.shape(), (Shape{2, 2, 32, 32}));
  EXPECT_EQ(b.rgb.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(b.names[0], ds.paths[2].filename().string());
  for (auto v : b.Ln.values()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
  for (auto v : b.abn.values()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
  // Decoding the normalised Lab planes recovers the resized source.
  const auto rgb = lab_to_rgb(b.Ln, b.abn);
  for (std::size_t i = 0; i < rgb.numel(); ++i) EXPECT_NEAR(rgb[i], b.rgb[i], 1.0f / 255.0f + 1e-4f);
  const std::vector<std::size_t> bad{3};
  EXPECT_THROW(make_batch(ds, bad, 32), std::out_of_range);
}

TEST(Batches, IndicesArePerEpochPermutations) {
  const std::size_t n = 7, B = 3;
  for (std::size_t epoch = 0; epoch < 3; ++epoch) {
    std::multiset<std::size_t> seen;
    for (std::size_t p = epoch * n; p < (epoch + 1) * n; ++p) seen.insert(batch_indices(p, n, 1, 5)[0]);
    EXPECT_EQ(seen.size(), n);
    EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), n);
  }
  // Batch k of size B is positions kB..kB+B-1 of the same stream.
  for (std::size_t k = 0; k < 6; ++k) {
    const auto b = batch_indices(k, n, B, 5);
    for (std::size_t j = 0; j < B; ++j) EXPECT_EQ(b[j], batch_indices(k * B + j, n, 1, 5)[0]);
  }
  EXPECT_EQ(batch_indices(4, n, B, 5), batch_indices(4, n, B, 5));
  EXPECT_NE(batch_indices(0, 50, 10, 5), batch_indices(0, 50, 10, 6));
}

TEST(Training, ReconstructionOnlyFitsOneBatch) {
  ScratchDir dir("fit");
  write_synthetic_folder(dir.path(), 2, 32);
  auto cfg = tiny_config();
  cfg.lambda_p = cfg.lambda_g = cfg.lambda_c = 0;
  cfg.split_ratio = 1.0;
  cfg.base_width = 8;
  cfg.lr_g = 2e-3;
  const auto ds = load_dataset(dir.path(), Split::train, cfg);
  const std::vector<std::size_t> idx{0, 1};
  const auto batch = make_batch(ds, idx, cfg);
  auto st = make_train_state(cfg);
  double first = 0, last = 0;
  for (std::size_t s = 0; s < 300; ++s) {
    const auto b = train_step(st, batch, cfg);
    if (s == 0) first = b.L1;
    last = b.L1;
    if (last < 0.05) break;
  }
  EXPECT_LT(last, 0.05) << "started at " << first;
}

TEST(Training, CriticWeightsStayClipped) {
  ScratchDir dir("clip");
  write_synthetic_folder(dir.path(), 4, 32);
  auto cfg = tiny_config();
  cfg.split_ratio = 1.0;
  cfg.clip_c = 0.005;
  const auto ds = load_dataset(dir.path(), Split::train, cfg);
  auto st = make_train_state(cfg);
  for (std::size_t s = 0; s < 10; ++s) {
    const auto batch = make_batch(ds, batch_indices(s, ds.size(), cfg.batch_size, cfg.seed), cfg);
    const auto b = train_step(st, batch, cfg);
    EXPECT_TRUE(std::isfinite(b.total));
    for (const auto& t : st.critic->params().tensors())
      for (auto v : t.values()) ASSERT_LE(std::abs(v), cfg.clip_c);
  }
  EXPECT_EQ(st.step, 10u);
  EXPECT_EQ(st.log.size(), 10u);
}

TEST(Training, SameSeedGivesIdenticalRunsAndResumeIsExact) {
  ScratchDir dir("det");
  write_synthetic_folder(dir.path(), 5, 32);
  auto cfg = quick_config(50);
  cfg.split_ratio = 1.0;
  train(cfg, dir.path(), dir / "a");
  train(cfg, dir.path(), dir / "b");
  EXPECT_EQ(slurp(dir / "a/loss.csv"), slurp(dir / "b/loss.csv"));
  EXPECT_EQ(slurp(dir / "a/final.ckpt"), slurp(dir / "b/final.ckpt"));

  auto half = cfg;
  half.steps = 30;
  train(half, dir.path(), dir / "c");
  const auto r = train(cfg, dir.path(), dir / "d", dir / "c/final.ckpt");
  EXPECT_EQ(r.steps_run, 20u);
  EXPECT_EQ(slurp(dir / "d/loss.csv"), slurp(dir / "a/loss.csv"));
  EXPECT_EQ(slurp(dir / "d/final.ckpt"), slurp(dir / "a/final.ckpt"));

  auto other = cfg;
  other.seed = 2;
  train(other, dir.path(), dir / "e");
  EXPECT_NE(slurp(dir / "e/loss.csv"), slurp(dir / "a/loss.csv"));
}

TEST(Training, ZeroStepsWritesTheInitialCheckpoint) {
  ScratchDir dir("zero");
  write_synthetic_folder(dir.path(), 3, 32);
  auto cfg = quick_config(0);
  cfg.split_ratio = 1.0;
  const auto r = train(cfg, dir.path(), dir / "out");
  EXPECT_EQ(r.steps_run, 0u);
  EXPECT_TRUE(fs::exists(dir / "out/final.ckpt"));
  EXPECT_FALSE(fs::exists(dir / "out/latest.ckpt"));
  EXPECT_EQ(slurp(dir / "out/loss.csv"), "step,Lg,Lp,L1,Lc,total,d_loss\n");
  const auto meta = read_manifest(dir / "out/final.ckpt").at("meta");
  EXPECT_EQ(meta.at("step").get<std::size_t>(), 0u);
}

TEST(Training, PeriodicCheckpointsAndLossLog) {
  ScratchDir dir("periodic");
  write_synthetic_folder(dir.path(), 3, 32);
  auto cfg = quick_config(5);
  cfg.split_ratio = 1.0;
  cfg.checkpoint_every = 2;
  train(cfg, dir.path(), dir / "out");
  EXPECT_EQ(read_manifest(dir / "out/latest.ckpt").at("meta").at("step").get<std::size_t>(), 4u);
  EXPECT_EQ(read_manifest(dir / "out/final.ckpt").at("meta").at("step").get<std::size_t>(), 5u);
  std::istringstream is(slurp(dir / "out/loss.csv"));
  std::string line;
  std::size_t rows = 0;
  std::getline(is, line);
  while (std::getline(is, line)) {
    EXPECT_EQ(line.rfind(std::to_string(rows + 1) + ",", 0), 0u) << line;
    ++rows;
  }
  EXPECT_EQ(rows, 5u);
}

TEST(Training, UnetManifestHasNoColourBranches) {
  ScratchDir dir("unet");
  write_synthetic_folder(dir.path(), 3, 32);
  auto cfg = quick_config(1);
  cfg.split_ratio = 1.0;
  cfg.ablation = Ablation::unet;
  train(cfg, dir.path(), dir / "out");
  const auto manifest = read_manifest(dir / "out/final.ckpt");
  EXPECT_EQ(manifest.at("meta").at("config").at("ablation").get<std::string>(), "unet");
  std::size_t generator = 0;
  for (const auto& e : manifest.at("entries")) {
    const auto name = e.at("name").get<std::string>();
    EXPECT_EQ(name.find("color_encoder."), std::string::npos) << name;
    EXPECT_EQ(name.find("color_transformer."), std::string::npos) << name;
    EXPECT_EQ(name.find("bottleneck."), std::string::npos) << name;
    if (name.rfind(kGeneratorPrefix, 0) == 0) ++generator;
  }
  EXPECT_GT(generator, 0u);
}

TEST(Checkpoint, MissingFieldsAreNamed) {
  const auto cfg = tiny_config();
  const auto st = make_train_state(cfg);
  auto ck = state_to_checkpoint(st, cfg);
  const std::string victim = ck.entries[3].name;
  ck.entries.erase(ck.entries.begin() + 3);
  try {
    state_from_checkpoint(ck, cfg);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find(victim), std::string::npos) << e.what();
  }
  const auto full = state_to_checkpoint(st, cfg);
  std::stringstream ss;
  write_checkpoint(ss, full);
  const auto back = read_checkpoint(ss);
  EXPECT_EQ(back.entries.size(), full.entries.size());
  EXPECT_EQ(back.meta, full.meta);
}

TEST(Evaluation, IdentityPredictorHitsTheCaps) {
  ScratchDir dir("evalid");
  write_synthetic_folder(dir.path(), 5, 32);
  const TrainConfig cfg;
  const auto ds = load_dataset(dir.path(), Split::all, cfg);
  const auto rep = evaluate_with(ds, cfg, [](const RgbImage& img, const fs::path&) { return img; });
  EXPECT_EQ(rep.rows.size(), ds.size());
  const auto s = rep.summary();
  EXPECT_EQ(s.psnr_db, kPsnrCap);
  EXPECT_NEAR(s.ssim, 1.0, 1e-12);
  EXPECT_EQ(s.delta_colorfulness, 0.0);
}

TEST(Evaluation, FixedSeedGivesIdenticalReports) {
  ScratchDir dir("evalseed");
  write_synthetic_folder(dir.path(), 5, 48);
  auto cfg = quick_config(2);
  train(cfg, dir.path(), dir / "out");
  const auto model = load_model(dir / "out/final.ckpt");
  const auto ds = load_dataset(dir.path(), Split::test, model.cfg);
  const auto a = evaluate(model, ds), b = evaluate(model, ds);
  EXPECT_EQ(a.rows.size(), ds.size());
  EXPECT_EQ(metrics_csv(a), metrics_csv(b));
  // colorize keeps the input size and is seeded
  const auto img = read_image(ds.paths[0]);
  const auto c1 = colorize(*model.gen, model.backbone, img, 3), c2 = colorize(*model.gen, model.backbone, img, 3);
  EXPECT_EQ(c1.width, img.width);
  EXPECT_EQ(c1.height, img.height);
  EXPECT_EQ(c1, c2);
  EXPECT_NE(c1, colorize(*model.gen, model.backbone, img, 4));
}

TEST(Config, ParsingAndErrors) {
  std::istringstream good("# comment\n lr_g = 0.5 \n\nsteps=7 # trailing\nablation = unet\n");
  TrainConfig c;
  apply_key_values(c, parse_key_values(good, "good"));
  EXPECT_EQ(c.lr_g, 0.5);
  EXPECT_EQ(c.steps, 7u);
  EXPECT_EQ(c.ablation, Ablation::unet);

  std::istringstream no_eq("steps 7\n");
  EXPECT_THROW(parse_key_values(no_eq, "bad"), ConfigError);
  EXPECT_THROW(apply_key_values(c, {{"stepz", "3"}}), ConfigError);
  EXPECT_THROW(apply_key_values(c, {{"steps", "-3"}}), ConfigError);
  EXPECT_THROW(apply_key_values(c, {{"lr_g", "fast"}}), ConfigError);
  EXPECT_THROW(apply_key_values(c, {{"lipschitz", "spectral"}}), ConfigError);
  try {
    apply_key_values(c, {{"batch_size", "2"}, {"nonsense", "1"}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("nonsense"), std::string::npos);
  }
  EXPECT_EQ(c.batch_size, 4u);  // nothing applied when any key is unknown
  TrainConfig z;
  z.batch_size = 0;
  EXPECT_THROW(z.validate(), ConfigError);
}

TEST(Config, PaperProfileRequiresSteps) {
  TrainConfig c;
  apply_key_values(c, {{"profile", "paper"}});
  EXPECT_EQ(c.image_size, 256u);
  EXPECT_EQ(c.batch_size, 16u);
  EXPECT_THROW(c.validate(), ConfigError);
  TrainConfig d;
  apply_key_values(d, {{"steps", "100"}, {"profile", "paper"}});  // profile is applied first
  EXPECT_EQ(d.image_size, 256u);
  EXPECT_NO_THROW(d.validate());
}

TEST(Config, TextRoundTrip) {
  TrainConfig c;
  c.lr_g = 3.25e-5;
  c.ablation = Ablation::no_color_transformer;
  c.inject_levels = "1,3";
  c.colorfulness_mode = ColorfulnessMode::hasler_susstrunk;
  std::istringstream is(config_to_text(c));
  TrainConfig d;
  apply_key_values(d, parse_key_values(is, "text"));
  EXPECT_EQ(config_to_map(d), config_to_map(c));
  EXPECT_EQ(d.lr_g, c.lr_g);
}
