// colorgan: train, colorize, evaluate, selftest.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "colorgan/colorgan.hpp"
#include "colorgan/selftest.hpp"

namespace fs = std::filesystem;
using namespace colorgan;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One string option per config field, so every field is overridable as
/// --<field>. Only options the user actually passed are applied.
struct FieldOverrides {
  std::map<std::string, std::string> values;

  void attach(CLI::App& app, const std::vector<std::string>& only = {}) {
    for (const auto& f : config_fields()) {
      if (!only.empty() && std::find(only.begin(), only.end(), f.name) == only.end()) continue;
      app.add_option("--" + f.name, values[f.name], f.help);
    }
  }

  KeyValues collect(const CLI::App& app) const {
    KeyValues kv;
    for (const auto& [name, value] : values)
      if (app.count("--" + name) > 0) kv.emplace_back(name, value);
    return kv;
  }
};

int cmd_train(const std::string& config_path, const KeyValues& overrides, const fs::path& data_dir,
              const fs::path& out_dir, const std::string& resume) {
  TrainConfig cfg;
  KeyValues kv;
  if (!config_path.empty()) kv = read_config_file(config_path);
  kv.insert(kv.end(), overrides.begin(), overrides.end());
  apply_key_values(cfg, kv);
  cfg.validate();
  if (!fs::is_directory(data_dir)) throw UsageError("data directory not found: " + data_dir.string());
  if (!resume.empty() && !fs::is_regular_file(resume)) throw UsageError("resume checkpoint not found: " + resume);
  std::cout << "training " << to_string(cfg.ablation) << " model for " << cfg.steps << " steps on " << data_dir
            << std::endl;
  const auto res = train(cfg, data_dir, out_dir, resume.empty() ? std::nullopt : std::optional<fs::path>(resume),
                         {}, &std::cout);
  std::cout << "wrote " << res.checkpoint.string() << " and " << res.loss_log.string() << std::endl;
  return kOk;
}

int cmd_colorize(const fs::path& checkpoint, const fs::path& input, const fs::path& output, std::uint64_t seed) {
  const auto model = load_model(checkpoint);
  const auto img = read_image(input);
  write_png(output, colorize(*model.gen, model.backbone, img, seed));
  std::cout << "wrote " << output.string() << std::endl;
  return kOk;
}

int cmd_evaluate(const fs::path& checkpoint, const fs::path& data_dir, const KeyValues& overrides,
                 const std::string& split_name, fs::path out_dir) {
  if (!fs::is_directory(data_dir)) throw UsageError("data directory not found: " + data_dir.string());
  auto model = load_model(checkpoint);
  apply_key_values(model.cfg, overrides);
  Split split = Split::test;
  if (split_name == "train") split = Split::train;
  else if (split_name == "all") split = Split::all;
  else if (split_name != "test") throw UsageError("--split must be train, test or all");
  const auto ds = load_dataset(data_dir, split, model.cfg);
  const auto rep = evaluate(model, ds);
  if (out_dir.empty()) out_dir = checkpoint.parent_path().empty() ? fs::path(".") : checkpoint.parent_path();
  fs::create_directories(out_dir);
  write_metrics(rep, out_dir / "metrics.csv", out_dir / "metrics.json");
  const auto s = rep.summary();
  std::cout << "images " << rep.rows.size() << "\npsnr_db " << s.psnr_db << "\nssim " << s.ssim
            << "\ncolorfulness_pred " << s.colorfulness_pred << "\ncolorfulness_gt " << s.colorfulness_gt
            << "\ndelta_colorfulness " << s.delta_colorfulness << "\nwrote " << (out_dir / "metrics.csv").string()
            << " and " << (out_dir / "metrics.json").string() << std::endl;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GAN image colorization with a Swin colour transformer"};
  app.require_subcommand(1);

  auto* train_cmd = app.add_subcommand("train", "train a model on an image folder");
  std::string config_path, resume;
  fs::path data_dir, out_dir;
  FieldOverrides train_fields;
  train_cmd->add_option("--config", config_path, "key = value configuration file");
  train_cmd->add_option("--resume", resume, "continue from a checkpoint");
  train_fields.attach(*train_cmd);
  train_cmd->add_option("data_dir", data_dir, "image folder (PNG/JPEG, or PASCAL VOC root)")->required();
  train_cmd->add_option("out_dir", out_dir, "output folder for checkpoints and loss.csv")->required();

  auto* color_cmd = app.add_subcommand("colorize", "colorize one image");
  fs::path ckpt, input, output;
  std::uint64_t color_seed = 0;
  color_cmd->add_option("--seed", color_seed, "noise seed");
  color_cmd->add_option("checkpoint", ckpt)->required();
  color_cmd->add_option("input", input, "PNG or JPEG")->required();
  color_cmd->add_option("output", output, "PNG")->required();

  auto* eval_cmd = app.add_subcommand("evaluate", "compute PSNR, SSIM and colorfulness on a split");
  fs::path eval_ckpt, eval_dir, eval_out;
  std::string split = "test";
  std::uint64_t eval_seed = 0;
  FieldOverrides eval_fields;
  eval_cmd->add_option("--seed", eval_seed, "evaluation noise seed (eval_seed)");
  eval_cmd->add_option("--split", split, "train, test or all");
  eval_cmd->add_option("--out", eval_out, "folder for metrics.csv and metrics.json (default: checkpoint folder)");
  eval_fields.attach(*eval_cmd, {"eval_seed", "colorfulness_mode", "delta_mode"});
  eval_cmd->add_option("checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("data_dir", eval_dir)->required();

  app.add_subcommand("selftest", "run the invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(config_path, train_fields.collect(*train_cmd), data_dir, out_dir, resume);
    if (color_cmd->parsed()) return cmd_colorize(ckpt, input, output, color_seed);
    if (eval_cmd->parsed()) {
      auto kv = eval_fields.collect(*eval_cmd);
      if (eval_cmd->count("--seed")) kv.emplace_back("eval_seed", std::to_string(eval_seed));
      return cmd_evaluate(eval_ckpt, eval_dir, kv, split, eval_out);
    }
    // Fault injection for verifying that the suite catches a broken backward pass.
    if (const char* fault = std::getenv("COLORGAN_FAULT"); fault && std::string(fault) == "conv_backward")
      fault_corrupt_conv_backward() = true;
    return selftest::run(std::cout);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return kUsage;
  } catch (const DatasetError& e) {
    std::cerr << (e.usage() ? "usage error: " : "error: ") << e.what() << std::endl;
    return e.usage() ? kUsage : kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kRuntime;
  }
}
