#pragma once

// Training configuration and its key-value file format.
//
// File syntax: one `key = value` per line; `#` starts a comment; blank lines
// are ignored. Keys are exactly the TrainConfig field names. Unknown keys and
// unparsable values raise ConfigError naming the key.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "colorgan/losses.hpp"
#include "colorgan/metrics.hpp"
#include "colorgan/netmodel.hpp"
#include "colorgan/optim.hpp"

namespace colorgan {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Lipschitz { clip, gp };

struct TrainConfig {
  std::string profile = "desk";

  // optimisation
  double lr_g = 1e-4;
  double lr_d = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::size_t batch_size = 4;
  std::size_t steps = 1000;
  std::uint64_t seed = 1;
  std::size_t n_critic = 1;
  Lipschitz lipschitz = Lipschitz::clip;
  double clip_c = 0.01;
  double gp_weight = 10.0;

  // loss weights
  double lambda_g = 0.1;
  double lambda_p = 100.0;
  double lambda_l1 = 10.0;
  double lambda_c = 1.0;

  // model
  std::size_t image_size = 64;
  Ablation ablation = Ablation::full;
  std::size_t base_width = 32;
  std::size_t backbone_width = 16;
  std::size_t critic_width = 32;
  std::size_t noise_channels = 64;
  double noise_sigma = 0.1;
  std::size_t window = 8;
  std::size_t heads = 8;
  std::size_t mlp_ratio = 4;
  std::size_t perceptual_tap = 3;
  std::string inject_levels = "1,2,3,4";
  std::uint64_t backbone_seed = 20240917;
  std::string backbone_weights;  // optional checkpoint-format file with backbone.* entries

  // data, logging, evaluation
  double split_ratio = 0.8;
  std::size_t checkpoint_every = 500;
  std::size_t log_every = 50;
  std::uint64_t eval_seed = 7;
  ColorfulnessMode colorfulness_mode = ColorfulnessMode::lab_std;
  DeltaMode delta_mode = DeltaMode::mean_of_deltas;

  bool steps_required = false;  // set by profile = paper until steps is given

  LossWeights weights() const { return {lambda_g, lambda_p, lambda_l1, lambda_c}; }
  AdamHyper adam_g() const { return {lr_g, beta1, beta2, 1e-8}; }
  AdamHyper adam_d() const { return {lr_d, beta1, beta2, 1e-8}; }

  std::array<bool, kStages> inject() const {
    std::array<bool, kStages> on{false, false, false, false};
    std::stringstream ss(inject_levels);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (tok.empty() || tok == "none") continue;
      if (tok.size() != 1 || tok[0] < '1' || tok[0] > '4')
        throw ConfigError("inject_levels: expected a comma list of 1..4 or 'none', got '" + inject_levels + "'");
      on[tok[0] - '1'] = true;
    }
    return on;
  }

  ModelConfig model() const {
    ModelConfig m;
    m.image_size = image_size;
    m.base_width = base_width;
    m.backbone_width = backbone_width;
    m.critic_width = critic_width;
    m.noise_channels = noise_channels;
    m.noise_sigma = noise_sigma;
    m.window = window;
    m.heads = heads;
    m.mlp_ratio = mlp_ratio;
    m.perceptual_tap = perceptual_tap;
    m.inject = inject();
    m.ablation = ablation;
    m.backbone_seed = backbone_seed;
    return m;
  }

  void validate() const {
    if (!(lr_g > 0) || !(lr_d > 0)) throw ConfigError("lr_g and lr_d must be > 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("beta1/beta2 must be in [0,1)");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (n_critic == 0) throw ConfigError("n_critic must be >= 1");
    if (!(clip_c > 0)) throw ConfigError("clip_c must be > 0");
    if (gp_weight < 0) throw ConfigError("gp_weight must be >= 0");
    if (lambda_g < 0 || lambda_p < 0 || lambda_l1 < 0 || lambda_c < 0)
      throw ConfigError("loss weights must be >= 0");
    if (!(split_ratio > 0 && split_ratio <= 1)) throw ConfigError("split_ratio must be in (0,1]");
    if (steps_required) throw ConfigError("steps: profile = paper requires an explicit value");
    try {
      model().validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
};

/// Full-scale settings: 256x256 inputs, batch 16, full widths. The step count
/// must be supplied separately.
inline void apply_paper_profile(TrainConfig& c) {
  c.profile = "paper";
  c.image_size = 256;
  c.batch_size = 16;
  c.base_width = 64;
  c.backbone_width = 64;
  c.critic_width = 64;
  c.steps_required = true;
}

namespace detail {

template <typename U>
U parse_number(const std::string& key, const std::string& s) {
  U v{};
  const char* first = s.data();
  const char* last = s.data() + s.size();
  std::from_chars_result r;
  if constexpr (std::is_floating_point_v<U>) {
    // from_chars for double is available in libstdc++ 11
    r = std::from_chars(first, last, v);
  } else {
    if (!s.empty() && s[0] == '-') throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
    r = std::from_chars(first, last, v);
  }
  if (r.ec != std::errc() || r.ptr != last)
    throw ConfigError(key + ": cannot parse '" + s + "'");
  return v;
}

template <typename U>
std::string format_number(U v) {
  std::ostringstream os;
  if constexpr (std::is_floating_point_v<U>) os.precision(17);
  os << v;
  return os.str();
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

struct ConfigField {
  std::string name;
  std::string help;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    auto num = [&f](const char* name, const char* help, auto TrainConfig::*member) {
      using U = std::remove_reference_t<decltype(std::declval<TrainConfig&>().*member)>;
      f.push_back({name, help,
                   [member, name](TrainConfig& c, const std::string& s) {
                     c.*member = detail::parse_number<U>(name, s);
                   },
                   [member](const TrainConfig& c) { return detail::format_number(c.*member); }});
    };
    auto str = [&f](const char* name, const char* help, std::string TrainConfig::*member) {
      f.push_back({name, help, [member](TrainConfig& c, const std::string& s) { c.*member = s; },
                   [member](const TrainConfig& c) { return c.*member; }});
    };
    f.push_back({"profile", "desk or paper (applied before other keys)",
                 [](TrainConfig& c, const std::string& s) {
                   if (s == "paper") apply_paper_profile(c);
                   else if (s == "desk") c.profile = "desk";
                   else throw ConfigError("profile: expected desk or paper, got '" + s + "'");
                 },
                 [](const TrainConfig& c) { return c.profile; }});
    num("lr_g", "generator learning rate", &TrainConfig::lr_g);
    num("lr_d", "critic learning rate", &TrainConfig::lr_d);
    num("beta1", "Adam beta1", &TrainConfig::beta1);
    num("beta2", "Adam beta2", &TrainConfig::beta2);
    num("batch_size", "images per step", &TrainConfig::batch_size);
    f.push_back({"steps", "generator updates to run",
                 [](TrainConfig& c, const std::string& s) {
                   c.steps = detail::parse_number<std::size_t>("steps", s);
                   c.steps_required = false;
                 },
                 [](const TrainConfig& c) { return std::to_string(c.steps); }});
    num("seed", "training seed", &TrainConfig::seed);
    num("n_critic", "critic updates per generator update", &TrainConfig::n_critic);
    f.push_back({"lipschitz", "clip or gp",
                 [](TrainConfig& c, const std::string& s) {
                   if (s == "clip") c.lipschitz = Lipschitz::clip;
                   else if (s == "gp") c.lipschitz = Lipschitz::gp;
                   else throw ConfigError("lipschitz: expected clip or gp, got '" + s + "'");
                 },
                 [](const TrainConfig& c) { return std::string(c.lipschitz == Lipschitz::clip ? "clip" : "gp"); }});
    num("clip_c", "critic weight clip bound", &TrainConfig::clip_c);
    num("gp_weight", "gradient penalty weight (lipschitz = gp)", &TrainConfig::gp_weight);
    num("lambda_g", "adversarial loss weight", &TrainConfig::lambda_g);
    num("lambda_p", "perceptual loss weight", &TrainConfig::lambda_p);
    num("lambda_l1", "L1 loss weight", &TrainConfig::lambda_l1);
    num("lambda_c", "colour loss weight", &TrainConfig::lambda_c);
    num("image_size", "training resolution (multiple of 16)", &TrainConfig::image_size);
    f.push_back({"ablation", "full, unet, no_color_encoder or no_color_transformer",
                 [](TrainConfig& c, const std::string& s) {
                   try {
                     c.ablation = parse_ablation(s);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(std::string("ablation: ") + e.what());
                   }
                 },
                 [](const TrainConfig& c) { return to_string(c.ablation); }});
    num("base_width", "encoder width of the first stage", &TrainConfig::base_width);
    num("backbone_width", "backbone width of the first stage", &TrainConfig::backbone_width);
    num("critic_width", "critic width of the first stage", &TrainConfig::critic_width);
    num("noise_channels", "colour encoder noise channels", &TrainConfig::noise_channels);
    num("noise_sigma", "colour encoder noise standard deviation", &TrainConfig::noise_sigma);
    num("window", "maximum Swin window size", &TrainConfig::window);
    num("heads", "Swin attention heads", &TrainConfig::heads);
    num("mlp_ratio", "Swin MLP expansion", &TrainConfig::mlp_ratio);
    num("perceptual_tap", "backbone stage for the perceptual loss (1-4)", &TrainConfig::perceptual_tap);
    str("inject_levels", "encoder levels receiving backbone features, e.g. 1,2,3,4 or none",
        &TrainConfig::inject_levels);
    num("backbone_seed", "seed of the surrogate backbone", &TrainConfig::backbone_seed);
    str("backbone_weights", "optional backbone weight file", &TrainConfig::backbone_weights);
    num("split_ratio", "fraction of images in the train split", &TrainConfig::split_ratio);
    num("checkpoint_every", "steps between checkpoints (0 = final only)", &TrainConfig::checkpoint_every);
    num("log_every", "steps between progress lines (0 = silent)", &TrainConfig::log_every);
    num("eval_seed", "noise seed used by evaluate", &TrainConfig::eval_seed);
    f.push_back({"colorfulness_mode", "lab_std or hasler_susstrunk",
                 [](TrainConfig& c, const std::string& s) {
                   try {
                     c.colorfulness_mode = parse_colorfulness_mode(s);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(std::string("colorfulness_mode: ") + e.what());
                   }
                 },
                 [](const TrainConfig& c) {
                   return std::string(c.colorfulness_mode == ColorfulnessMode::lab_std ? "lab_std"
                                                                                       : "hasler_susstrunk");
                 }});
    f.push_back({"delta_mode", "mean_of_deltas or delta_of_means",
                 [](TrainConfig& c, const std::string& s) {
                   try {
                     c.delta_mode = parse_delta_mode(s);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(std::string("delta_mode: ") + e.what());
                   }
                 },
                 [](const TrainConfig& c) {
                   return std::string(c.delta_mode == DeltaMode::mean_of_deltas ? "mean_of_deltas"
                                                                                : "delta_of_means");
                 }});
    return f;
  }();
  return fields;
}

using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline KeyValues parse_key_values(std::istream& is, const std::string& source) {
  KeyValues kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    kv.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return kv;
}

inline KeyValues read_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  return parse_key_values(is, path.string());
}

/// Applies key-values in order, except that `profile` is applied first.
/// Later entries win, so callers append command-line overrides last.
inline void apply_key_values(TrainConfig& c, const KeyValues& kv) {
  const auto& fields = config_fields();
  auto find = [&](const std::string& k) -> const ConfigField& {
    for (const auto& f : fields)
      if (f.name == k) return f;
    throw ConfigError("unknown config key '" + k + "'");
  };
  for (const auto& [k, v] : kv) find(k);
  for (const auto& [k, v] : kv)
    if (k == "profile") find(k).set(c, v);
  for (const auto& [k, v] : kv)
    if (k != "profile") find(k).set(c, v);
}

inline std::map<std::string, std::string> config_to_map(const TrainConfig& c) {
  std::map<std::string, std::string> m;
  for (const auto& f : config_fields()) m[f.name] = f.get(c);
  return m;
}

inline std::string config_to_text(const TrainConfig& c) {
  std::string out;
  for (const auto& f : config_fields()) out += f.name + " = " + f.get(c) + "\n";
  return out;
}

}  // namespace colorgan
