#pragma once

// Dataset enumeration and splitting, batch assembly, the alternating
// critic/generator update, training state persistence, and the train,
// colorize and evaluate workflows.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "colorgan/checkpoint.hpp"
#include "colorgan/colorspace.hpp"
#include "colorgan/config.hpp"
#include "colorgan/image_io.hpp"
#include "colorgan/losses.hpp"
#include "colorgan/metrics.hpp"
#include "colorgan/netmodel.hpp"
#include "colorgan/ops.hpp"
#include "colorgan/optim.hpp"
#include "colorgan/params.hpp"
#include "colorgan/tensor.hpp"

namespace colorgan {

namespace fs = std::filesystem;

// ------------------------------------------------------------------ dataset

enum class Split { train, test, all };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::all: return "all";
  }
  return "all";
}

/// `usage` marks errors caused by the caller's arguments (missing or empty
/// directory) rather than by file contents.
class DatasetError : public std::runtime_error {
 public:
  DatasetError(const std::string& msg, bool usage) : std::runtime_error(msg), usage_(usage) {}
  bool usage() const { return usage_; }

 private:
  bool usage_;
};

struct Dataset {
  fs::path root;
  Split split = Split::all;
  std::vector<fs::path> paths;
  std::size_t size() const { return paths.size(); }
};

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t split_key(const std::string& filename, std::uint64_t seed) {
  return fnv1a(filename, fnv1a(std::to_string(seed)));
}

namespace detail {

inline std::vector<std::string> read_id_list(const fs::path& p) {
  std::ifstream is(p);
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(is, line)) {
    line = trim(line);
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

/// PASCAL VOC layout: JPEGImages/ plus ImageSets/Main/{train,val}.txt.
inline std::optional<std::pair<std::vector<fs::path>, std::vector<fs::path>>> voc_split(const fs::path& root) {
  const auto main = root / "ImageSets" / "Main";
  const auto images = root / "JPEGImages";
  if (!fs::is_regular_file(main / "train.txt") || !fs::is_regular_file(main / "val.txt") ||
      !fs::is_directory(images))
    return std::nullopt;
  auto to_paths = [&](const std::vector<std::string>& ids) {
    std::vector<fs::path> out;
    for (const auto& id : ids) out.push_back(images / (id + ".jpg"));
    return out;
  };
  return std::make_pair(to_paths(read_id_list(main / "train.txt")), to_paths(read_id_list(main / "val.txt")));
}

}  // namespace detail

/// Enumerates images under `dir` and selects one split. Outside the VOC
/// layout the split is a deterministic hash of (filename, seed): files are
/// ordered by that key and the first round(split_ratio * n) form the train
/// split. Every selected file is decoded once to validate it.
inline Dataset load_dataset(const fs::path& dir, Split split, const TrainConfig& cfg) {
  if (!fs::is_directory(dir)) throw DatasetError("data directory not found: " + dir.string(), true);
  Dataset ds;
  ds.root = dir;
  ds.split = split;
  if (auto voc = detail::voc_split(dir)) {
    if (split != Split::test) ds.paths = voc->first;
    if (split != Split::train) ds.paths.insert(ds.paths.end(), voc->second.begin(), voc->second.end());
  } else {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && is_supported_image(e.path())) files.push_back(e.path());
    if (files.empty()) throw DatasetError("no PNG or JPEG images in " + dir.string(), true);
    std::vector<std::pair<std::uint64_t, fs::path>> keyed;
    for (auto& f : files) keyed.emplace_back(split_key(f.filename().string(), cfg.seed), f);
    std::sort(keyed.begin(), keyed.end());
    const auto n_train = static_cast<std::size_t>(std::llround(cfg.split_ratio * double(keyed.size())));
    for (std::size_t i = 0; i < keyed.size(); ++i) {
      const bool is_train = i < n_train;
      if (split == Split::all || (split == Split::train) == is_train) ds.paths.push_back(keyed[i].second);
    }
    std::sort(ds.paths.begin(), ds.paths.end());
  }
  if (ds.paths.empty())
    throw DatasetError("the " + to_string(split) + " split of " + dir.string() + " is empty", true);

  std::string bad;
  for (const auto& p : ds.paths) {
    try {
      const auto img = read_image(p);
      if (is_grayscale(img)) bad += "\n  " + p.string() + ": grayscale image (no chroma to learn)";
    } catch (const std::exception& e) {
      bad += "\n  " + p.string() + ": " + e.what();
    }
  }
  if (!bad.empty()) throw DatasetError("unusable images in " + dir.string() + ":" + bad, false);
  return ds;
}

// ------------------------------------------------------------------ batches

struct Batch {
  Tensorf Ln;   // (B,1,S,S) in [-1,1]
  Tensorf abn;  // (B,2,S,S) in [-1,1]
  Tensorf rgb;  // (B,3,S,S) in [0,1], the resized source
  std::vector<std::string> names;
};

/// Image `i` of the batch at `step`: positions step*B .. step*B+B-1 walk a
/// per-epoch permutation seeded by (seed, epoch). Stateless, so resuming at
/// any step reproduces the same sequence.
inline std::vector<std::size_t> batch_indices(std::size_t step, std::size_t n, std::size_t batch,
                                              std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("batch_indices: empty dataset");
  std::vector<std::size_t> out;
  std::size_t cached_epoch = SIZE_MAX;
  std::vector<std::size_t> perm(n);
  for (std::size_t j = 0; j < batch; ++j) {
    const std::size_t p = step * batch + j;
    const std::size_t epoch = p / n;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), 0);
      std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                       static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
      Rng rng(ss);
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[p % n]);
  }
  return out;
}

/// Resize -> Lab -> normalise for each indexed image.
inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices, std::size_t image_size) {
  const std::size_t B = indices.size(), S = image_size, P = S * S;
  if (B == 0) throw std::invalid_argument("make_batch: no indices");
  std::vector<float> L(B * P), ab(B * 2 * P), rgb(B * 3 * P);
  Batch batch;
  for (std::size_t i = 0; i < B; ++i) {
    if (indices[i] >= ds.size())
      throw std::out_of_range("make_batch: index " + std::to_string(indices[i]) + " outside dataset of " +
                              std::to_string(ds.size()));
    const auto& path = ds.paths[indices[i]];
    RgbImage img;
    try {
      img = read_image(path);
    } catch (const std::exception& e) {
      throw ImageIoError("cannot decode " + path.string() + ": " + e.what());
    }
    const auto small = resize_bilinear(img, S, S);
    const auto n = normalize_lab(srgb_to_lab(small));
    for (std::size_t k = 0; k < P; ++k) {
      L[i * P + k] = static_cast<float>(n.Ln[k]);
      ab[(2 * i) * P + k] = static_cast<float>(n.an[k]);
      ab[(2 * i + 1) * P + k] = static_cast<float>(n.bn[k]);
      for (int c = 0; c < 3; ++c) rgb[(3 * i + c) * P + k] = small.data[3 * k + c] / 255.0f;
    }
    batch.names.push_back(path.filename().string());
  }
  batch.Ln = Tensorf({B, 1, S, S}, std::move(L));
  batch.abn = Tensorf({B, 2, S, S}, std::move(ab));
  batch.rgb = Tensorf({B, 3, S, S}, std::move(rgb));
  return batch;
}

inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices, const TrainConfig& cfg) {
  return make_batch(ds, indices, cfg.image_size);
}

// ------------------------------------------------------------------ state

inline Backbone<float> make_backbone(const TrainConfig& cfg) {
  if (cfg.backbone_weights.empty()) return Backbone<float>::surrogate(cfg.backbone_width, cfg.backbone_seed);
  const auto ck = load_checkpoint(cfg.backbone_weights);
  ParamSet<float> ps;
  for (const auto& e : ck.entries)
    if (e.name.rfind("backbone.", 0) == 0) ps.add(e.name, Tensorf(e.shape, e.values));
  auto bb = Backbone<float>::from_params(ps);
  for (std::size_t k = 1; k <= kStages; ++k)
    if (bb.tap_channels(k) != (cfg.backbone_width << (k - 1)))
      throw ConfigError("backbone_weights: stage " + std::to_string(k) + " has " +
                        std::to_string(bb.tap_channels(k)) + " channels, backbone_width implies " +
                        std::to_string(cfg.backbone_width << (k - 1)));
  return bb;
}

struct TrainState {
  Backbone<float> backbone;
  std::unique_ptr<Generator<float>> gen;
  std::unique_ptr<Critic<float>> critic;
  AdamState<float> adam_g, adam_d;
  std::size_t step = 0;
  Rng rng;
  std::vector<LossBundle> log;
};

inline constexpr std::uint64_t kNoiseStream = 0x9E3779B97F4A7C15ULL;

inline TrainState make_train_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState st;
  st.backbone = make_backbone(cfg);
  Rng init(cfg.seed);
  st.gen = std::make_unique<Generator<float>>(cfg.model(), init);
  st.critic = std::make_unique<Critic<float>>(cfg.critic_width, init);
  st.adam_g = make_adam_state<float>(st.gen->params().tensors());
  st.adam_d = make_adam_state<float>(st.critic->params().tensors());
  st.rng = Rng(cfg.seed ^ kNoiseStream);
  return st;
}

// ------------------------------------------------------------------ updates

/// Adds the critic-parameter gradient of
///   P = weight * mean_s (||grad_x D(x_s)|| - 1)^2
/// at random interpolates x between real and fake ab, and returns P. The
/// parameter gradient of the input-gradient norm is a Hessian-vector product.
/// It is taken by central differences of parameter gradients along the
/// input-gradient direction, with the critic's activation pattern frozen at x
/// so the difference is exact rather than picking up jumps at ReLU kinks.
/// Leaves the critic's grads holding only this term.
template <typename T>
double gradient_penalty(Critic<T>& D, const Tensor<T>& Ln, const Tensor<T>& real, const Tensor<T>& fake,
                        double weight, Rng& rng) {
  const std::size_t B = real.dim(0), per = real.numel() / B;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<T> xh(real.numel());
  for (std::size_t s = 0; s < B; ++s) {
    const double e = unif(rng);
    for (std::size_t k = 0; k < per; ++k) {
      const std::size_t i = s * per + k;
      xh[i] = static_cast<T>(e * real[i] + (1 - e) * fake[i]);
    }
  }
  // f(x) = sum over samples of the mean patch score, so grad_x f splits per sample.
  typename Critic<T>::Pattern pattern;
  auto f_at = [&](const std::vector<T>& vals, Tensor<T>* input_out, bool record) {
    Tensor<T> x(real.shape(), vals);
    x.set_requires_grad(true);
    auto f = scale(mean(D.forward(Ln, x, record ? &pattern : nullptr, record ? nullptr : &pattern)),
                   static_cast<T>(B));
    D.params().zero_grad();
    f.backward();
    if (input_out) *input_out = x;
  };
  Tensor<T> x;
  f_at(xh, &x, true);
  const auto g = x.grad();
  std::vector<double> coef(B);
  double P = 0;
  for (std::size_t s = 0; s < B; ++s) {
    double n2 = 0;
    for (std::size_t k = 0; k < per; ++k) n2 += double(g[s * per + k]) * g[s * per + k];
    const double n = std::sqrt(n2);
    P += (n - 1) * (n - 1);
    coef[s] = n > 0 ? weight * 2.0 * (n - 1) / n / double(B) : 0.0;
  }
  P *= weight / double(B);

  std::vector<double> v(xh.size());
  double vmax = 0;
  for (std::size_t s = 0; s < B; ++s)
    for (std::size_t k = 0; k < per; ++k) {
      v[s * per + k] = coef[s] * g[s * per + k];
      vmax = std::max(vmax, std::abs(v[s * per + k]));
    }
  auto& ps = D.params();
  if (vmax == 0) {
    ps.zero_grad();
    return P;
  }
  // With the pattern frozen the critic is affine in x, so any step is exact;
  // a unit-scale step keeps rounding small.
  const double h = 1.0 / vmax;
  std::vector<T> xp(xh.size()), xm(xh.size());
  for (std::size_t i = 0; i < xh.size(); ++i) {
    xp[i] = static_cast<T>(xh[i] + h * v[i]);
    xm[i] = static_cast<T>(xh[i] - h * v[i]);
  }
  f_at(xp, nullptr, false);
  std::vector<std::vector<T>> gp;
  for (auto& t : ps.tensors()) gp.emplace_back(t.grad().begin(), t.grad().end());
  f_at(xm, nullptr, false);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto gm = ps.tensors()[i].mutable_grad();
    for (std::size_t j = 0; j < gm.size(); ++j) gm[j] = static_cast<T>((gp[i][j] - gm[j]) / (2 * h));
  }
  return P;
}

inline LossBundle train_step(TrainState& st, const Batch& batch, const TrainConfig& cfg) {
  auto& G = *st.gen;
  auto& D = *st.critic;
  const std::size_t B = batch.Ln.dim(0), H = batch.Ln.dim(2), W = batch.Ln.dim(3);
  const std::string at_step = " at step " + std::to_string(st.step + 1);
  LossBundle out;

  for (std::size_t k = 0; k < cfg.n_critic; ++k) {
    Tensorf fake;
    {
      NoGradGuard no_grad;
      const auto noise = G.noise().sample<float>(B, H, W, st.rng);
      fake = G.forward(batch.Ln, noise, st.backbone).abn;
    }
    double penalty = 0;
    if (cfg.lipschitz == Lipschitz::gp) penalty = gradient_penalty(D, batch.Ln, batch.abn, fake, cfg.gp_weight, st.rng);
    else D.params().zero_grad();
    WganLosses<float> w;
    try {
      w = wgan_losses(D(batch.Ln, batch.abn), D(batch.Ln, fake));
    } catch (const NonFiniteLoss& e) {
      throw NonFiniteLoss(std::string("d_loss: ") + e.what() + at_step);
    }
    w.d_loss.backward();
    adam_step<float>(D.params().tensors(), st.adam_d, cfg.adam_d());
    if (cfg.lipschitz == Lipschitz::clip) clip_critic(D.params(), cfg.clip_c);
    out.d_loss = double(w.d_loss.item()) + penalty;
    if (!std::isfinite(out.d_loss)) throw NonFiniteLoss("d_loss is not finite" + at_step);
  }

  G.params().zero_grad();
  const auto noise = G.noise().sample<float>(B, H, W, st.rng);
  const auto gen = G.forward(batch.Ln, noise, st.backbone);
  const auto rgb_gt = lab_to_rgb(batch.Ln, batch.abn);
  const auto rgb_pred = lab_to_rgb(batch.Ln, gen.abn);
  LossTerms<float> t;
  t.Lg = scale(mean(D(batch.Ln, gen.abn)), -1.0f);
  t.Lp = perceptual_loss(rgb_gt, rgb_pred, st.backbone, cfg.perceptual_tap);
  t.L1 = l1_loss(gen.abn, batch.abn);
  if (G.config().has_color_encoder()) t.Lc = color_loss(gen.trace.x_ce, st.backbone.tap(backbone_input(rgb_gt), kStages));
  Tensorf total;
  try {
    total = total_loss(t, cfg.weights());
  } catch (const NonFiniteLoss& e) {
    throw NonFiniteLoss(e.what() + at_step);
  }
  total.backward();
  adam_step<float>(G.params().tensors(), st.adam_g, cfg.adam_g());

  ++st.step;
  out.Lg = t.Lg.item();
  out.Lp = t.Lp.item();
  out.L1 = t.L1.item();
  out.Lc = t.Lc.defined() ? double(t.Lc.item()) : 0.0;
  out.total = total.item();
  st.log.push_back(out);
  return out;
}

// ------------------------------------------------------------------ persistence

inline std::string rng_to_string(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline Rng rng_from_string(const std::string& s) {
  Rng rng;
  std::istringstream is(s);
  is >> rng;
  if (!is) throw CheckpointError("corrupt rng_state in checkpoint");
  return rng;
}

inline constexpr const char* kGeneratorPrefix = "generator.";

inline Checkpoint state_to_checkpoint(const TrainState& st, const TrainConfig& cfg) {
  Checkpoint ck;
  ck.meta["config"] = config_to_map(cfg);
  ck.meta["step"] = st.step;
  ck.meta["rng_state"] = rng_to_string(st.rng);
  ck.meta["adam_generator_step"] = st.adam_g.step;
  ck.meta["adam_critic_step"] = st.adam_d.step;
  ck.meta["backbone_hash"] = std::to_string(st.backbone.weight_hash());
  json log = json::array();
  for (std::size_t i = 0; i < st.log.size(); ++i) {
    const auto& b = st.log[i];
    log.push_back({i + 1, b.Lg, b.Lp, b.L1, b.Lc, b.total, b.d_loss});
  }
  ck.meta["loss_log"] = std::move(log);
  add_params(ck, kGeneratorPrefix, st.gen->params());
  add_params(ck, "", st.critic->params());
  auto add_moments = [&](const std::string& prefix, const ParamSet<float>& ps, const AdamState<float>& a) {
    for (std::size_t i = 0; i < ps.size(); ++i) {
      ck.add(prefix + ps.names()[i] + ".m", ps.tensors()[i].shape(), a.m[i]);
      ck.add(prefix + ps.names()[i] + ".v", ps.tensors()[i].shape(), a.v[i]);
    }
  };
  add_moments("adam.generator.", st.gen->params(), st.adam_g);
  add_moments("adam.", st.critic->params(), st.adam_d);
  return ck;
}

/// Configuration stored in a checkpoint's manifest.
inline TrainConfig config_from_checkpoint(const json& meta) {
  if (!meta.contains("config")) throw CheckpointError("checkpoint has no config in its manifest");
  TrainConfig cfg;
  KeyValues kv;
  for (const auto& [k, v] : meta.at("config").items()) kv.emplace_back(k, v.get<std::string>());
  apply_key_values(cfg, kv);
  return cfg;
}

inline void check_backbone(const json& meta, const Backbone<float>& bb) {
  if (meta.contains("backbone_hash") && meta.at("backbone_hash").get<std::string>() != std::to_string(bb.weight_hash()))
    throw CheckpointError("backbone weights differ from the ones used in training");
}

/// Rebuilds a full training state. The model layout comes from `cfg`; every
/// generator, critic and optimiser field must be present with a matching shape.
inline TrainState state_from_checkpoint(const Checkpoint& ck, const TrainConfig& cfg) {
  TrainState st = make_train_state(cfg);
  check_backbone(ck.meta, st.backbone);
  load_params(ck, kGeneratorPrefix, st.gen->params());
  load_params(ck, "", st.critic->params());
  auto load_moments = [&](const std::string& prefix, const ParamSet<float>& ps, AdamState<float>& a) {
    std::string missing;
    for (std::size_t i = 0; i < ps.size(); ++i)
      for (auto [suffix, dst] : {std::pair{".m", &a.m[i]}, std::pair{".v", &a.v[i]}}) {
        const auto* e = ck.find(prefix + ps.names()[i] + suffix);
        if (!e || e->values.size() != dst->size())
          missing += (missing.empty() ? "" : ", ") + prefix + ps.names()[i] + suffix;
        else
          *dst = e->values;
      }
    if (!missing.empty()) throw CheckpointError("checkpoint is missing fields: " + missing);
  };
  load_moments("adam.generator.", st.gen->params(), st.adam_g);
  load_moments("adam.", st.critic->params(), st.adam_d);
  st.adam_g.step = ck.meta.at("adam_generator_step").get<std::int64_t>();
  st.adam_d.step = ck.meta.at("adam_critic_step").get<std::int64_t>();
  st.step = ck.meta.at("step").get<std::size_t>();
  st.rng = rng_from_string(ck.meta.at("rng_state").get<std::string>());
  for (const auto& row : ck.meta.value("loss_log", json::array()))
    st.log.push_back({row.at(1).get<double>(), row.at(2).get<double>(), row.at(3).get<double>(),
                      row.at(4).get<double>(), row.at(5).get<double>(), row.at(6).get<double>()});
  return st;
}

inline void save_state(const fs::path& path, const TrainState& st, const TrainConfig& cfg) {
  save_checkpoint(path, state_to_checkpoint(st, cfg));
}

inline std::string loss_csv(const std::vector<LossBundle>& log) {
  std::ostringstream os;
  os.precision(9);
  os << "step,Lg,Lp,L1,Lc,total,d_loss\n";
  for (std::size_t i = 0; i < log.size(); ++i) {
    const auto& b = log[i];
    os << i + 1 << ',' << b.Lg << ',' << b.Lp << ',' << b.L1 << ',' << b.Lc << ',' << b.total << ',' << b.d_loss
       << '\n';
  }
  return os.str();
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << text;
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

// ------------------------------------------------------------------ workflows

struct TrainResult {
  fs::path checkpoint;
  fs::path loss_log;
  std::size_t steps_run = 0;
};

/// Called after each step; returning false stops the run (the final
/// checkpoint is still written).
using StepObserver = std::function<bool(const TrainState&, const LossBundle&)>;

inline TrainResult train(const TrainConfig& cfg, const fs::path& data_dir, const fs::path& out_dir,
                         const std::optional<fs::path>& resume = std::nullopt, const StepObserver& observer = {},
                         std::ostream* progress = nullptr) {
  cfg.validate();
  const auto ds = load_dataset(data_dir, Split::train, cfg);
  fs::create_directories(out_dir);
  TrainState st = resume ? state_from_checkpoint(load_checkpoint(*resume), cfg) : make_train_state(cfg);
  TrainResult res{out_dir / "final.ckpt", out_dir / "loss.csv", 0};

  while (st.step < cfg.steps) {
    const auto idx = batch_indices(st.step, ds.size(), cfg.batch_size, cfg.seed);
    const auto batch = make_batch(ds, idx, cfg);
    const auto b = train_step(st, batch, cfg);
    ++res.steps_run;
    if (progress && cfg.log_every && st.step % cfg.log_every == 0)
      *progress << "step " << st.step << "  total " << b.total << "  L1 " << b.L1 << "  Lp " << b.Lp << "  Lg "
                << b.Lg << "  Lc " << b.Lc << "  d_loss " << b.d_loss << std::endl;
    if (cfg.checkpoint_every && st.step % cfg.checkpoint_every == 0 && st.step < cfg.steps) {
      save_state(out_dir / "latest.ckpt", st, cfg);
      write_text_atomic(res.loss_log, loss_csv(st.log));
    }
    if (observer && !observer(st, b)) break;
  }
  save_state(res.checkpoint, st, cfg);
  write_text_atomic(res.loss_log, loss_csv(st.log));
  return res;
}

/// Generator and backbone restored from a checkpoint for inference.
struct LoadedModel {
  TrainConfig cfg;
  Backbone<float> backbone;
  std::unique_ptr<Generator<float>> gen;
};

inline LoadedModel load_model(const fs::path& checkpoint) {
  const auto ck = load_checkpoint(checkpoint);
  LoadedModel m;
  m.cfg = config_from_checkpoint(ck.meta);
  m.backbone = make_backbone(m.cfg);
  check_backbone(ck.meta, m.backbone);
  Rng rng(m.cfg.seed);
  m.gen = std::make_unique<Generator<float>>(m.cfg.model(), rng);
  load_params(ck, kGeneratorPrefix, m.gen->params());
  return m;
}

/// Bilinear resize of a float plane with half-pixel centres.
inline std::vector<float> resize_plane(const std::vector<float>& src, std::size_t w, std::size_t h, std::size_t nw,
                                       std::size_t nh) {
  if (w == nw && h == nh) return src;
  std::vector<float> out(nw * nh);
  const double sx = double(w) / nw, sy = double(h) / nh;
  for (std::size_t y = 0; y < nh; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, h - 1.0);
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - y0;
    for (std::size_t x = 0; x < nw; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, w - 1.0);
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - x0;
      out[y * nw + x] = static_cast<float>((1 - ty) * ((1 - tx) * src[y0 * w + x0] + tx * src[y0 * w + x1]) +
                                           ty * ((1 - tx) * src[y1 * w + x0] + tx * src[y1 * w + x1]));
    }
  }
  return out;
}

/// Predicts chroma at the model resolution, resizes it to the input size and
/// recombines it with the input's full-resolution lightness.
inline RgbImage colorize(const Generator<float>& gen, const Backbone<float>& bb, const RgbImage& img,
                         std::uint64_t seed) {
  if (!img.valid() || img.pixels() == 0) throw std::invalid_argument("colorize: empty or malformed image");
  const std::size_t S = gen.config().image_size;
  const auto lab = srgb_to_lab(img);
  const auto n = normalize_lab(srgb_to_lab(resize_bilinear(img, S, S)));
  std::vector<float> Lv(n.Ln.begin(), n.Ln.end());
  Tensorf Ln({1, 1, S, S}, std::move(Lv));
  NoGradGuard no_grad;
  Rng rng(seed);
  const auto noise = gen.noise().sample<float>(1, S, S, rng);
  const auto abn = gen.forward(Ln, noise, bb).abn;
  std::vector<float> a(abn.values().begin(), abn.values().begin() + S * S);
  std::vector<float> b(abn.values().begin() + S * S, abn.values().end());
  for (auto& v : a) v *= 128.0f;
  for (auto& v : b) v *= 128.0f;
  LabImage out(img.width, img.height);
  out.L = lab.L;
  out.a = resize_plane(a, S, S, img.width, img.height);
  out.b = resize_plane(b, S, S, img.width, img.height);
  return lab_to_srgb(out);
}

/// Per-image noise seed for evaluation: fixed per (eval_seed, filename).
inline std::uint64_t eval_seed_for(const TrainConfig& cfg, const fs::path& p) {
  return split_key(p.filename().string(), cfg.eval_seed);
}

using Predictor = std::function<RgbImage(const RgbImage&, const fs::path&)>;

inline MetricReport evaluate_with(const Dataset& ds, const TrainConfig& cfg, const Predictor& predict) {
  MetricReport rep;
  rep.delta_mode = cfg.delta_mode;
  for (const auto& p : ds.paths) {
    const auto gt = read_image(p);
    rep.rows.push_back(measure(p.filename().string(), predict(gt, p), gt, cfg.colorfulness_mode));
  }
  return rep;
}

inline MetricReport evaluate(const LoadedModel& model, const Dataset& ds) {
  return evaluate_with(ds, model.cfg, [&](const RgbImage& img, const fs::path& p) {
    return colorize(*model.gen, model.backbone, img, eval_seed_for(model.cfg, p));
  });
}

}  // namespace colorgan
