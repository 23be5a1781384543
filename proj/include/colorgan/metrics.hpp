#pragma once

// Image-quality metrics on 8-bit RGB: PSNR, SSIM (luma), colorfulness and its
// absolute difference, plus the per-image report and its CSV/JSON writers.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "colorgan/colorspace.hpp"

namespace colorgan {

inline constexpr double kPsnrCap = 99.0;

namespace detail {
inline void require_same_size(const RgbImage& a, const RgbImage& b, const char* what) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument(std::string(what) + ": malformed image");
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument(std::string(what) + ": size mismatch " + std::to_string(a.width) + "x" +
                                std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                                std::to_string(b.height));
}
}  // namespace detail

/// 10*log10(255^2 / MSE) over all channels; identical images give kPsnrCap.
inline double psnr(const RgbImage& a, const RgbImage& b) {
  detail::require_same_size(a, b, "psnr");
  if (a.data.empty()) throw std::invalid_argument("psnr: empty image");
  double se = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = double(a.data[i]) - double(b.data[i]);
    se += d * d;
  }
  if (se == 0) return kPsnrCap;
  const double mse = se / double(a.data.size());
  return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

/// BT.601 luma in [0,255].
inline std::vector<double> luma(const RgbImage& img) {
  std::vector<double> y(img.pixels());
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = 0.299 * img.data[3 * i] + 0.587 * img.data[3 * i + 1] + 0.114 * img.data[3 * i + 2];
  return y;
}

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
inline std::vector<double> ssim_kernel() {
  std::vector<double> g(kSsimWindow);
  const double c = (kSsimWindow - 1) / 2.0;
  double s = 0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    g[i] = std::exp(-(i - c) * (i - c) / (2 * kSsimSigma * kSsimSigma));
    s += g[i];
  }
  for (auto& v : g) v /= s;
  return g;
}

/// Single-scale SSIM on the luma plane, averaged over all valid window
/// positions (no padding).
inline double ssim(const RgbImage& a, const RgbImage& b) {
  detail::require_same_size(a, b, "ssim");
  if (a.width < kSsimWindow || a.height < kSsimWindow)
    throw std::invalid_argument("ssim: images must be at least 11x11");
  const double C1 = (0.01 * 255) * (0.01 * 255), C2 = (0.03 * 255) * (0.03 * 255);
  const auto ya = luma(a), yb = luma(b);
  const auto g = ssim_kernel();
  const std::size_t W = a.width, H = a.height, ow = W - kSsimWindow + 1;

  // Separable filtering: horizontal pass over all rows, then vertical.
  auto hfilter = [&](const std::vector<double>& src) {
    std::vector<double> out(H * ow, 0.0);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double s = 0;
        for (std::size_t k = 0; k < kSsimWindow; ++k) s += g[k] * src[y * W + x + k];
        out[y * ow + x] = s;
      }
    return out;
  };
  const std::size_t oh = H - kSsimWindow + 1;
  auto vfilter = [&](const std::vector<double>& src) {
    std::vector<double> out(oh * ow, 0.0);
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t k = 0; k < kSsimWindow; ++k)
        for (std::size_t x = 0; x < ow; ++x) out[y * ow + x] += g[k] * src[(y + k) * ow + x];
    return out;
  };
  auto filt = [&](const std::vector<double>& src) { return vfilter(hfilter(src)); };

  std::vector<double> aa(ya.size()), bb(ya.size()), ab(ya.size());
  for (std::size_t i = 0; i < ya.size(); ++i) {
    aa[i] = ya[i] * ya[i];
    bb[i] = yb[i] * yb[i];
    ab[i] = ya[i] * yb[i];
  }
  const auto mu_a = filt(ya), mu_b = filt(yb), s_aa = filt(aa), s_bb = filt(bb), s_ab = filt(ab);
  double total = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = s_aa[i] - ma * ma, vb = s_bb[i] - mb * mb, cov = s_ab[i] - ma * mb;
    total += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
  }
  return total / double(mu_a.size());
}

enum class ColorfulnessMode {
  lab_std,         // sqrt(var(a) + var(b)), population variances
  hasler_susstrunk // RGB opponent measure: sigma_rgyb + 0.3 * mu_rgyb
};

inline ColorfulnessMode parse_colorfulness_mode(const std::string& s) {
  if (s == "lab_std") return ColorfulnessMode::lab_std;
  if (s == "hasler_susstrunk") return ColorfulnessMode::hasler_susstrunk;
  throw std::invalid_argument("unknown colorfulness mode '" + s + "' (expected lab_std, hasler_susstrunk)");
}

inline double colorfulness(const LabImage& lab) {
  const std::size_t n = lab.pixels();
  if (n == 0) return 0.0;
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += lab.a[i];
    mb += lab.b[i];
  }
  ma /= double(n);
  mb /= double(n);
  double va = 0, vb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    va += (lab.a[i] - ma) * (lab.a[i] - ma);
    vb += (lab.b[i] - mb) * (lab.b[i] - mb);
  }
  return std::sqrt((va + vb) / double(n));
}

inline double colorfulness_hasler_susstrunk(const RgbImage& img) {
  const std::size_t n = img.pixels();
  if (n == 0) return 0.0;
  double mrg = 0, myb = 0;
  std::vector<double> rg(n), yb(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = img.data[3 * i], g = img.data[3 * i + 1], b = img.data[3 * i + 2];
    rg[i] = r - g;
    yb[i] = 0.5 * (r + g) - b;
    mrg += rg[i];
    myb += yb[i];
  }
  mrg /= double(n);
  myb /= double(n);
  double vrg = 0, vyb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    vrg += (rg[i] - mrg) * (rg[i] - mrg);
    vyb += (yb[i] - myb) * (yb[i] - myb);
  }
  const double sd = std::sqrt(vrg / double(n) + vyb / double(n));
  const double mu = std::sqrt(mrg * mrg + myb * myb);
  return sd + 0.3 * mu;
}

inline double colorfulness(const RgbImage& img, ColorfulnessMode mode = ColorfulnessMode::lab_std) {
  if (!img.valid()) throw std::invalid_argument("colorfulness: malformed image");
  return mode == ColorfulnessMode::lab_std ? colorfulness(srgb_to_lab(img)) : colorfulness_hasler_susstrunk(img);
}

inline double delta_colorfulness(const RgbImage& pred, const RgbImage& gt,
                                 ColorfulnessMode mode = ColorfulnessMode::lab_std) {
  return std::abs(colorfulness(pred, mode) - colorfulness(gt, mode));
}

// ------------------------------------------------------------------ report

struct MetricRow {
  std::string image;
  double psnr_db = 0, ssim = 0, colorfulness_pred = 0, colorfulness_gt = 0, delta_colorfulness = 0;
};

/// How the corpus-level delta is formed.
enum class DeltaMode {
  mean_of_deltas,  // mean over images of |cf_pred - cf_gt|
  delta_of_means   // |mean cf_pred - mean cf_gt|
};

inline DeltaMode parse_delta_mode(const std::string& s) {
  if (s == "mean_of_deltas") return DeltaMode::mean_of_deltas;
  if (s == "delta_of_means") return DeltaMode::delta_of_means;
  throw std::invalid_argument("unknown delta mode '" + s + "' (expected mean_of_deltas, delta_of_means)");
}

inline MetricRow measure(const std::string& name, const RgbImage& pred, const RgbImage& gt,
                         ColorfulnessMode mode = ColorfulnessMode::lab_std) {
  MetricRow r;
  r.image = name;
  r.psnr_db = psnr(pred, gt);
  r.ssim = ssim(pred, gt);
  r.colorfulness_pred = colorfulness(pred, mode);
  r.colorfulness_gt = colorfulness(gt, mode);
  r.delta_colorfulness = std::abs(r.colorfulness_pred - r.colorfulness_gt);
  return r;
}

struct MetricReport {
  std::vector<MetricRow> rows;
  DeltaMode delta_mode = DeltaMode::mean_of_deltas;

  /// Corpus means; delta_colorfulness follows delta_mode.
  MetricRow summary() const {
    MetricRow s;
    s.image = "mean";
    if (rows.empty()) return s;
    for (const auto& r : rows) {
      s.psnr_db += r.psnr_db;
      s.ssim += r.ssim;
      s.colorfulness_pred += r.colorfulness_pred;
      s.colorfulness_gt += r.colorfulness_gt;
      s.delta_colorfulness += r.delta_colorfulness;
    }
    const double n = double(rows.size());
    s.psnr_db /= n;
    s.ssim /= n;
    s.colorfulness_pred /= n;
    s.colorfulness_gt /= n;
    s.delta_colorfulness /= n;
    if (delta_mode == DeltaMode::delta_of_means)
      s.delta_colorfulness = std::abs(s.colorfulness_pred - s.colorfulness_gt);
    return s;
  }
};

inline constexpr const char* kMetricColumns[] = {"psnr_db", "ssim", "colorfulness_pred", "colorfulness_gt",
                                                 "delta_colorfulness"};

inline std::string metrics_csv(const MetricReport& rep) {
  std::ostringstream os;
  os << std::setprecision(17) << "image";
  for (const char* c : kMetricColumns) os << ',' << c;
  os << '\n';
  for (const auto& r : rep.rows)
    os << r.image << ',' << r.psnr_db << ',' << r.ssim << ',' << r.colorfulness_pred << ','
       << r.colorfulness_gt << ',' << r.delta_colorfulness << '\n';
  return os.str();
}

inline nlohmann::json metrics_json(const MetricReport& rep) {
  const auto s = rep.summary();
  return {{"psnr_db", s.psnr_db},
          {"ssim", s.ssim},
          {"colorfulness_pred", s.colorfulness_pred},
          {"colorfulness_gt", s.colorfulness_gt},
          {"delta_colorfulness", s.delta_colorfulness}};
}

inline void write_metrics(const MetricReport& rep, const std::filesystem::path& csv_path,
                          const std::filesystem::path& json_path) {
  {
    std::ofstream os(csv_path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + csv_path.string());
    os << metrics_csv(rep);
  }
  std::ofstream os(json_path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + json_path.string());
  os << metrics_json(rep).dump(2) << '\n';
}

}  // namespace colorgan
