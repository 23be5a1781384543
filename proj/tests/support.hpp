#pragma once

// Synthetic image folders and scratch directories shared by the tests.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "colorgan/colorspace.hpp"
#include "colorgan/image_io.hpp"

namespace colorgan::testing {

namespace fs = std::filesystem;

/// Fully saturated hue wheel colour, h in [0,1).
inline std::array<double, 3> hue(double h) {
  const double x = h * 6.0;
  const int i = static_cast<int>(std::floor(x)) % 6;
  const double f = x - std::floor(x);
  switch (i) {
    case 0: return {1, f, 0};
    case 1: return {1 - f, 1, 0};
    case 2: return {0, 1, f};
    case 3: return {0, 1 - f, 1};
    case 4: return {f, 0, 1};
    default: return {1, 0, 1 - f};
  }
}

/// Diagonal hue gradient with a few solid discs on top. Strongly coloured
/// and varied in lightness, so chroma is learnable from L.
inline RgbImage synthetic_image(std::size_t w, std::size_t h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double h0 = u(rng), dir = u(rng) * 6.283185307179586;
  const double cx = std::cos(dir), cy = std::sin(dir);
  struct Disc {
    double x, y, r;
    std::array<double, 3> c;
  };
  std::vector<Disc> discs;
  for (int k = 0; k < 3; ++k) {
    auto c = hue(u(rng));
    const double shade = 0.35 + 0.65 * u(rng);
    for (auto& v : c) v *= shade;
    discs.push_back({u(rng) * w, u(rng) * h, (0.12 + 0.15 * u(rng)) * std::min(w, h), c});
  }
  RgbImage img(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double t = (cx * x / double(w) + cy * y / double(h)) * 0.5;
      auto c = hue(std::fmod(h0 + t + 1.0, 1.0));
      const double light = 0.45 + 0.5 * double(y) / double(h);
      for (auto& v : c) v = v * light + 0.1 * (1 - light);
      for (const auto& d : discs)
        if ((x - d.x) * (x - d.x) + (y - d.y) * (y - d.y) < d.r * d.r) c = d.c;
      for (int ch = 0; ch < 3; ++ch)
        img.at(x, y, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(c[ch] * 255.0), 0L, 255L));
    }
  return img;
}

inline RgbImage gray_image(std::size_t w, std::size_t h) {
  RgbImage img(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<std::uint8_t>((x * 7 + y * 3) % 256);
  return img;
}

/// Writes `n` synthetic PNGs named img00.png, img01.png, ... into `dir`.
inline std::vector<fs::path> write_synthetic_folder(const fs::path& dir, std::size_t n, std::size_t size,
                                                    std::uint64_t seed = 1) {
  fs::create_directories(dir);
  std::vector<fs::path> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string name = (i < 10 ? "img0" : "img") + std::to_string(i) + ".png";
    out.push_back(dir / name);
    write_png(out.back(), synthetic_image(size, size, seed * 1000 + i));
  }
  return out;
}

/// Fresh empty directory under the system temp folder, removed on scope exit.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("colorgan_" + tag + "_" + std::to_string(rd()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

}  // namespace colorgan::testing
