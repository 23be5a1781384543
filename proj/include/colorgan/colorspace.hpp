#pragma once

// sRGB <-> CIELAB (D65) conversion and the affine map into network range.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace colorgan {

/// 8-bit sRGB image, interleaved RGB, row-major.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> data;

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h, std::uint8_t fill = 0)
      : width(w), height(h), data(3 * w * h, fill) {}

  std::size_t pixels() const { return width * height; }
  std::uint8_t& at(std::size_t x, std::size_t y, int c) { return data[3 * (y * width + x) + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, int c) const { return data[3 * (y * width + x) + c]; }
  bool valid() const { return data.size() == 3 * width * height; }
  bool operator==(const RgbImage&) const = default;
};

/// Planar CIELAB image. L in [0,100], a and b in [-128,127].
struct LabImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> L, a, b;

  LabImage() = default;
  LabImage(std::size_t w, std::size_t h)
      : width(w), height(h), L(w * h, 0.f), a(w * h, 0.f), b(w * h, 0.f) {}
  std::size_t pixels() const { return width * height; }
};

/// Lab in network range: Ln = L/50 - 1, abn = ab/128. Kept in double so the
/// affine round trip back to the float planes is exact.
struct NormalizedLab {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> Ln, an, bn;
};

namespace detail {

struct Mat3 {
  std::array<double, 9> m;
  std::array<double, 3> apply(double x, double y, double z) const {
    return {m[0] * x + m[1] * y + m[2] * z, m[3] * x + m[4] * y + m[5] * z,
            m[6] * x + m[7] * y + m[8] * z};
  }
};

// IEC 61966-2-1 linear sRGB -> XYZ.
inline constexpr Mat3 kRgbToXyz{{0.4124564, 0.3575761, 0.1804375,  //
                                 0.2126729, 0.7151522, 0.0721750,  //
                                 0.0193339, 0.1191920, 0.9503041}};

inline Mat3 invert(const Mat3& a) {
  const auto& m = a.m;
  const double c00 = m[4] * m[8] - m[5] * m[7];
  const double c01 = m[5] * m[6] - m[3] * m[8];
  const double c02 = m[3] * m[7] - m[4] * m[6];
  const double det = m[0] * c00 + m[1] * c01 + m[2] * c02;
  const double inv = 1.0 / det;
  return Mat3{{c00 * inv, (m[2] * m[7] - m[1] * m[8]) * inv, (m[1] * m[5] - m[2] * m[4]) * inv,
               c01 * inv, (m[0] * m[8] - m[2] * m[6]) * inv, (m[2] * m[3] - m[0] * m[5]) * inv,
               c02 * inv, (m[1] * m[6] - m[0] * m[7]) * inv, (m[0] * m[4] - m[1] * m[3]) * inv}};
}

inline const Mat3& xyz_to_rgb_matrix() {
  static const Mat3 inv = invert(kRgbToXyz);
  return inv;
}

// Reference white is the image of RGB (1,1,1) so that grays are exactly neutral.
inline constexpr std::array<double, 3> kWhite{0.4124564 + 0.3575761 + 0.1804375,
                                              0.2126729 + 0.7151522 + 0.0721750,
                                              0.0193339 + 0.1191920 + 0.9503041};

inline constexpr double kEpsilon = 216.0 / 24389.0;
inline constexpr double kKappa = 24389.0 / 27.0;

inline double srgb_decode(double v) {
  return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
}
inline double srgb_encode(double v) {
  return v <= 0.0031308 ? 12.92 * v : 1.055 * std::pow(v, 1.0 / 2.4) - 0.055;
}
inline double lab_f(double t) { return t > kEpsilon ? std::cbrt(t) : (kKappa * t + 16.0) / 116.0; }
inline double lab_f_inv(double f) {
  const double f3 = f * f * f;
  return f3 > kEpsilon ? f3 : (116.0 * f - 16.0) / kKappa;
}

inline const std::array<double, 256>& srgb_decode_table() {
  static const std::array<double, 256> table = [] {
    std::array<double, 256> t{};
    for (int i = 0; i < 256; ++i) t[i] = srgb_decode(i / 255.0);
    return t;
  }();
  return table;
}

}  // namespace detail

/// Single-pixel conversion in double precision; returns {L, a, b}.
inline std::array<double, 3> srgb_to_lab_pixel(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  const auto& lut = detail::srgb_decode_table();
  const auto xyz = detail::kRgbToXyz.apply(lut[r], lut[g], lut[b]);
  const double fx = detail::lab_f(xyz[0] / detail::kWhite[0]);
  const double fy = detail::lab_f(xyz[1] / detail::kWhite[1]);
  const double fz = detail::lab_f(xyz[2] / detail::kWhite[2]);
  const double L = std::clamp(116.0 * fy - 16.0, 0.0, 100.0);
  const double A = std::clamp(500.0 * (fx - fy), -128.0, 127.0);
  const double B = std::clamp(200.0 * (fy - fz), -128.0, 127.0);
  return {L, A, B};
}

/// Lab -> gamma-encoded sRGB in [0,1]; linear RGB is clamped to the gamut first.
inline std::array<double, 3> lab_to_srgb_unit(double L, double A, double B) {
  const double fy = (L + 16.0) / 116.0;
  const double fx = fy + A / 500.0;
  const double fz = fy - B / 200.0;
  const double X = detail::kWhite[0] * detail::lab_f_inv(fx);
  const double Y = detail::kWhite[1] * detail::lab_f_inv(fy);
  const double Z = detail::kWhite[2] * detail::lab_f_inv(fz);
  const auto lin = detail::xyz_to_rgb_matrix().apply(X, Y, Z);
  return {detail::srgb_encode(std::clamp(lin[0], 0.0, 1.0)),
          detail::srgb_encode(std::clamp(lin[1], 0.0, 1.0)),
          detail::srgb_encode(std::clamp(lin[2], 0.0, 1.0))};
}

inline std::array<std::uint8_t, 3> lab_to_srgb_pixel(double L, double A, double B) {
  const auto u = lab_to_srgb_unit(L, A, B);
  std::array<std::uint8_t, 3> out{};
  for (int c = 0; c < 3; ++c)
    out[c] = static_cast<std::uint8_t>(std::lround(std::clamp(u[c] * 255.0, 0.0, 255.0)));
  return out;
}

inline LabImage srgb_to_lab(const RgbImage& img) {
  if (!img.valid()) throw std::invalid_argument("srgb_to_lab: data length != 3*width*height");
  LabImage out(img.width, img.height);
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    const auto lab = srgb_to_lab_pixel(img.data[3 * i], img.data[3 * i + 1], img.data[3 * i + 2]);
    out.L[i] = static_cast<float>(lab[0]);
    out.a[i] = static_cast<float>(lab[1]);
    out.b[i] = static_cast<float>(lab[2]);
  }
  return out;
}

/// Inverse of srgb_to_lab; out-of-gamut colors are clamped to [0,255].
inline RgbImage lab_to_srgb(const LabImage& img) {
  RgbImage out(img.width, img.height);
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    const auto rgb = lab_to_srgb_pixel(img.L[i], img.a[i], img.b[i]);
    out.data[3 * i] = rgb[0];
    out.data[3 * i + 1] = rgb[1];
    out.data[3 * i + 2] = rgb[2];
  }
  return out;
}

inline NormalizedLab normalize_lab(const LabImage& img) {
  NormalizedLab n{img.width, img.height, {}, {}, {}};
  n.Ln.resize(img.pixels());
  n.an.resize(img.pixels());
  n.bn.resize(img.pixels());
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    n.Ln[i] = static_cast<double>(img.L[i]) / 50.0 - 1.0;
    n.an[i] = static_cast<double>(img.a[i]) / 128.0;
    n.bn[i] = static_cast<double>(img.b[i]) / 128.0;
  }
  return n;
}

inline LabImage denormalize_lab(const NormalizedLab& n) {
  LabImage img(n.width, n.height);
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    img.L[i] = static_cast<float>((n.Ln[i] + 1.0) * 50.0);
    img.a[i] = static_cast<float>(n.an[i] * 128.0);
    img.b[i] = static_cast<float>(n.bn[i] * 128.0);
  }
  return img;
}

/// True when every pixel has R == G == B.
inline bool is_grayscale(const RgbImage& img) {
  for (std::size_t i = 0; i < img.pixels(); ++i)
    if (img.data[3 * i] != img.data[3 * i + 1] || img.data[3 * i] != img.data[3 * i + 2])
      return false;
  return true;
}

/// Bilinear resize with half-pixel centers (box-averaged when shrinking by >2x).
inline RgbImage resize_bilinear(const RgbImage& src, std::size_t w, std::size_t h) {
  if (src.width == w && src.height == h) return src;
  if (src.width == 0 || src.height == 0) throw std::invalid_argument("resize of empty image");
  // Pre-shrink by integer box filtering so bilinear sampling does not alias.
  RgbImage cur = src;
  while (cur.width >= 2 * w && cur.height >= 2 * h && cur.width >= 2 && cur.height >= 2) {
    RgbImage half(cur.width / 2, cur.height / 2);
    for (std::size_t y = 0; y < half.height; ++y)
      for (std::size_t x = 0; x < half.width; ++x)
        for (int c = 0; c < 3; ++c) {
          const int s = cur.at(2 * x, 2 * y, c) + cur.at(2 * x + 1, 2 * y, c) +
                        cur.at(2 * x, 2 * y + 1, c) + cur.at(2 * x + 1, 2 * y + 1, c);
          half.at(x, y, c) = static_cast<std::uint8_t>((s + 2) / 4);
        }
    cur = std::move(half);
  }
  RgbImage out(w, h);
  const double sx = static_cast<double>(cur.width) / w;
  const double sy = static_cast<double>(cur.height) / h;
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, cur.height - 1.0);
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, cur.height - 1);
    const double ty = fy - y0;
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, cur.width - 1.0);
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, cur.width - 1);
      const double tx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - ty) * ((1 - tx) * cur.at(x0, y0, c) + tx * cur.at(x1, y0, c)) +
                         ty * ((1 - tx) * cur.at(x0, y1, c) + tx * cur.at(x1, y1, c));
        out.at(x, y, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return out;
}

}  // namespace colorgan
