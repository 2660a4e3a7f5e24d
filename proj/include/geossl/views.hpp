#pragma once

// Positive-view construction. In geo mode the second global view of a sample
// comes from a different patch captured strictly within r_loc metres; when no
// such patch exists the sampler falls back to the anchor itself, which makes
// the view stream identical to the standard single-image pipeline.

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "geossl/image.hpp"
#include "geossl/rng.hpp"
#include "geossl/spatial_index.hpp"

namespace geossl {

class ViewError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class SamplerMode { kStandard, kGeo };

inline std::string to_string(SamplerMode m) { return m == SamplerMode::kGeo ? "geo" : "standard"; }

inline SamplerMode parse_sampler_mode(const std::string& s) {
  if (s == "standard") return SamplerMode::kStandard;
  if (s == "geo") return SamplerMode::kGeo;
  throw ViewError("unknown sampler mode '" + s + "' (expected standard|geo)");
}

struct SamplerConfig {
  SamplerMode mode = SamplerMode::kStandard;
  std::optional<double> r_loc;  // metres; required in geo mode

  void validate() const {
    if (mode == SamplerMode::kGeo && !(r_loc && *r_loc > 0.0))
      throw ViewError("geo sampling requires r_loc > 0");
  }
};

struct AugmentParams {
  std::array<double, 2> global_scale{0.35, 1.0};  // crop area as a fraction of the image
  std::array<double, 2> local_scale{0.05, 0.3};
  std::array<double, 2> aspect{3.0 / 4.0, 4.0 / 3.0};
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  double jitter_prob = 0.8;
  double brightness = 0.3;
  double contrast = 0.3;
  double hue = 0.05;  // fraction of a full hue turn
  double blur_prob = 0.5;
  std::array<double, 2> blur_sigma{0.1, 1.5};
  std::size_t global_size = 64;
  std::size_t local_size = 28;
  std::size_t n_local = 4;

  void validate() const {
    if (global_size == 0 || local_size == 0) throw ViewError("crop sizes must be positive");
    if (global_size * global_size < 5 * local_size * local_size)
      throw ViewError("global crops must carry at least 5x the pixels of local crops");
    for (const auto& r : {global_scale, local_scale, aspect})
      if (!(r[0] > 0.0) || r[0] > r[1]) throw ViewError("invalid augmentation range");
    if (global_scale[1] > 1.0 || local_scale[1] > 1.0) throw ViewError("crop scale above 1");
    if (blur_sigma[0] < 0.0 || blur_sigma[0] > blur_sigma[1]) throw ViewError("invalid blur sigma range");
  }

  // Deterministic identity: full-frame crop, no flips, jitter or blur.
  static AugmentParams identity(std::size_t size) {
    AugmentParams p;
    p.global_scale = {1.0, 1.0};
    p.local_scale = {1.0, 1.0};
    p.aspect = {1.0, 1.0};
    p.hflip_prob = p.vflip_prob = p.jitter_prob = p.blur_prob = 0.0;
    p.brightness = p.contrast = p.hue = 0.0;
    p.blur_sigma = {0.0, 0.0};
    p.global_size = size;
    p.local_size = size * 2 / 5;
    return p;
  }
};

inline void to_json(nlohmann::json& j, const AugmentParams& a) {
  j = {{"global_scale", a.global_scale}, {"local_scale", a.local_scale}, {"aspect", a.aspect},
       {"hflip_prob", a.hflip_prob},     {"vflip_prob", a.vflip_prob},   {"jitter_prob", a.jitter_prob},
       {"brightness", a.brightness},     {"contrast", a.contrast},       {"hue", a.hue},
       {"blur_prob", a.blur_prob},       {"blur_sigma", a.blur_sigma},   {"global_size", a.global_size},
       {"local_size", a.local_size},     {"n_local", a.n_local}};
}

inline void from_json(const nlohmann::json& j, AugmentParams& a) {
  a.global_scale = j.value("global_scale", a.global_scale);
  a.local_scale = j.value("local_scale", a.local_scale);
  a.aspect = j.value("aspect", a.aspect);
  a.hflip_prob = j.value("hflip_prob", a.hflip_prob);
  a.vflip_prob = j.value("vflip_prob", a.vflip_prob);
  a.jitter_prob = j.value("jitter_prob", a.jitter_prob);
  a.brightness = j.value("brightness", a.brightness);
  a.contrast = j.value("contrast", a.contrast);
  a.hue = j.value("hue", a.hue);
  a.blur_prob = j.value("blur_prob", a.blur_prob);
  a.blur_sigma = j.value("blur_sigma", a.blur_sigma);
  a.global_size = j.value("global_size", a.global_size);
  a.local_size = j.value("local_size", a.local_size);
  a.n_local = j.value("n_local", a.n_local);
}

struct ViewSet {
  std::size_t anchor = 0;   // i
  std::size_t partner = 0;  // j
  std::vector<Image> globals;
  std::vector<Image> locals;
  std::vector<std::size_t> global_source;
  std::vector<std::size_t> local_source;
};

inline std::size_t select_partner(std::size_t i, const SamplerConfig& cfg, const SpatialIndex& index,
                                  Rng& rng) {
  if (i >= index.size()) throw ViewError("select_partner: unknown patch id " + std::to_string(i));
  if (cfg.mode == SamplerMode::kStandard) return i;
  cfg.validate();
  const auto candidates = index.radius_query(i, *cfg.r_loc);
  if (candidates.empty()) return i;
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  return candidates[pick(rng)];
}

// ---------------------------------------------------------------------------
// Image operations

inline Image resize_bilinear(const Image& src, double y0, double x0, double h, double w,
                             std::size_t out_size) {
  Image out(out_size, out_size, src.channels);
  const double sy = h / static_cast<double>(out_size), sx = w / static_cast<double>(out_size);
  for (std::size_t y = 0; y < out_size; ++y) {
    double fy = y0 + (static_cast<double>(y) + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(src.height - 1));
    const auto iy = static_cast<std::size_t>(fy);
    const std::size_t iy1 = std::min(iy + 1, src.height - 1);
    const double ty = fy - static_cast<double>(iy);
    for (std::size_t x = 0; x < out_size; ++x) {
      double fx = x0 + (static_cast<double>(x) + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(src.width - 1));
      const auto ix = static_cast<std::size_t>(fx);
      const std::size_t ix1 = std::min(ix + 1, src.width - 1);
      const double tx = fx - static_cast<double>(ix);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const double top = src.at(iy, ix, c) * (1.0 - tx) + src.at(iy, ix1, c) * tx;
        const double bot = src.at(iy1, ix, c) * (1.0 - tx) + src.at(iy1, ix1, c) * tx;
        out.at(y, x, c) = static_cast<float>(top * (1.0 - ty) + bot * ty);
      }
    }
  }
  return out;
}

// Centred size x size window. Images smaller than `size` are upsampled from
// their largest centred square. Used for deterministic encoding.
inline Image center_crop(const Image& src, std::size_t size) {
  const std::size_t side = std::min(src.height, src.width);
  if (side >= size) {
    const double y0 = static_cast<double>((src.height - size) / 2);
    const double x0 = static_cast<double>((src.width - size) / 2);
    return resize_bilinear(src, y0, x0, static_cast<double>(size), static_cast<double>(size), size);
  }
  return resize_bilinear(src, static_cast<double>((src.height - side) / 2),
                         static_cast<double>((src.width - side) / 2), static_cast<double>(side),
                         static_cast<double>(side), size);
}

namespace detail {

inline Image random_resized_crop(const Image& src, std::array<double, 2> scale,
                                 std::array<double, 2> aspect, std::size_t out_size, Rng& rng) {
  const double area = static_cast<double>(src.height * src.width);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double s = uniform(rng, scale[0], scale[1]);
    const double log_ar = uniform(rng, std::log(aspect[0]), std::log(aspect[1]));
    const double ar = std::exp(log_ar);
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(s * area * ar)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(s * area / ar)));
    if (w == 0 || h == 0 || w > src.width || h > src.height) continue;
    const std::size_t y0 = std::uniform_int_distribution<std::size_t>(0, src.height - h)(rng);
    const std::size_t x0 = std::uniform_int_distribution<std::size_t>(0, src.width - w)(rng);
    return resize_bilinear(src, static_cast<double>(y0), static_cast<double>(x0), static_cast<double>(h),
                           static_cast<double>(w), out_size);
  }
  return center_crop(src, out_size);
}

inline void flip(Image& im, bool horizontal) {
  Image out = im;
  for (std::size_t y = 0; y < im.height; ++y)
    for (std::size_t x = 0; x < im.width; ++x)
      for (std::size_t c = 0; c < im.channels; ++c) {
        const std::size_t sy = horizontal ? y : im.height - 1 - y;
        const std::size_t sx = horizontal ? im.width - 1 - x : x;
        out.at(y, x, c) = im.at(sy, sx, c);
      }
  im = std::move(out);
}

inline void colour_jitter(Image& im, const AugmentParams& ap, Rng& rng) {
  const double b = uniform(rng, 1.0 - ap.brightness, 1.0 + ap.brightness);
  const double c = uniform(rng, 1.0 - ap.contrast, 1.0 + ap.contrast);
  const double h = uniform(rng, -ap.hue, ap.hue);
  const std::size_t n = im.height * im.width;
  if (b != 1.0)
    for (auto& v : im.pixels) v = static_cast<float>(std::clamp(v * b, 0.0, 1.0));
  if (c != 1.0) {
    double mean = 0.0;
    for (float v : im.pixels) mean += v;
    mean /= static_cast<double>(im.pixels.size());
    for (auto& v : im.pixels) v = static_cast<float>(std::clamp((v - mean) * c + mean, 0.0, 1.0));
  }
  if (h != 0.0 && im.channels == 3) {
    // Hue rotation in YIQ space.
    const double ang = h * 2.0 * std::numbers::pi, cs = std::cos(ang), sn = std::sin(ang);
    for (std::size_t p = 0; p < n; ++p) {
      float* px = &im.pixels[p * 3];
      const double y = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
      const double i0 = 0.596 * px[0] - 0.274 * px[1] - 0.322 * px[2];
      const double q0 = 0.211 * px[0] - 0.523 * px[1] + 0.312 * px[2];
      const double i = i0 * cs - q0 * sn, q = i0 * sn + q0 * cs;
      px[0] = static_cast<float>(std::clamp(y + 0.956 * i + 0.621 * q, 0.0, 1.0));
      px[1] = static_cast<float>(std::clamp(y - 0.272 * i - 0.647 * q, 0.0, 1.0));
      px[2] = static_cast<float>(std::clamp(y - 1.106 * i + 1.703 * q, 0.0, 1.0));
    }
  }
}

inline void gaussian_blur(Image& im, double sigma) {
  if (sigma <= 0.0) return;
  const auto radius = static_cast<long>(std::ceil(2.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double ksum = 0.0;
  for (long i = -radius; i <= radius; ++i)
    ksum += k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
  for (auto& v : k) v /= ksum;
  auto reflect = [](long i, long n) {
    if (n == 1) return 0L;
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * n - 2 - i;
    return i;
  };
  const long H = static_cast<long>(im.height), W = static_cast<long>(im.width);
  Image tmp = im;
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x)
      for (std::size_t c = 0; c < im.channels; ++c) {
        double acc = 0.0;
        for (long d = -radius; d <= radius; ++d)
          acc += k[static_cast<std::size_t>(d + radius)] *
                 im.at(static_cast<std::size_t>(y), static_cast<std::size_t>(reflect(x + d, W)), c);
        tmp.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = static_cast<float>(acc);
      }
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x)
      for (std::size_t c = 0; c < im.channels; ++c) {
        double acc = 0.0;
        for (long d = -radius; d <= radius; ++d)
          acc += k[static_cast<std::size_t>(d + radius)] *
                 tmp.at(static_cast<std::size_t>(reflect(y + d, H)), static_cast<std::size_t>(x), c);
        im.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) =
            static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
}

}  // namespace detail

// crop -> flip -> jitter -> blur
inline Image augment(const Image& image, const AugmentParams& ap, std::size_t out_size,
                     std::array<double, 2> scale, Rng& rng) {
  Image im = detail::random_resized_crop(image, scale, ap.aspect, out_size, rng);
  if (bernoulli(rng, ap.hflip_prob)) detail::flip(im, true);
  if (bernoulli(rng, ap.vflip_prob)) detail::flip(im, false);
  if (bernoulli(rng, ap.jitter_prob)) detail::colour_jitter(im, ap, rng);
  if (bernoulli(rng, ap.blur_prob))
    detail::gaussian_blur(im, uniform(rng, ap.blur_sigma[0], ap.blur_sigma[1]));
  return im;
}

// Global-view augmentation.
inline Image augment(const Image& image, const AugmentParams& ap, Rng& rng) {
  return augment(image, ap, ap.global_size, ap.global_scale, rng);
}

inline ViewSet make_pair(std::size_t i, std::size_t j, const Image& image_i, const Image& image_j,
                         const AugmentParams& ap, Rng& rng) {
  for (const Image* im : {&image_i, &image_j})
    if (im->height < ap.global_size || im->width < ap.global_size)
      throw ViewError("global crop " + std::to_string(ap.global_size) + " larger than image " +
                      std::to_string(im->height) + "x" + std::to_string(im->width));
  ViewSet v;
  v.anchor = i;
  v.partner = j;
  v.globals.push_back(augment(image_i, ap, rng));
  v.globals.push_back(augment(image_j, ap, rng));
  v.global_source = {i, j};
  return v;
}

// Globals from i and j; every local view is cropped from the anchor i.
inline ViewSet make_multicrop(std::size_t i, std::size_t j, const Image& image_i, const Image& image_j,
                              const AugmentParams& ap, Rng& rng) {
  if (ap.n_local == 0) throw ViewError("multi-crop needs at least one local view");
  for (const Image* im : {&image_i, &image_j})
    if (im->height < 2 * ap.local_size || im->width < 2 * ap.local_size)
      throw ViewError("image smaller than twice the local crop size");
  ViewSet v = make_pair(i, j, image_i, image_j, ap, rng);
  for (std::size_t k = 0; k < ap.n_local; ++k) {
    v.locals.push_back(augment(image_i, ap, ap.local_size, ap.local_scale, rng));
    v.local_source.push_back(i);
  }
  return v;
}

}  // namespace geossl
