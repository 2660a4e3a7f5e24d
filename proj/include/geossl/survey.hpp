#pragma once

// Synthetic geo-tagged survey generation.
//
// A habitat map is a Voronoi tessellation over Poisson-distributed seeds, each
// seed carrying a class drawn from the configured class weights. An AUV-style
// lawnmower track samples positions at a fixed interval, and each patch image
// is rendered from its class's texture model plus per-image nuisance
// (illumination gain, colour cast) and observation noise. With a positive
// footprint the textures live on one continuous seafloor and each image is a
// window onto it, oriented along the vehicle heading.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "geossl/image.hpp"
#include "geossl/rng.hpp"

namespace geossl {

class SurveyError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct ClassTexture {
  std::array<double, 3> base_colour{0.5, 0.5, 0.5};
  double frequency = 0.1;  // cycles per pixel of the band-limited component
  double amplitude = 0.12;
  double speckle_density = 0.01;  // speckles per pixel
  double speckle_contrast = 0.25;

  bool operator==(const ClassTexture&) const = default;
};

struct GeneratorConfig {
  std::size_t n_classes = 3;
  std::vector<std::string> class_names;  // empty: class_0 .. class_{K-1}
  std::vector<double> class_weights;     // empty: uniform
  double habitat_scale_m = 40.0;         // square root of the mean Voronoi cell area
  double patch_interval_m = 2.0;
  double track_spacing_m = 4.0;
  std::size_t patches_per_leg = 50;
  std::size_t n_patches = 2000;
  std::size_t image_size = 40;
  std::size_t channels = 3;
  std::vector<ClassTexture> textures;  // empty: default_textures(n_classes)
  double observation_noise = 0.05;
  double illumination_jitter = 0.4;  // per-image gain drawn from 1 +- jitter
  double colour_cast = 0.12;         // per-image, per-channel additive offset sd
  double nuisance_scale_m = 0.0;     // > 0: gain and cast drift smoothly over this length
  double anisotropy = 0.9;  // 0: isotropic waves; 1: all waves of an image (or habitat cell) share one direction
  double shading = 0.3;     // peak amplitude of a per-image linear illumination ramp
  double footprint_m = 3.0;  // > 0: images are windows of this width onto one continuous seafloor
  double heading_jitter_deg = 180.0;  // per-image yaw about the leg direction (footprint mode)

  bool operator==(const GeneratorConfig&) const = default;
};

// Classes share one grey tone and differ in texture scale and speckle rate.
inline std::vector<ClassTexture> default_textures(std::size_t n_classes) {
  std::vector<ClassTexture> out;
  for (std::size_t k = 0; k < n_classes; ++k) {
    const double t = n_classes > 1 ? static_cast<double>(k) / static_cast<double>(n_classes - 1) : 0.0;
    ClassTexture tex;
    tex.base_colour = {0.5, 0.5, 0.5};
    tex.frequency = 0.10 * std::pow(1.7, t);
    tex.amplitude = 0.12;
    tex.speckle_density = 0.010 + 0.004 * t;
    tex.speckle_contrast = 0.2;
    out.push_back(tex);
  }
  return out;
}

inline void to_json(nlohmann::json& j, const ClassTexture& t) {
  j = {{"base_colour", t.base_colour},         {"frequency", t.frequency},
       {"amplitude", t.amplitude},             {"speckle_density", t.speckle_density},
       {"speckle_contrast", t.speckle_contrast}};
}

inline void from_json(const nlohmann::json& j, ClassTexture& t) {
  t.base_colour = j.value("base_colour", t.base_colour);
  t.frequency = j.value("frequency", t.frequency);
  t.amplitude = j.value("amplitude", t.amplitude);
  t.speckle_density = j.value("speckle_density", t.speckle_density);
  t.speckle_contrast = j.value("speckle_contrast", t.speckle_contrast);
}

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = {{"n_classes", c.n_classes},
       {"class_names", c.class_names},
       {"class_weights", c.class_weights},
       {"habitat_scale_m", c.habitat_scale_m},
       {"patch_interval_m", c.patch_interval_m},
       {"track_spacing_m", c.track_spacing_m},
       {"patches_per_leg", c.patches_per_leg},
       {"n_patches", c.n_patches},
       {"image_size", c.image_size},
       {"channels", c.channels},
       {"textures", c.textures},
       {"observation_noise", c.observation_noise},
       {"illumination_jitter", c.illumination_jitter},
       {"colour_cast", c.colour_cast},
       {"nuisance_scale_m", c.nuisance_scale_m},
       {"anisotropy", c.anisotropy},
       {"shading", c.shading},
       {"footprint_m", c.footprint_m},
       {"heading_jitter_deg", c.heading_jitter_deg}};
}

inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  c.n_classes = j.value("n_classes", c.n_classes);
  c.class_names = j.value("class_names", c.class_names);
  c.class_weights = j.value("class_weights", c.class_weights);
  c.habitat_scale_m = j.value("habitat_scale_m", c.habitat_scale_m);
  c.patch_interval_m = j.value("patch_interval_m", c.patch_interval_m);
  c.track_spacing_m = j.value("track_spacing_m", c.track_spacing_m);
  c.patches_per_leg = j.value("patches_per_leg", c.patches_per_leg);
  c.n_patches = j.value("n_patches", c.n_patches);
  c.image_size = j.value("image_size", c.image_size);
  c.channels = j.value("channels", c.channels);
  c.textures = j.value("textures", c.textures);
  c.observation_noise = j.value("observation_noise", c.observation_noise);
  c.illumination_jitter = j.value("illumination_jitter", c.illumination_jitter);
  c.colour_cast = j.value("colour_cast", c.colour_cast);
  c.nuisance_scale_m = j.value("nuisance_scale_m", c.nuisance_scale_m);
  c.anisotropy = j.value("anisotropy", c.anisotropy);
  c.shading = j.value("shading", c.shading);
  c.footprint_m = j.value("footprint_m", c.footprint_m);
  c.heading_jitter_deg = j.value("heading_jitter_deg", c.heading_jitter_deg);
}

// Fills empty optional fields so the config echo records every value.
inline GeneratorConfig resolve(GeneratorConfig c) {
  if (c.class_names.empty())
    for (std::size_t k = 0; k < c.n_classes; ++k) c.class_names.push_back("class_" + std::to_string(k));
  if (c.class_weights.empty()) c.class_weights.assign(c.n_classes, 1.0);
  if (c.textures.empty()) c.textures = default_textures(c.n_classes);
  return c;
}

inline void validate(const GeneratorConfig& c) {
  if (c.n_patches == 0) throw SurveyError("generator: n_patches must be positive");
  if (!(c.habitat_scale_m > 0.0)) throw SurveyError("generator: habitat_scale_m must be positive");
  if (c.n_classes < 2) throw SurveyError("generator: need at least 2 classes");
  if (!(c.patch_interval_m > 0.0) || !(c.track_spacing_m > 0.0))
    throw SurveyError("generator: patch interval and track spacing must be positive");
  if (c.nuisance_scale_m < 0.0) throw SurveyError("generator: nuisance_scale_m must be non-negative");
  if (c.anisotropy < 0.0 || c.anisotropy > 1.0) throw SurveyError("generator: anisotropy must lie in [0, 1]");
  if (c.shading < 0.0) throw SurveyError("generator: shading must be non-negative");
  if (c.footprint_m < 0.0) throw SurveyError("generator: footprint_m must be non-negative");
  if (c.heading_jitter_deg < 0.0) throw SurveyError("generator: heading_jitter_deg must be non-negative");
  if (c.patches_per_leg == 0) throw SurveyError("generator: patches_per_leg must be positive");
  if (c.image_size < 8) throw SurveyError("generator: image_size must be at least 8");
  if (c.channels != 3) throw SurveyError("generator: only 3-channel images are generated");
  if (c.class_names.size() != c.n_classes || c.class_weights.size() != c.n_classes ||
      c.textures.size() != c.n_classes)
    throw SurveyError("generator: class_names, class_weights and textures must have n_classes entries");
  double wsum = 0.0;
  for (double w : c.class_weights) {
    if (w < 0.0) throw SurveyError("generator: class weights must be non-negative");
    wsum += w;
  }
  if (!(wsum > 0.0)) throw SurveyError("generator: class weights sum to zero");
}

struct GeoPatch {
  std::size_t id = 0;
  double northing_m = 0.0;
  double easting_m = 0.0;
  std::optional<int> label;
  std::string image_ref;

  bool operator==(const GeoPatch&) const = default;
};

// Per-patch image cache. Images are produced on first access by the loader
// and kept; access is serialized so concurrent readers are safe.
class ImageStore {
public:
  using Loader = std::function<Image(std::size_t)>;

  ImageStore(std::size_t n, Loader loader) : cache_(n), loader_(std::move(loader)) {}

  explicit ImageStore(std::vector<Image> images) {
    for (auto& im : images) cache_.emplace_back(std::move(im));
  }

  const Image& get(std::size_t id) const {
    std::lock_guard lock(mu_);
    if (id >= cache_.size()) throw SurveyError("unknown patch id " + std::to_string(id));
    auto& slot = cache_[id];
    if (!slot) slot = loader_(id);
    return *slot;
  }

  std::size_t size() const { return cache_.size(); }

private:
  mutable std::mutex mu_;
  mutable std::vector<std::optional<Image>> cache_;
  Loader loader_;
};

struct SurveyManifest {
  std::vector<GeoPatch> patches;
  std::vector<std::string> class_names;
  double patch_interval_m = 0.0;
  nlohmann::json generator;  // null for external surveys
  std::optional<std::uint64_t> seed;
  std::shared_ptr<const ImageStore> images;

  std::size_t size() const { return patches.size(); }
  std::size_t n_classes() const { return class_names.size(); }
  const Image& image(std::size_t id) const {
    if (!images) throw SurveyError("manifest has no image store");
    return images->get(id);
  }

  std::vector<int> labels() const {
    std::vector<int> out;
    for (const auto& p : patches) out.push_back(p.label.value_or(-1));
    return out;
  }

  double min_spacing() const;
};

inline bool operator==(const SurveyManifest& a, const SurveyManifest& b) {
  if (a.patches != b.patches || a.class_names != b.class_names ||
      a.patch_interval_m != b.patch_interval_m || a.generator != b.generator || a.seed != b.seed)
    return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a.image(i) == b.image(i))) return false;
  return true;
}

// Minimum pairwise planar distance; O(n^2), used for configuration checks.
inline double SurveyManifest::min_spacing() const {
  double best = INFINITY;
  for (std::size_t i = 0; i < patches.size(); ++i)
    for (std::size_t j = i + 1; j < patches.size(); ++j)
      best = std::min(best, std::hypot(patches[i].northing_m - patches[j].northing_m,
                                       patches[i].easting_m - patches[j].easting_m));
  return best;
}

namespace detail {

struct HabitatSeed {
  double northing, easting;
  int label;
};

inline int habitat_label(const std::vector<HabitatSeed>& seeds, double n, double e) {
  double best = INFINITY;
  int label = 0;
  for (const auto& s : seeds) {
    const double d = (s.northing - n) * (s.northing - n) + (s.easting - e) * (s.easting - e);
    if (d < best) {
      best = d;
      label = s.label;
    }
  }
  return label;
}

struct Nuisance {
  double gain = 1.0;
  std::array<double, 3> cast{};
};

// Unit-variance stationary Gaussian fields over (northing, easting) with a
// squared-exponential kernel of length `scale`, via random Fourier features.
class SmoothField {
public:
  SmoothField(double scale, std::size_t channels, Rng& rng) : channels_(channels) {
    std::normal_distribution<double> freq(0.0, 1.0 / scale);
    for (std::size_t k = 0; k < channels * kFeatures; ++k)
      terms_.push_back({freq(rng), freq(rng), uniform(rng, 0.0, 2.0 * std::numbers::pi)});
  }

  double operator()(std::size_t channel, double n, double e) const {
    double v = 0.0;
    for (std::size_t k = 0; k < kFeatures; ++k) {
      const auto& t = terms_[channel * kFeatures + k];
      v += std::cos(t.wn * n + t.we * e + t.phase);
    }
    return v * std::sqrt(2.0 / static_cast<double>(kFeatures));
  }

private:
  static constexpr std::size_t kFeatures = 64;
  struct Term {
    double wn, we, phase;
  };
  std::size_t channels_;
  std::vector<Term> terms_;
};

inline Image render_patch(const GeneratorConfig& cfg, const ClassTexture& tex, const Nuisance& nz, Rng& rng) {
  const std::size_t s = cfg.image_size;
  Image im(s, s, 3);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double gain = nz.gain;
  const auto& cast = nz.cast;

  // Band-limited component: a few plane waves near the class frequency.
  constexpr int kWaves = 6;
  std::array<double, kWaves> kx{}, ky{}, phase{};
  const double dominant = uniform(rng, 0.0, std::numbers::pi);
  const double spread = (1.0 - cfg.anisotropy) * std::numbers::pi / 2.0;
  for (int w = 0; w < kWaves; ++w) {
    const double f = tex.frequency * uniform(rng, 0.85, 1.15);
    const double theta = dominant + uniform(rng, -spread, spread);
    kx[w] = 2.0 * std::numbers::pi * f * std::cos(theta);
    ky[w] = 2.0 * std::numbers::pi * f * std::sin(theta);
    phase[w] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  }
  const double norm = tex.amplitude / std::sqrt(kWaves / 2.0);

  const double ramp_dir = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double ramp_y = cfg.shading * std::sin(ramp_dir) / static_cast<double>(s);
  const double ramp_x = cfg.shading * std::cos(ramp_dir) / static_cast<double>(s);
  const double mid = static_cast<double>(s - 1) / 2.0;

  std::vector<double> field(s * s);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      double v = 0.0;
      for (int w = 0; w < kWaves; ++w)
        v += std::cos(kx[w] * static_cast<double>(x) + ky[w] * static_cast<double>(y) + phase[w]);
      field[y * s + x] = v * norm + 2.0 * (ramp_y * (static_cast<double>(y) - mid) + ramp_x * (static_cast<double>(x) - mid));
    }

  std::poisson_distribution<int> n_speckles(tex.speckle_density * static_cast<double>(s * s));
  const int count = n_speckles(rng);
  for (int k = 0; k < count; ++k) {
    const auto cy = static_cast<long>(uniform(rng, 0.0, static_cast<double>(s)));
    const auto cx = static_cast<long>(uniform(rng, 0.0, static_cast<double>(s)));
    const double sign = bernoulli(rng, 0.7) ? 1.0 : -1.0;
    for (long dy = -1; dy <= 1; ++dy)
      for (long dx = -1; dx <= 1; ++dx) {
        const long yy = cy + dy, xx = cx + dx;
        if (yy < 0 || xx < 0 || yy >= static_cast<long>(s) || xx >= static_cast<long>(s)) continue;
        const double wgt = (dx == 0 && dy == 0) ? 1.0 : 0.4;
        field[static_cast<std::size_t>(yy) * s + static_cast<std::size_t>(xx)] +=
            sign * tex.speckle_contrast * wgt;
      }
  }

  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double v = gain * (tex.base_colour[c] + field[y * s + x]) + cast[c] +
                   cfg.observation_noise * gauss(rng);
        im.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return im;
}

// Continuous seafloor: every habitat cell owns a set of plane waves at its
// class frequency, and speckles live at fixed world positions, so overlapping
// or adjacent footprints see the same terrain.
class Seafloor {
public:
  Seafloor(const GeneratorConfig& cfg, std::vector<HabitatSeed> seeds, std::uint64_t seed)
      : cfg_(cfg), seeds_(std::move(seeds)), seed_(seed),
        px_per_m_(static_cast<double>(cfg.image_size) / cfg.footprint_m) {
    Rng rng = make_rng(seed, {tag(Stream::kHabitat), 3});
    const double spread = (1.0 - cfg.anisotropy) * std::numbers::pi / 2.0;
    for (const auto& s : seeds_) {
      const auto& tex = cfg.textures[static_cast<std::size_t>(s.label)];
      const double dominant = uniform(rng, 0.0, std::numbers::pi);
      Waves w;
      for (int k = 0; k < kWaves; ++k) {
        const double f = tex.frequency * px_per_m_ * uniform(rng, 0.85, 1.15);
        const double theta = dominant + uniform(rng, -spread, spread);
        w.kn[k] = 2.0 * std::numbers::pi * f * std::sin(theta);
        w.ke[k] = 2.0 * std::numbers::pi * f * std::cos(theta);
        w.phase[k] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      }
      waves_.push_back(w);
      max_density_ = std::max(max_density_, tex.speckle_density);
    }
  }

  Image render(const GeoPatch& p, double heading, const Nuisance& nz, Rng& rng) const {
    const std::size_t s = cfg_.image_size;
    const double F = cfg_.footprint_m;
    const double half_diag = F / std::sqrt(2.0);

    // Seeds that can own some pixel of this footprint.
    double d0 = INFINITY;
    for (const auto& sd : seeds_) d0 = std::min(d0, std::hypot(sd.northing - p.northing_m, sd.easting - p.easting_m));
    std::vector<std::size_t> near;
    for (std::size_t k = 0; k < seeds_.size(); ++k)
      if (std::hypot(seeds_[k].northing - p.northing_m, seeds_[k].easting - p.easting_m) <= d0 + 2.0 * half_diag)
        near.push_back(k);
    auto owner = [&](double n, double e) {
      std::size_t best = near.front();
      double bd = INFINITY;
      for (auto k : near) {
        const double d = (seeds_[k].northing - n) * (seeds_[k].northing - n) +
                         (seeds_[k].easting - e) * (seeds_[k].easting - e);
        if (d < bd) bd = d, best = k;
      }
      return best;
    };

    const double ch = std::cos(heading), sh = std::sin(heading);
    auto world = [&](double y, double x) {
      const double u = (x + 0.5) / static_cast<double>(s) - 0.5, v = (y + 0.5) / static_cast<double>(s) - 0.5;
      return std::pair{p.northing_m + F * (ch * v - sh * u), p.easting_m + F * (sh * v + ch * u)};
    };

    std::vector<double> field(s * s);
    std::vector<std::size_t> own(s * s);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const auto [n, e] = world(static_cast<double>(y), static_cast<double>(x));
        const std::size_t k = owner(n, e);
        const auto& w = waves_[k];
        double v = 0.0;
        for (int i = 0; i < kWaves; ++i) v += std::cos(w.kn[i] * n + w.ke[i] * e + w.phase[i]);
        own[y * s + x] = k;
        field[y * s + x] = v * cfg_.textures[static_cast<std::size_t>(seeds_[k].label)].amplitude /
                           std::sqrt(kWaves / 2.0);
      }

    // Speckles from a world-anchored Poisson process, thinned by local class.
    if (max_density_ > 0.0) {
      const double sigma = 0.6 / px_per_m_;
      const auto lo_n = static_cast<long>(std::floor(p.northing_m - half_diag - 1.0));
      const auto hi_n = static_cast<long>(std::floor(p.northing_m + half_diag + 1.0));
      const auto lo_e = static_cast<long>(std::floor(p.easting_m - half_diag - 1.0));
      const auto hi_e = static_cast<long>(std::floor(p.easting_m + half_diag + 1.0));
      const double per_cell = max_density_ * px_per_m_ * px_per_m_;
      for (long cn = lo_n; cn <= hi_n; ++cn)
        for (long ce = lo_e; ce <= hi_e; ++ce) {
          Rng cell = make_rng(seed_, {tag(Stream::kHabitat), 4, static_cast<std::uint64_t>(cn),
                                      static_cast<std::uint64_t>(ce)});
          std::poisson_distribution<int> count(per_cell);
          const int m = count(cell);
          for (int i = 0; i < m; ++i) {
            const double sn = static_cast<double>(cn) + uniform(cell, 0.0, 1.0);
            const double se = static_cast<double>(ce) + uniform(cell, 0.0, 1.0);
            const double keep = uniform(cell, 0.0, 1.0);
            const double sign = bernoulli(cell, 0.7) ? 1.0 : -1.0;
            const auto& tex = cfg_.textures[static_cast<std::size_t>(seeds_[owner(sn, se)].label)];
            if (keep * max_density_ >= tex.speckle_density) continue;
            // Image coordinates of the speckle.
            const double dn = sn - p.northing_m, de = se - p.easting_m;
            const double v = (ch * dn + sh * de) / F, u = (-sh * dn + ch * de) / F;
            const double py = (v + 0.5) * static_cast<double>(s) - 0.5, px = (u + 0.5) * static_cast<double>(s) - 0.5;
            for (long yy = static_cast<long>(py) - 2; yy <= static_cast<long>(py) + 2; ++yy)
              for (long xx = static_cast<long>(px) - 2; xx <= static_cast<long>(px) + 2; ++xx) {
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(s) || xx >= static_cast<long>(s)) continue;
                const double r2 = ((static_cast<double>(yy) - py) * (static_cast<double>(yy) - py) +
                                   (static_cast<double>(xx) - px) * (static_cast<double>(xx) - px)) /
                                  (px_per_m_ * px_per_m_);
                field[static_cast<std::size_t>(yy) * s + static_cast<std::size_t>(xx)] +=
                    sign * tex.speckle_contrast * std::exp(-r2 / (2.0 * sigma * sigma));
              }
          }
        }
    }

    const double ramp_dir = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double ramp_y = cfg_.shading * std::sin(ramp_dir) / static_cast<double>(s);
    const double ramp_x = cfg_.shading * std::cos(ramp_dir) / static_cast<double>(s);
    const double mid = static_cast<double>(s - 1) / 2.0;
    std::normal_distribution<double> gauss(0.0, 1.0);
    Image im(s, s, 3);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const auto& tex = cfg_.textures[static_cast<std::size_t>(seeds_[own[y * s + x]].label)];
        const double f = field[y * s + x] + 2.0 * (ramp_y * (static_cast<double>(y) - mid) +
                                                   ramp_x * (static_cast<double>(x) - mid));
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = nz.gain * (tex.base_colour[c] + f) + nz.cast[c] + cfg_.observation_noise * gauss(rng);
          im.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    return im;
  }

private:
  static constexpr int kWaves = 6;
  struct Waves {
    std::array<double, kWaves> kn{}, ke{}, phase{};
  };
  const GeneratorConfig& cfg_;
  std::vector<HabitatSeed> seeds_;
  std::vector<Waves> waves_;
  std::uint64_t seed_;
  double px_per_m_;
  double max_density_ = 0.0;
};

}  // namespace detail

inline SurveyManifest generate_survey(const GeneratorConfig& raw, std::uint64_t seed) {
  const GeneratorConfig cfg = resolve(raw);
  validate(cfg);

  SurveyManifest m;
  m.class_names = cfg.class_names;
  m.patch_interval_m = cfg.patch_interval_m;
  m.generator = cfg;
  m.seed = seed;

  for (std::size_t id = 0; id < cfg.n_patches; ++id) {
    const std::size_t leg = id / cfg.patches_per_leg;
    const std::size_t pos = id % cfg.patches_per_leg;
    const std::size_t along = (leg % 2 == 0) ? pos : cfg.patches_per_leg - 1 - pos;
    GeoPatch p;
    p.id = id;
    p.easting_m = static_cast<double>(along) * cfg.patch_interval_m;
    p.northing_m = static_cast<double>(leg) * cfg.track_spacing_m;
    m.patches.push_back(p);
  }

  // Poisson seeds over the survey bounding box grown by one habitat scale.
  double n_lo = INFINITY, n_hi = -INFINITY, e_lo = INFINITY, e_hi = -INFINITY;
  for (const auto& p : m.patches) {
    n_lo = std::min(n_lo, p.northing_m);
    n_hi = std::max(n_hi, p.northing_m);
    e_lo = std::min(e_lo, p.easting_m);
    e_hi = std::max(e_hi, p.easting_m);
  }
  const double L = cfg.habitat_scale_m;
  n_lo -= L, n_hi += L, e_lo -= L, e_hi += L;
  const double area = (n_hi - n_lo) * (e_hi - e_lo);
  // One seed per L x L square on average.
  const double intensity = 1.0 / (L * L);

  Rng habitat_rng = make_rng(seed, {tag(Stream::kHabitat)});
  std::poisson_distribution<long> n_seeds_dist(std::min(intensity * area, 1e7));
  const long n_seeds = std::max<long>(1, n_seeds_dist(habitat_rng));
  std::discrete_distribution<int> class_dist(cfg.class_weights.begin(), cfg.class_weights.end());
  std::vector<detail::HabitatSeed> seeds;
  for (long k = 0; k < n_seeds; ++k) {
    detail::HabitatSeed s;
    s.northing = uniform(habitat_rng, n_lo, n_hi);
    s.easting = uniform(habitat_rng, e_lo, e_hi);
    s.label = class_dist(habitat_rng);
    seeds.push_back(s);
  }

  std::optional<detail::SmoothField> field;
  if (cfg.nuisance_scale_m > 0.0) {
    Rng field_rng = make_rng(seed, {tag(Stream::kHabitat), 1});
    field.emplace(cfg.nuisance_scale_m, 4, field_rng);
  }

  std::optional<detail::Seafloor> floor;
  if (cfg.footprint_m > 0.0) floor.emplace(cfg, seeds, seed);

  std::vector<Image> images;
  images.reserve(cfg.n_patches);
  for (auto& p : m.patches) {
    const int label = detail::habitat_label(seeds, p.northing_m, p.easting_m);
    p.label = label;
    char ref[32];
    std::snprintf(ref, sizeof ref, "images/%06zu.bin", p.id);
    p.image_ref = ref;
    Rng rng = make_rng(seed, {tag(Stream::kImage), p.id});
    detail::Nuisance nz;
    if (field) {
      nz.gain = 1.0 + cfg.illumination_jitter / std::sqrt(3.0) * (*field)(0, p.northing_m, p.easting_m);
      for (std::size_t c = 0; c < 3; ++c) nz.cast[c] = cfg.colour_cast * (*field)(c + 1, p.northing_m, p.easting_m);
    } else {
      std::normal_distribution<double> gauss(0.0, 1.0);
      nz.gain = uniform(rng, 1.0 - cfg.illumination_jitter, 1.0 + cfg.illumination_jitter);
      for (auto& c : nz.cast) c = cfg.colour_cast * gauss(rng);
    }
    if (floor) {
      const bool outbound = (p.id / cfg.patches_per_leg) % 2 == 0;
      const double jitter = cfg.heading_jitter_deg * std::numbers::pi / 180.0;
      const double heading = (outbound ? std::numbers::pi / 2.0 : -std::numbers::pi / 2.0) +
                             (jitter > 0.0 ? uniform(rng, -jitter, jitter) : 0.0);
      images.push_back(floor->render(p, heading, nz, rng));
    } else {
      images.push_back(detail::render_patch(cfg, cfg.textures[static_cast<std::size_t>(label)], nz, rng));
    }
  }
  m.images = std::make_shared<ImageStore>(std::move(images));
  return m;
}

}  // namespace geossl
