#pragma once

// Tiny plain CNN backbone with projector, predictor and prototype heads.
//
//   encode:  standardize -> [conv3x3 -> relu -> avgpool2] per stage -> global avg pool -> linear -> z (D)
//   project: linear -> relu -> linear (D -> hidden -> D)
//   predict: linear -> relu -> linear (D -> pred_hidden -> D)
//   prototype_logits: cosine(l2n(z'), l2n(prototype rows))
//
// All parameters live in one flat vector; `bind` slices a flat tensor into
// per-layer views so gradients land back in the flat vector.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "geossl/image.hpp"
#include "geossl/rng.hpp"
#include "geossl/tensor.hpp"

namespace geossl {

struct EncoderParams {
  std::vector<std::size_t> widths{16, 32, 64};
  std::size_t in_channels = 3;
  std::size_t latent_dim = 128;
  std::size_t projector_hidden = 256;
  std::size_t predictor_hidden = 64;
  std::size_t n_prototypes = 32;
  std::string input_norm = "per_image";  // or "fixed"

  bool operator==(const EncoderParams&) const = default;

  void validate() const {
    if (widths.empty()) throw TensorError("encoder: need at least one conv stage");
    if (latent_dim < 8) throw TensorError("encoder: latent_dim must be at least 8");
    if (in_channels == 0 || projector_hidden == 0 || predictor_hidden == 0 || n_prototypes == 0)
      throw TensorError("encoder: zero-sized layer");
    if (input_norm != "per_image" && input_norm != "fixed")
      throw TensorError("encoder: input_norm must be 'per_image' or 'fixed', got '" + input_norm + "'");
  }

  // Smallest spatial input that survives all pooling stages.
  std::size_t min_input_size() const { return std::size_t{1} << widths.size(); }
};

inline void to_json(nlohmann::json& j, const EncoderParams& p) {
  j = {{"widths", p.widths},
       {"in_channels", p.in_channels},
       {"latent_dim", p.latent_dim},
       {"projector_hidden", p.projector_hidden},
       {"predictor_hidden", p.predictor_hidden},
       {"n_prototypes", p.n_prototypes},
       {"input_norm", p.input_norm}};
}

inline void from_json(const nlohmann::json& j, EncoderParams& p) {
  p.widths = j.value("widths", p.widths);
  p.in_channels = j.value("in_channels", p.in_channels);
  p.latent_dim = j.value("latent_dim", p.latent_dim);
  p.projector_hidden = j.value("projector_hidden", p.projector_hidden);
  p.predictor_hidden = j.value("predictor_hidden", p.predictor_hidden);
  p.n_prototypes = j.value("n_prototypes", p.n_prototypes);
  p.input_norm = j.value("input_norm", p.input_norm);
}

struct LayoutEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;

  std::size_t size() const { return shape_numel(shape); }
  bool operator==(const LayoutEntry&) const = default;
};

class Layout {
public:
  void add(std::string name, Shape shape) {
    LayoutEntry e{std::move(name), std::move(shape), total_};
    total_ += e.size();
    index_[e.name] = entries_.size();
    entries_.push_back(std::move(e));
  }

  const LayoutEntry& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw TensorError("layout has no entry '" + name + "'");
    return entries_[it->second];
  }

  const std::vector<LayoutEntry>& entries() const { return entries_; }
  std::size_t total() const { return total_; }

  bool operator==(const Layout& o) const { return entries_ == o.entries_; }

private:
  std::vector<LayoutEntry> entries_;
  std::map<std::string, std::size_t> index_;
  std::size_t total_ = 0;
};

inline Layout make_layout(const EncoderParams& p) {
  Layout l;
  std::size_t cin = p.in_channels;
  for (std::size_t s = 0; s < p.widths.size(); ++s) {
    const std::string base = "backbone.conv" + std::to_string(s);
    l.add(base + ".weight", {p.widths[s], cin, 3, 3});
    l.add(base + ".bias", {p.widths[s]});
    cin = p.widths[s];
  }
  l.add("backbone.fc.weight", {cin, p.latent_dim});
  l.add("backbone.fc.bias", {p.latent_dim});
  l.add("projector.fc1.weight", {p.latent_dim, p.projector_hidden});
  l.add("projector.fc1.bias", {p.projector_hidden});
  l.add("projector.fc2.weight", {p.projector_hidden, p.latent_dim});
  l.add("projector.fc2.bias", {p.latent_dim});
  l.add("predictor.fc1.weight", {p.latent_dim, p.predictor_hidden});
  l.add("predictor.fc1.bias", {p.predictor_hidden});
  l.add("predictor.fc2.weight", {p.predictor_hidden, p.latent_dim});
  l.add("predictor.fc2.bias", {p.latent_dim});
  l.add("prototypes", {p.n_prototypes, p.latent_dim});
  return l;
}

struct ModelState {
  EncoderParams config;
  Layout layout;
  std::vector<double> params;
  std::uint64_t seed = 0;

  std::size_t parameter_count() const { return params.size(); }

  std::span<double> view(const std::string& name) {
    const auto& e = layout.at(name);
    return std::span<double>(params).subspan(e.offset, e.size());
  }
  std::span<const double> view(const std::string& name) const {
    const auto& e = layout.at(name);
    return std::span<const double>(params).subspan(e.offset, e.size());
  }
};

// He-uniform weights, zero biases, unit-norm Gaussian prototype rows.
inline ModelState init_model(const EncoderParams& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelState m;
  m.config = cfg;
  m.layout = make_layout(cfg);
  m.params.assign(m.layout.total(), 0.0);
  m.seed = seed;
  Rng rng = make_rng(seed, {tag(Stream::kInit)});
  for (const auto& e : m.layout.entries()) {
    auto w = m.view(e.name);
    if (e.name == "prototypes") {
      std::normal_distribution<double> g(0.0, 1.0);
      const std::size_t rows = e.shape[0], cols = e.shape[1];
      for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t c = 0; c < cols; ++c) ss += (w[r * cols + c] = g(rng)) * w[r * cols + c];
        const double n = std::sqrt(ss);
        for (std::size_t c = 0; c < cols; ++c) w[r * cols + c] /= n;
      }
    } else if (e.name.ends_with(".weight")) {
      // conv: [out, in, kh, kw]; linear: [in, out]
      const std::size_t fan_in = e.shape.size() == 4 ? e.shape[1] * e.shape[2] * e.shape[3] : e.shape[0];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto& v : w) v = u(rng);
    }
  }
  return m;
}

// Per-layer tensors viewing a flat parameter tensor.
struct Net {
  EncoderParams config;
  std::vector<Tensor> conv_w, conv_b;
  Tensor fc_w, fc_b;
  Tensor proj1_w, proj1_b, proj2_w, proj2_b;
  Tensor pred1_w, pred1_b, pred2_w, pred2_b;
  Tensor prototypes;
};

inline Net bind(const EncoderParams& cfg, const Layout& layout, const Tensor& flat) {
  if (flat.numel() != layout.total())
    throw TensorError("bind: flat parameter tensor has " + std::to_string(flat.numel()) +
                      " values, layout needs " + std::to_string(layout.total()));
  auto take = [&](const std::string& name) {
    const auto& e = layout.at(name);
    return reshape(slice(flat, 0, e.offset, e.offset + e.size()), e.shape);
  };
  Net n;
  n.config = cfg;
  for (std::size_t s = 0; s < cfg.widths.size(); ++s) {
    const std::string base = "backbone.conv" + std::to_string(s);
    n.conv_w.push_back(take(base + ".weight"));
    n.conv_b.push_back(take(base + ".bias"));
  }
  n.fc_w = take("backbone.fc.weight");
  n.fc_b = take("backbone.fc.bias");
  n.proj1_w = take("projector.fc1.weight");
  n.proj1_b = take("projector.fc1.bias");
  n.proj2_w = take("projector.fc2.weight");
  n.proj2_b = take("projector.fc2.bias");
  n.pred1_w = take("predictor.fc1.weight");
  n.pred1_b = take("predictor.fc1.bias");
  n.pred2_w = take("predictor.fc2.weight");
  n.pred2_b = take("predictor.fc2.bias");
  n.prototypes = take("prototypes");
  return n;
}

inline Tensor flat_tensor(const ModelState& m, bool requires_grad) {
  return Tensor::from({m.params.size()}, m.params, requires_grad);
}

inline Net bind(const ModelState& m, bool requires_grad, Tensor* flat_out = nullptr) {
  Tensor flat = flat_tensor(m, requires_grad);
  if (flat_out) *flat_out = flat;
  return bind(m.config, m.layout, flat);
}

// Stacks HWC images into an NCHW tensor.
inline Tensor images_to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw TensorError("images_to_tensor: empty batch");
  const std::size_t h = images[0]->height, w = images[0]->width, c = images[0]->channels;
  Buffer data(images.size() * c * h * w);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image& im = *images[b];
    if (im.height != h || im.width != w || im.channels != c)
      throw TensorError("images_to_tensor: images must share spatial size");
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) data[((b * c + ch) * h + y) * w + x] = im.at(y, x, ch);
  }
  return Tensor::make({images.size(), c, h, w}, std::move(data), false);
}

inline Tensor images_to_tensor(const std::vector<Image>& images) {
  std::vector<const Image*> ptrs;
  for (const auto& im : images) ptrs.push_back(&im);
  return images_to_tensor(ptrs);
}

// Fixed input standardization; pixels live in [0, 1].
inline constexpr double kInputMean = 0.5;
inline constexpr double kInputScale = 0.25;
inline constexpr double kInputEps = 1e-3;

// Each image channel shifted to zero mean and scaled to unit deviation. The
// statistics are treated as constants, so no gradient flows through them.
inline Tensor standardize_per_image(const Tensor& images) {
  const std::size_t rows = images.dim(0) * images.dim(1), hw = images.dim(2) * images.dim(3);
  const auto d = images.data();
  Buffer out(rows * hw);
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t k = 0; k < hw; ++k) mu += d[r * hw + k];
    mu /= static_cast<double>(hw);
    double ss = 0.0;
    for (std::size_t k = 0; k < hw; ++k) ss += (d[r * hw + k] - mu) * (d[r * hw + k] - mu);
    const double sd = std::sqrt(ss / static_cast<double>(hw)) + kInputEps;
    for (std::size_t k = 0; k < hw; ++k) out[r * hw + k] = (d[r * hw + k] - mu) / sd;
  }
  return Tensor::make(images.shape(), std::move(out), false);
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

inline Tensor encode(const Net& net, const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != net.config.in_channels)
    throw TensorError("encode: expected [B," + std::to_string(net.config.in_channels) + ",H,W], got " +
                      shape_str(images.shape()));
  const std::size_t need = net.config.min_input_size();
  if (images.dim(2) < need || images.dim(3) < need)
    throw TensorError("encode: spatial size " + std::to_string(images.dim(2)) + "x" +
                      std::to_string(images.dim(3)) + " too small for " +
                      std::to_string(net.config.widths.size()) + " pooling stages (need " +
                      std::to_string(need) + ")");
  Tensor h = net.config.input_norm == "fixed" ? (images + -kInputMean) / kInputScale : standardize_per_image(images);
  for (std::size_t s = 0; s < net.conv_w.size(); ++s)
    h = avg_pool2d(relu(conv2d(h, net.conv_w[s], net.conv_b[s], {1, 1})), 2, 2);
  return linear(global_avg_pool(h), net.fc_w, net.fc_b);
}

inline Tensor project(const Net& net, const Tensor& z) {
  if (z.rank() != 2 || z.dim(1) != net.config.latent_dim) throw TensorError("project: dim mismatch");
  return linear(relu(linear(z, net.proj1_w, net.proj1_b)), net.proj2_w, net.proj2_b);
}

inline Tensor predict(const Net& net, const Tensor& z) {
  if (z.rank() != 2 || z.dim(1) != net.config.latent_dim) throw TensorError("predict: dim mismatch");
  return linear(relu(linear(z, net.pred1_w, net.pred1_b)), net.pred2_w, net.pred2_b);
}

// [B, D] -> [B, K_p] cosine similarities in [-1, 1].
inline Tensor prototype_logits(const Net& net, const Tensor& z) {
  if (z.rank() != 2 || z.dim(1) != net.prototypes.dim(1))
    throw TensorError("prototype_logits: dim mismatch");
  return matmul(l2_normalize(z, 1), transpose(l2_normalize(net.prototypes, 1)));
}

}  // namespace geossl
