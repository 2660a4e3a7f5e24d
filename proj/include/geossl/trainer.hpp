#pragma once

// Training driver: run configuration, per-objective batch assembly, SGD with
// momentum and cosine decay, momentum teachers, k-means refresh, checkpoints,
// and deterministic latent extraction.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "geossl/checkpoint.hpp"
#include "geossl/encoder.hpp"
#include "geossl/manifest_io.hpp"
#include "geossl/objectives.hpp"
#include "geossl/spatial_index.hpp"
#include "geossl/survey.hpp"
#include "geossl/views.hpp"

namespace geossl {

inline constexpr const char* kVersion = "geossl 0.1.0";

class TrainError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class Objective { kSimClr, kSimSiam, kMoco, kSwav, kDeepCluster, kDino };

inline const std::vector<std::string>& objective_names() {
  static const std::vector<std::string> names{"simclr", "simsiam", "moco", "swav", "deepcluster", "dino"};
  return names;
}

inline std::string to_string(Objective o) { return objective_names()[static_cast<std::size_t>(o)]; }

inline Objective parse_objective(const std::string& s) {
  const auto& names = objective_names();
  for (std::size_t k = 0; k < names.size(); ++k)
    if (names[k] == s) return static_cast<Objective>(k);
  std::string valid;
  for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown objective '" + s + "'; valid objectives: " + valid);
}

// Pair objectives take two global views; the others use multi-crop.
inline bool uses_multicrop(Objective o) {
  return o == Objective::kSwav || o == Objective::kDeepCluster || o == Objective::kDino;
}
inline bool has_teacher(Objective o) { return o == Objective::kMoco || o == Objective::kDino; }

// Display name, e.g. simclr + geo -> GeoCLR.
inline std::string method_name(Objective o, SamplerMode mode) {
  static const char* base[] = {"SimCLR", "SimSiam", "MoCo", "SwAV", "DeepCluster", "DINO"};
  std::string b = base[static_cast<std::size_t>(o)];
  if (mode == SamplerMode::kStandard) return b;
  if (o == Objective::kSimClr) return "GeoCLR";
  return "Geo" + b;
}

struct DatasetSpec {
  std::optional<std::string> manifest;
  std::optional<GeneratorConfig> generator;
  std::uint64_t generator_seed = 0;
};

struct OptimizerConfig {
  std::optional<double> lr;  // resolves to 0.03 * N / 64
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool cosine = true;
};

struct RunConfig {
  DatasetSpec dataset;
  Objective objective = Objective::kSimClr;
  SamplerConfig sampler;
  LossConfig loss;
  AugmentParams augment;
  EncoderParams encoder;
  OptimizerConfig optimizer;
  std::size_t batch_size = 64;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::optional<std::string> resume;  // checkpoint to continue from
};

// ---------------------------------------------------------------------------
// Config (de)serialization. Unknown keys are rejected so typos surface.

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* n : known) ok = ok || k == n;
    if (!ok) throw ConfigError(std::string(where) + ": unknown key '" + k + "'");
  }
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const DatasetSpec& d) {
  j = nlohmann::json::object();
  j["manifest"] = d.manifest ? nlohmann::json(*d.manifest) : nlohmann::json(nullptr);
  j["generator"] = d.generator ? nlohmann::json(resolve(*d.generator)) : nlohmann::json(nullptr);
  j["generator_seed"] = d.generator_seed;
}

inline void from_json(const nlohmann::json& j, DatasetSpec& d) {
  detail::reject_unknown(j, {"manifest", "generator", "generator_seed"}, "dataset");
  if (j.contains("manifest") && !j["manifest"].is_null()) d.manifest = j["manifest"].get<std::string>();
  if (j.contains("generator") && !j["generator"].is_null()) d.generator = j["generator"].get<GeneratorConfig>();
  d.generator_seed = j.value("generator_seed", d.generator_seed);
}

inline void to_json(nlohmann::json& j, const OptimizerConfig& o) {
  j = {{"momentum", o.momentum}, {"weight_decay", o.weight_decay}, {"cosine", o.cosine}};
  j["lr"] = o.lr ? nlohmann::json(*o.lr) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, OptimizerConfig& o) {
  detail::reject_unknown(j, {"lr", "momentum", "weight_decay", "cosine"}, "optimizer");
  if (j.contains("lr") && !j["lr"].is_null()) o.lr = j["lr"].get<double>();
  o.momentum = j.value("momentum", o.momentum);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  o.cosine = j.value("cosine", o.cosine);
}

inline void to_json(nlohmann::json& j, const SamplerConfig& s) {
  j = {{"mode", to_string(s.mode)}};
  j["r_loc"] = s.r_loc ? nlohmann::json(*s.r_loc) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, SamplerConfig& s) {
  detail::reject_unknown(j, {"mode", "r_loc"}, "sampler");
  if (j.contains("mode")) s.mode = parse_sampler_mode(j["mode"].get<std::string>());
  if (j.contains("r_loc") && !j["r_loc"].is_null()) s.r_loc = j["r_loc"].get<double>();
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json::object();
  j["dataset"] = c.dataset;
  j["objective"] = to_string(c.objective);
  j["sampler"] = c.sampler;
  j["loss"] = c.loss;
  j["augment"] = c.augment;
  j["encoder"] = c.encoder;
  j["optimizer"] = c.optimizer;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["resume"] = c.resume ? nlohmann::json(*c.resume) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  detail::reject_unknown(j,
                         {"dataset", "objective", "sampler", "loss", "augment", "encoder", "optimizer",
                          "batch_size", "epochs", "seed", "out_dir", "resume"},
                         "run config");
  if (j.contains("dataset")) c.dataset = j["dataset"].get<DatasetSpec>();
  if (j.contains("objective")) c.objective = parse_objective(j["objective"].get<std::string>());
  if (j.contains("sampler")) c.sampler = j["sampler"].get<SamplerConfig>();
  if (j.contains("loss")) c.loss = j["loss"].get<LossConfig>();
  if (j.contains("augment")) c.augment = j["augment"].get<AugmentParams>();
  if (j.contains("encoder")) c.encoder = j["encoder"].get<EncoderParams>();
  if (j.contains("optimizer")) c.optimizer = j["optimizer"].get<OptimizerConfig>();
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.out_dir = j.value("out_dir", c.out_dir);
  if (j.contains("resume") && !j["resume"].is_null()) c.resume = j["resume"].get<std::string>();
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return nlohmann::json::parse(in).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline SurveyManifest load_dataset(const DatasetSpec& d) {
  if (d.manifest) return load_manifest(*d.manifest);
  if (d.generator) return generate_survey(*d.generator, d.generator_seed);
  throw ConfigError("dataset: set either 'manifest' or 'generator'");
}

// Fills every derived default and checks the config against the dataset.
inline RunConfig resolve(RunConfig c, const SurveyManifest& data) {
  if (c.batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (!c.optimizer.lr) c.optimizer.lr = 0.03 * static_cast<double>(c.batch_size) / 64.0;
  if (!(*c.optimizer.lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
  if (c.optimizer.momentum < 0.0 || c.optimizer.momentum >= 1.0)
    throw ConfigError("optimizer.momentum must lie in [0, 1)");
  if (c.loss.n_clusters == 0) {
    if (data.n_classes() == 0) throw ConfigError("loss.n_clusters must be set for unlabelled surveys");
    c.loss.n_clusters = 4 * data.n_classes();
  }
  if (c.objective == Objective::kDeepCluster) c.encoder.n_prototypes = c.loss.n_clusters;
  c.sampler.validate();
  c.loss.validate();
  c.augment.validate();
  c.encoder.validate();
  if (uses_multicrop(c.objective) && c.augment.n_local < 2)
    throw ConfigError("multi-crop objectives need augment.n_local >= 2");
  if (data.size() < c.batch_size)
    throw ConfigError("batch_size " + std::to_string(c.batch_size) + " exceeds survey size " +
                      std::to_string(data.size()));
  if (c.objective == Objective::kDeepCluster && data.size() < c.loss.n_clusters)
    throw ConfigError("deepcluster needs at least n_clusters patches");
  const Image& probe = data.image(0);
  if (probe.channels != c.encoder.in_channels)
    throw ConfigError("images have " + std::to_string(probe.channels) + " channels, encoder expects " +
                      std::to_string(c.encoder.in_channels));
  const std::size_t need = c.encoder.min_input_size();
  if (c.augment.global_size < need || (uses_multicrop(c.objective) && c.augment.local_size < need))
    throw ConfigError("crop sizes too small for " + std::to_string(c.encoder.widths.size()) + " pooling stages");
  return c;
}

// The config echo stored in checkpoints: output location and resume source
// do not affect the trained weights, so they are left out.
inline nlohmann::json config_echo(const RunConfig& c) {
  nlohmann::json j = c;
  j.erase("out_dir");
  j.erase("resume");
  return j;
}

// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double wall_ms = 0.0;
  std::string checkpoint;
};

struct RunRecord {
  std::vector<EpochRecord> epochs;  // epoch 0 is the initial state (no loss)
  nlohmann::json config;
  std::string version = kVersion;
  Checkpoint final_state;
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string checkpoint_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_epoch_%04zu.bin", epoch);
  return buf;
}

inline std::vector<double> grad_vector(const Tensor& flat) {
  auto g = flat.grad();
  return {g.begin(), g.end()};
}

// Center crops of every patch, encoded and projected, l2-normalized: [n, D].
inline std::vector<double> projected_latents(const ModelState& m, const SurveyManifest& data, std::size_t crop,
                                             std::size_t batch = 64) {
  const Net net = bind(m, false);
  std::vector<double> out;
  out.reserve(data.size() * m.config.latent_dim);
  for (std::size_t start = 0; start < data.size(); start += batch) {
    std::vector<Image> ims;
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i)
      ims.push_back(center_crop(data.image(i), crop));
    const Tensor z = l2_normalize(project(net, encode(net, images_to_tensor(ims))), 1);
    auto d = z.data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

}  // namespace detail

class Trainer {
public:
  Trainer(RunConfig cfg, const SurveyManifest& data)
      : cfg_(resolve(std::move(cfg), data)),
        data_(data),
        index_(data, std::max(cfg_.sampler.r_loc.value_or(1.0), 1e-6)) {
    state_.student = init_model(cfg_.encoder, cfg_.seed);
    state_.velocity.assign(state_.student.params.size(), 0.0);
    state_.config = config_echo(cfg_);
    if (has_teacher(cfg_.objective)) {
      teacher_ = make_teacher(state_.student);
    }
    if (cfg_.objective == Objective::kMoco) queue_.emplace(cfg_.loss.queue_capacity, cfg_.encoder.latent_dim);
    if (cfg_.resume) restore(load_checkpoint(*cfg_.resume));
    sync_state();
  }

  const RunConfig& config() const { return cfg_; }
  const Checkpoint& state() const { return state_; }

  std::size_t steps_per_epoch() const { return data_.size() / cfg_.batch_size; }

  // Builds the views for source id i in the given epoch.
  ViewSet views_for(std::size_t i, std::size_t epoch) const {
    Rng partner_rng = make_rng(cfg_.seed, {tag(Stream::kPartner), epoch, i});
    Rng augment_rng = make_rng(cfg_.seed, {tag(Stream::kAugment), epoch, i});
    const std::size_t j = select_partner(i, cfg_.sampler, index_, partner_rng);
    if (uses_multicrop(cfg_.objective))
      return make_multicrop(i, j, data_.image(i), data_.image(j), cfg_.augment, augment_rng);
    return make_pair(i, j, data_.image(i), data_.image(j), cfg_.augment, augment_rng);
  }

  std::vector<std::size_t> epoch_order(std::size_t epoch) const {
    std::vector<std::size_t> order(data_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = make_rng(cfg_.seed, {tag(Stream::kShuffle), epoch});
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  }

  // Runs one epoch (1-based) and returns the mean batch loss.
  double run_epoch(std::size_t epoch) {
    const auto order = epoch_order(epoch);
    const std::size_t steps = steps_per_epoch();
    if (cfg_.objective == Objective::kDeepCluster && !cfg_.loss.cluster_every_step) recluster(epoch, 0);
    double total = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<std::size_t> ids(order.begin() + static_cast<long>(s * cfg_.batch_size),
                                   order.begin() + static_cast<long>((s + 1) * cfg_.batch_size));
      if (cfg_.objective == Objective::kDeepCluster && cfg_.loss.cluster_every_step) recluster(epoch, s);
      const std::size_t global_step = (epoch - 1) * steps + s;
      total += step(ids, global_step, epoch);
    }
    state_.epoch = epoch;
    sync_state();
    return total / static_cast<double>(steps);
  }

private:
  double learning_rate(std::size_t global_step) const {
    const double lr = *cfg_.optimizer.lr;
    const std::size_t total = cfg_.epochs * steps_per_epoch();
    if (!cfg_.optimizer.cosine || total == 0) return lr;
    return 0.5 * lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(global_step) / static_cast<double>(total)));
  }

  std::string describe(const std::vector<std::size_t>& ids) const {
    std::string s;
    for (std::size_t k = 0; k < ids.size(); ++k) s += (k ? "," : "") + std::to_string(ids[k]);
    return s;
  }

  double step(const std::vector<std::size_t>& ids, std::size_t global_step, std::size_t epoch) {
    std::vector<ViewSet> views;
    views.reserve(ids.size());
    for (std::size_t i : ids) views.push_back(views_for(i, epoch));

    Tensor flat, teacher_flat;
    Tensor loss;
    try {
      const Net net = bind(state_.student, true, &flat);
      std::optional<Net> tnet;
      if (teacher_) tnet = bind(teacher_->teacher, false, &teacher_flat);
      loss = objective_loss(net, tnet ? &*tnet : nullptr, views, ids);
    } catch (const TensorError& e) {
      throw TrainError("epoch " + std::to_string(epoch) + ": loss computation failed on batch ids [" +
                       describe(ids) + "]: " + e.what());
    }
    const double value = loss.item();
    if (!std::isfinite(value))
      throw TrainError("epoch " + std::to_string(epoch) + ": non-finite loss " + detail::format_double(value) +
                       " on batch ids [" + describe(ids) + "]");
    backward(loss);
    if (teacher_flat.defined() && teacher_flat.has_grad())
      throw TrainError("gradient reached the teacher parameters");

    const auto g = detail::grad_vector(flat);
    const double lr = learning_rate(global_step);
    auto& th = state_.student.params;
    auto& v = state_.velocity;
    for (std::size_t k = 0; k < th.size(); ++k) {
      const double gk = g[k] + cfg_.optimizer.weight_decay * th[k];
      v[k] = cfg_.optimizer.momentum * v[k] + gk;
      th[k] -= lr * v[k];
    }
    if (teacher_) ema_update(*teacher_, state_.student, cfg_.loss.momentum);
    return value;
  }

  static Tensor stack(const std::vector<ViewSet>& views, bool locals, std::size_t which) {
    std::vector<const Image*> ims;
    for (const auto& v : views) ims.push_back(locals ? &v.locals[which] : &v.globals[which]);
    return images_to_tensor(ims);
  }

  // [view0 batch; view1 batch; ...] -> per-view [B, K] slices.
  static std::vector<Tensor> split_views(const Tensor& t, std::size_t batch) {
    std::vector<Tensor> out;
    for (std::size_t s = 0; s < t.dim(0); s += batch) out.push_back(slice(t, 0, s, s + batch));
    return out;
  }

  Tensor objective_loss(const Net& net, const Net* tnet, const std::vector<ViewSet>& views,
                        const std::vector<std::size_t>& ids) {
    const std::size_t b = views.size();
    const Tensor x1 = stack(views, false, 0), x2 = stack(views, false, 1);
    switch (cfg_.objective) {
      case Objective::kSimClr: {
        const Tensor z = project(net, encode(net, concat({x1, x2}, 0)));
        return nt_xent(build_similarity_matrix(z), cfg_.loss.temperature);
      }
      case Objective::kSimSiam: {
        const Tensor z = project(net, encode(net, concat({x1, x2}, 0)));
        const Tensor p = predict(net, z);
        return simsiam_loss(slice(p, 0, 0, b), slice(z, 0, 0, b), slice(p, 0, b, 2 * b), slice(z, 0, b, 2 * b));
      }
      case Objective::kMoco: {
        const Tensor q = project(net, encode(net, x1));
        const Tensor k = project(*tnet, encode(*tnet, x2));
        return moco_loss(q, k, *queue_, cfg_.loss.temperature);
      }
      default:
        break;
    }

    // Multi-crop: globals and locals share the encoder, encoded per resolution.
    const Tensor g = concat({x1, x2}, 0);
    std::vector<Tensor> locals;
    for (std::size_t k = 0; k < cfg_.augment.n_local; ++k) locals.push_back(stack(views, true, k));
    auto logits_of = [&](const Net& n, const Tensor& x) { return prototype_logits(n, project(n, encode(n, x))); };
    std::vector<Tensor> all = split_views(logits_of(net, g), b);
    for (auto& t : split_views(logits_of(net, concat(locals, 0)), b)) all.push_back(t);

    switch (cfg_.objective) {
      case Objective::kSwav:
        return swav_loss(all, cfg_.loss);
      case Objective::kDino: {
        const std::vector<Tensor> teacher_logits = split_views(logits_of(*tnet, g), b);
        return dino_loss(all, teacher_logits, *teacher_, cfg_.loss);
      }
      case Objective::kDeepCluster: {
        std::vector<int> y;
        for (std::size_t i : ids) y.push_back(cluster_labels_[i]);
        Tensor total;
        for (const auto& l : all) {
          const Tensor t = deepcluster_loss_from_logits(l, y, cfg_.loss.student_temperature);
          total = total.defined() ? total + t : t;
        }
        return total / static_cast<double>(all.size());
      }
      default:
        throw TrainError("unhandled objective");
    }
  }

  // k-means over projected center-crop latents; prototypes take the centroids.
  void recluster(std::size_t epoch, std::size_t step) {
    const std::size_t d = cfg_.encoder.latent_dim;
    const auto z = detail::projected_latents(state_.student, data_, cfg_.augment.global_size);
    const auto km = kmeans(z, data_.size(), d, cfg_.loss.n_clusters,
                           stream_seed(cfg_.seed, {tag(Stream::kKmeans), epoch, step}));
    cluster_labels_ = km.labels;
    auto protos = state_.student.view("prototypes");
    std::copy(km.centroids.begin(), km.centroids.end(), protos.begin());
  }

  void restore(const Checkpoint& c) {
    if (!(c.student.config == cfg_.encoder)) throw TrainError("resume: encoder config differs from checkpoint");
    nlohmann::json a = c.config, b = config_echo(cfg_);
    a.erase("epochs");
    b.erase("epochs");
    if (a != b) throw TrainError("resume: run config differs from the checkpoint's config echo");
    state_.student = c.student;
    state_.velocity = c.velocity;
    state_.epoch = c.epoch;
    if (teacher_) {
      if (!c.teacher) throw TrainError("resume: checkpoint has no teacher state");
      teacher_->teacher = *c.teacher;
      if (cfg_.objective == Objective::kDino) teacher_->center = c.center;
    }
    if (queue_) queue_->restore(c.queue, c.queue_size, c.queue_cursor);
    cluster_labels_.assign(c.cluster_labels.begin(), c.cluster_labels.end());
  }

  void sync_state() {
    state_.teacher.reset();
    state_.center.clear();
    if (teacher_) {
      state_.teacher = teacher_->teacher;
      if (cfg_.objective == Objective::kDino) state_.center = teacher_->center;
    }
    state_.queue.clear();
    if (queue_) {
      state_.queue = queue_->raw();
      state_.queue_capacity = queue_->capacity();
      state_.queue_dim = queue_->dim();
      state_.queue_size = queue_->size();
      state_.queue_cursor = queue_->cursor();
    }
    state_.cluster_labels.assign(cluster_labels_.begin(), cluster_labels_.end());
  }

  RunConfig cfg_;
  const SurveyManifest& data_;
  SpatialIndex index_;
  Checkpoint state_;
  std::optional<TeacherState> teacher_;
  std::optional<MemoryQueue> queue_;
  std::vector<int> cluster_labels_;
};

// Trains on an already loaded survey. Writes checkpoints, events.jsonl,
// loss.csv and resolved_config.json when cfg.out_dir is non-empty.
inline RunRecord train(const RunConfig& cfg, const SurveyManifest& data, const TrainHooks& hooks = {}) {
  namespace fs = std::filesystem;
  Trainer trainer(cfg, data);
  const RunConfig& rc = trainer.config();
  RunRecord record;
  record.config = rc;

  const bool write = !rc.out_dir.empty();
  const fs::path out(rc.out_dir);
  std::ofstream events, losses;
  if (write) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw TrainError("cannot create " + out.string() + ": " + ec.message());
    std::ofstream(out / "resolved_config.json") << nlohmann::json(rc).dump(2) << '\n';
    events.open(out / "events.jsonl");
    losses.open(out / "loss.csv");
    if (!events || !losses) throw TrainError("cannot write run logs under " + out.string());
    events << nlohmann::json{{"event", "start"}, {"version", kVersion}, {"config", record.config}}.dump() << '\n';
    losses << "epoch,loss\n";
  }

  auto emit = [&](EpochRecord e, bool has_loss) {
    if (write) {
      e.checkpoint = detail::checkpoint_name(e.epoch);
      save_checkpoint(trainer.state(), out / e.checkpoint);
      nlohmann::json ev = {{"event", "epoch"}, {"epoch", e.epoch}, {"wall_ms", e.wall_ms},
                           {"checkpoint", e.checkpoint}};
      ev["loss"] = has_loss ? nlohmann::json(e.loss) : nlohmann::json(nullptr);
      events << ev.dump() << '\n';
      if (has_loss) losses << e.epoch << ',' << detail::format_double(e.loss) << '\n';
      events.flush();
      losses.flush();
    }
    if (hooks.on_epoch) hooks.on_epoch(e);
    record.epochs.push_back(std::move(e));
  };

  const std::size_t first = trainer.state().epoch + 1;
  if (first == 1) emit(EpochRecord{0, 0.0, 0.0, {}}, false);
  for (std::size_t epoch = first; epoch <= rc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double loss = trainer.run_epoch(epoch);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    emit(EpochRecord{epoch, loss, ms, {}}, true);
  }
  if (write) events << nlohmann::json{{"event", "end"}, {"epochs", rc.epochs}}.dump() << '\n';
  record.final_state = trainer.state();
  return record;
}

inline RunRecord train(const RunConfig& cfg, const TrainHooks& hooks = {}) {
  const SurveyManifest data = load_dataset(cfg.dataset);
  return train(cfg, data, hooks);
}

// ---------------------------------------------------------------------------
// Latent extraction

struct LatentTable {
  std::vector<std::size_t> ids;
  std::vector<std::optional<int>> labels;
  std::size_t dim = 0;
  std::vector<double> values;  // row-major [n, dim]

  std::size_t rows() const { return ids.size(); }
  bool operator==(const LatentTable&) const = default;
};

// Backbone latents z of every patch, center-cropped to crop x crop, no augmentation.
inline LatentTable extract_latents(const ModelState& model, const SurveyManifest& data, std::size_t crop,
                                   std::size_t batch = 64) {
  if (data.size() == 0) throw TrainError("extract_latents: empty survey");
  const Net net = bind(model, false);
  LatentTable t;
  t.dim = model.config.latent_dim;
  t.values.reserve(data.size() * t.dim);
  for (std::size_t start = 0; start < data.size(); start += batch) {
    std::vector<Image> ims;
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) {
      const Image& im = data.image(i);
      if (im.channels != model.config.in_channels)
        throw TrainError("extract_latents: patch " + std::to_string(i) + " has " + std::to_string(im.channels) +
                         " channels, checkpoint expects " + std::to_string(model.config.in_channels));
      ims.push_back(center_crop(im, crop));
      t.ids.push_back(data.patches[i].id);
      t.labels.push_back(data.patches[i].label);
    }
    const Tensor z = encode(net, images_to_tensor(ims));
    auto d = z.data();
    t.values.insert(t.values.end(), d.begin(), d.end());
  }
  return t;
}

inline LatentTable extract_latents(const Checkpoint& ckpt, const SurveyManifest& data) {
  std::size_t crop = AugmentParams{}.global_size;
  if (ckpt.config.contains("augment")) crop = ckpt.config["augment"].value("global_size", crop);
  return extract_latents(ckpt.student, data, crop);
}

inline void write_latents_csv(const LatentTable& t, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw TrainError("cannot write " + path.string());
  out << "id,label";
  for (std::size_t k = 0; k < t.dim; ++k) out << ",z" << k;
  out << '\n';
  for (std::size_t r = 0; r < t.rows(); ++r) {
    out << t.ids[r] << ',';
    if (t.labels[r]) out << *t.labels[r];
    for (std::size_t k = 0; k < t.dim; ++k) out << ',' << detail::format_double(t.values[r * t.dim + k]);
    out << '\n';
  }
  if (!out) throw TrainError("failed writing " + path.string());
}

inline LatentTable read_latents_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TrainError("cannot open latents " + path.string());
  std::string line;
  if (!std::getline(in, line) || !line.starts_with("id,label"))
    throw TrainError(path.string() + ": missing 'id,label,z0,...' header");
  LatentTable t;
  t.dim = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) - 1;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != t.dim + 2)
      throw TrainError(path.string() + " line " + std::to_string(line_no) + ": expected " +
                       std::to_string(t.dim + 2) + " columns");
    try {
      t.ids.push_back(std::stoull(cells[0]));
      t.labels.push_back(cells[1].empty() ? std::nullopt : std::optional<int>(std::stoi(cells[1])));
      for (std::size_t k = 0; k < t.dim; ++k) t.values.push_back(std::stod(cells[k + 2]));
    } catch (const std::logic_error&) {
      throw TrainError(path.string() + " line " + std::to_string(line_no) + ": unparsable value");
    }
  }
  if (t.ids.empty()) throw TrainError(path.string() + ": no latent rows");
  return t;
}

}  // namespace geossl
