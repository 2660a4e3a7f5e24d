// geossl command-line driver.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "geossl/checkpoint.hpp"
#include "geossl/eval.hpp"
#include "geossl/experiment.hpp"
#include "geossl/manifest_io.hpp"
#include "geossl/survey.hpp"
#include "geossl/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace geossl;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError(path + ": " + e.what());
  }
}

void log_config(const char* command, const json& resolved) {
  std::cerr << "geossl " << command << ": resolved config " << resolved.dump() << '\n';
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string config, out;
  std::uint64_t seed = 0;
};

int run_gen(const GenArgs& a) {
  const GeneratorConfig cfg = resolve(read_json(a.config).get<GeneratorConfig>());
  validate(cfg);
  const json resolved = {{"generator", cfg}, {"seed", a.seed}};
  log_config("gen-survey", json{{"generator", cfg}, {"seed", a.seed}, {"out", a.out}});
  const SurveyManifest m = generate_survey(cfg, a.seed);
  ensure_dir(a.out);
  const fs::path manifest = save_manifest(m, a.out);
  write_json(fs::path(a.out) / "resolved_config.json", resolved);
  std::cout << manifest.string() << '\n';
  return 0;
}

struct TrainArgs {
  std::string config, objective, mode, out, manifest, resume;
  std::optional<double> r_loc;
  std::optional<std::size_t> epochs, batch_size;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : read_json(a.config).get<RunConfig>();
  if (!a.objective.empty()) cfg.objective = parse_objective(a.objective);
  if (!a.mode.empty()) {
    try {
      cfg.sampler.mode = parse_sampler_mode(a.mode);
    } catch (const ViewError& e) {
      throw UsageError(e.what());
    }
  }
  if (a.r_loc) cfg.sampler.r_loc = a.r_loc;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (a.seed) cfg.seed = *a.seed;
  if (!a.manifest.empty()) {
    cfg.dataset.manifest = a.manifest;
    cfg.dataset.generator.reset();
  }
  if (!a.resume.empty()) cfg.resume = a.resume;
  cfg.out_dir = a.out;
  if (cfg.sampler.mode == SamplerMode::kGeo && !cfg.sampler.r_loc)
    throw UsageError("--mode geo needs --r-loc or sampler.r_loc in the config");
  if (!cfg.dataset.manifest && !cfg.dataset.generator)
    throw UsageError("no dataset: pass --manifest or set dataset in the config");

  const SurveyManifest data = load_dataset(cfg.dataset);
  RunConfig resolved;
  try {
    resolved = resolve(cfg, data);
  } catch (const ViewError& e) {
    throw UsageError(e.what());
  }
  log_config("train", json(resolved));
  std::cerr << "method: " << method_name(resolved.objective, resolved.sampler.mode) << '\n';
  const RunRecord rec = train(cfg, data, {[](const EpochRecord& e) {
                                if (e.epoch > 0)
                                  std::cerr << "epoch " << e.epoch << " loss " << detail::format_double(e.loss)
                                            << '\n';
                              }});
  std::cout << (fs::path(a.out) / rec.epochs.back().checkpoint).string() << '\n';
  return 0;
}

struct ExtractArgs {
  std::string checkpoint, manifest, out;
  std::optional<std::size_t> crop;
};

int run_extract(const ExtractArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  DatasetSpec ds;
  if (!a.manifest.empty()) ds.manifest = a.manifest;
  else if (ckpt.config.contains("dataset")) ds = ckpt.config["dataset"].get<DatasetSpec>();
  else throw UsageError("checkpoint records no dataset; pass --manifest");
  std::size_t crop = AugmentParams{}.global_size;
  if (ckpt.config.contains("augment")) crop = ckpt.config["augment"].value("global_size", crop);
  if (a.crop) crop = *a.crop;
  log_config("extract", {{"checkpoint", a.checkpoint}, {"dataset", ds}, {"crop", crop}, {"out", a.out}});
  const SurveyManifest data = load_dataset(ds);
  const LatentTable t = extract_latents(ckpt.student, data, crop);
  if (fs::path(a.out).has_parent_path()) ensure_dir(fs::path(a.out).parent_path());
  write_latents_csv(t, a.out);
  std::cout << a.out << '\n';
  return 0;
}

struct EvalArgs {
  std::string latents, config, manifest, out;
  std::optional<std::size_t> pca_dim;
  std::optional<std::uint64_t> split_seed;
  std::optional<double> train_fraction;
};

int run_eval(const EvalArgs& a) {
  EvalConfig cfg = a.config.empty() ? EvalConfig{} : read_json(a.config).get<EvalConfig>();
  if (a.pca_dim) cfg.pca_dim = *a.pca_dim == 0 ? std::nullopt : std::optional<std::size_t>(*a.pca_dim);
  if (a.split_seed) cfg.split_seed = *a.split_seed;
  if (a.train_fraction) cfg.train_fraction = *a.train_fraction;

  const LatentTable t = read_latents_csv(a.latents);
  std::vector<int> labels;
  int max_label = -1;
  for (const auto& l : t.labels) {
    labels.push_back(l.value_or(-1));
    max_label = std::max(max_label, l.value_or(-1));
  }
  std::vector<std::string> names;
  if (!a.manifest.empty()) {
    names = load_manifest(a.manifest).class_names;
  } else {
    for (int k = 0; k <= max_label; ++k) names.push_back("class_" + std::to_string(k));
  }
  log_config("eval", {{"latents", a.latents}, {"eval", cfg}, {"class_names", names}, {"out", a.out}});
  const EvalReport rep = evaluate(t.values, t.rows(), t.dim, labels, names, cfg);
  ensure_dir(a.out);
  save_report(rep, fs::path(a.out) / "report.json");
  write_confusion_csv(rep, fs::path(a.out) / "confusion.csv");
  std::printf("macro_f1 %.6f\n", rep.macro_f1);
  return 0;
}

struct CompareArgs {
  std::vector<std::string> a, b;
  std::string out;
};

int run_compare(const CompareArgs& c) {
  log_config("compare", {{"a", c.a}, {"b", c.b}, {"out", c.out}});
  std::vector<EvalReport> ra, rb;
  for (const auto& p : c.a) ra.push_back(load_report(p));
  for (const auto& p : c.b) rb.push_back(load_report(p));
  const auto rows = compare_runs(ra, rb);
  if (fs::path(c.out).has_parent_path()) ensure_dir(fs::path(c.out).parent_path());
  write_delta_csv(rows, c.out);
  for (const auto& r : rows)
    std::printf("%-16s a %.4f  b %.4f  delta %+.4f (%+.1f%%)\n", r.name.c_str(), r.a_mean, r.b_mean, r.delta,
                100.0 * r.relative);
  return 0;
}

struct ExperimentArgs {
  std::string matrix, out;
};

int run_exp(const ExperimentArgs& a) {
  const ExperimentMatrix m = read_json(a.matrix).get<ExperimentMatrix>();
  log_config("experiment", json(m));
  const ExperimentResult r = run_experiment(m, a.out);
  std::cout << (fs::path(a.out) / "comparison.csv").string() << '\n';
  return r.any_failed ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Geo-regularised self-supervised learning on seafloor image surveys"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-survey", "Generate a synthetic geo-tagged survey (manifest + image blobs)");
  g->add_option("--config", gen.config, "Generator config JSON [config: generator.*]")->required();
  g->add_option("--seed", gen.seed, "Generator seed [config: dataset.generator_seed]")->capture_default_str();
  g->add_option("--out", gen.out, "Output directory for manifest.jsonl and images/")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train an encoder with one objective and sampler mode");
  t->add_option("--config", tr.config, "Run config JSON; flags below override its keys");
  t->add_option("--objective", tr.objective, "simclr|simsiam|moco|swav|deepcluster|dino [config: objective]");
  t->add_option("--mode", tr.mode, "Sampler mode standard|geo [config: sampler.mode]");
  t->add_option("--r-loc", tr.r_loc, "Positive-pair radius in metres, required for geo [config: sampler.r_loc]");
  t->add_option("--epochs", tr.epochs, "Training epochs [config: epochs]");
  t->add_option("--batch-size", tr.batch_size, "Patches per step [config: batch_size]");
  t->add_option("--seed", tr.seed, "Training seed [config: seed]");
  t->add_option("--manifest", tr.manifest, "Survey manifest.jsonl [config: dataset.manifest]");
  t->add_option("--resume", tr.resume, "Checkpoint to continue from [config: resume]");
  t->add_option("--out", tr.out, "Run directory for checkpoints and logs [config: out_dir]")->required();

  ExtractArgs ex;
  auto* e = app.add_subcommand("extract", "Write latent vectors of every patch from a checkpoint");
  e->add_option("--checkpoint", ex.checkpoint, "Checkpoint file")->required();
  e->add_option("--manifest", ex.manifest, "Survey manifest.jsonl [config: dataset.manifest]; default: the "
                                           "dataset recorded in the checkpoint");
  e->add_option("--crop", ex.crop, "Center-crop size [config: augment.global_size]");
  e->add_option("--out", ex.out, "Output latents CSV")->required();

  EvalArgs ev;
  auto* v = app.add_subcommand("eval", "Linear-probe evaluation of latents: macro-F1 and confusion matrix");
  v->add_option("--latents", ev.latents, "Latents CSV from extract")->required();
  v->add_option("--config", ev.config, "Eval config JSON; flags below override its keys");
  v->add_option("--manifest", ev.manifest, "Survey manifest.jsonl, used for class names");
  v->add_option("--pca-dim", ev.pca_dim, "PCA dimension, 0 disables [config: pca_dim]");
  v->add_option("--split-seed", ev.split_seed, "Train/eval split seed [config: split_seed]");
  v->add_option("--train-fraction", ev.train_fraction, "Per-class train fraction [config: train_fraction]");
  v->add_option("--out", ev.out, "Output directory for report.json and confusion.csv")->required();

  CompareArgs cmp;
  auto* c = app.add_subcommand("compare", "Per-class and macro F1 deltas between two sets of reports");
  c->add_option("--a", cmp.a, "Reports of the reference method (one per seed)")->required();
  c->add_option("--b", cmp.b, "Reports of the compared method (one per seed)")->required();
  c->add_option("--out", cmp.out, "Output delta CSV")->required();

  ExperimentArgs xp;
  auto* x = app.add_subcommand("experiment", "Run an objectives x modes x dims x seeds grid");
  x->add_option("--matrix", xp.matrix, "Experiment matrix JSON")->required();
  x->add_option("--out", xp.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForVersion& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 2;
  }

  try {
    if (g->parsed()) return run_gen(gen);
    if (t->parsed()) return run_train(tr);
    if (e->parsed()) return run_extract(ex);
    if (v->parsed()) return run_eval(ev);
    if (c->parsed()) return run_compare(cmp);
    if (x->parsed()) return run_exp(xp);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 2;
}
