#pragma once

// Experiment grid: objectives x sampler modes x latent dims, each trained over
// several seeds, extracted, probed and summarized into one CSV.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "geossl/eval.hpp"
#include "geossl/trainer.hpp"

namespace geossl {

struct ExperimentMatrix {
  std::string dataset_name = "synthetic";
  DatasetSpec dataset;
  std::vector<Objective> objectives;
  std::vector<SamplerMode> modes{SamplerMode::kStandard, SamplerMode::kGeo};
  std::vector<std::size_t> dims{128};
  std::vector<std::uint64_t> seeds{0};
  std::optional<double> r_loc;
  nlohmann::json base = nlohmann::json::object();  // partial RunConfig applied to every cell
  EvalConfig eval;
  bool baseline = false;  // add an untrained-encoder row per dim
};

inline void from_json(const nlohmann::json& j, ExperimentMatrix& m) {
  detail::reject_unknown(j,
                         {"dataset_name", "dataset", "objectives", "modes", "dims", "seeds", "r_loc", "base", "eval",
                          "baseline"},
                         "experiment matrix");
  m.dataset_name = j.value("dataset_name", m.dataset_name);
  if (!j.contains("dataset")) throw ConfigError("experiment matrix: 'dataset' is required");
  m.dataset = j["dataset"].get<DatasetSpec>();
  m.objectives.clear();
  for (const auto& o : j.value("objectives", objective_names())) m.objectives.push_back(parse_objective(o));
  if (j.contains("modes")) {
    m.modes.clear();
    for (const auto& s : j["modes"]) m.modes.push_back(parse_sampler_mode(s.get<std::string>()));
  }
  m.dims = j.value("dims", m.dims);
  m.seeds = j.value("seeds", m.seeds);
  if (j.contains("r_loc") && !j["r_loc"].is_null()) m.r_loc = j["r_loc"].get<double>();
  m.base = j.value("base", m.base);
  if (j.contains("eval")) m.eval = j["eval"].get<EvalConfig>();
  m.baseline = j.value("baseline", m.baseline);
  if (m.objectives.empty() || m.modes.empty() || m.dims.empty() || m.seeds.empty())
    throw ConfigError("experiment matrix: objectives, modes, dims and seeds must be non-empty");
}

inline void to_json(nlohmann::json& j, const ExperimentMatrix& m) {
  std::vector<std::string> objs, modes;
  for (auto o : m.objectives) objs.push_back(to_string(o));
  for (auto s : m.modes) modes.push_back(to_string(s));
  j = {{"dataset_name", m.dataset_name}, {"dataset", m.dataset}, {"objectives", objs}, {"modes", modes},
       {"dims", m.dims}, {"seeds", m.seeds}, {"base", m.base}, {"eval", m.eval}, {"baseline", m.baseline}};
  j["r_loc"] = m.r_loc ? nlohmann::json(*m.r_loc) : nlohmann::json(nullptr);
}

struct ExperimentRow {
  std::string method, objective, mode, dataset;
  std::size_t dim = 0;
  double mean_f1 = 0.0, std_f1 = 0.0;
  std::size_t n_seeds = 0;
  bool failed = false;
  std::string error;
};

// Builds the run config of one cell from the matrix base.
inline RunConfig cell_config(const ExperimentMatrix& m, std::optional<Objective> objective, SamplerMode mode,
                             std::size_t dim, std::uint64_t seed, const std::string& out_dir) {
  RunConfig c = m.base.get<RunConfig>();
  c.dataset = m.dataset;
  if (objective) c.objective = *objective;
  c.sampler.mode = mode;
  if (m.r_loc) c.sampler.r_loc = m.r_loc;
  c.encoder.latent_dim = dim;
  c.seed = seed;
  c.out_dir = out_dir;
  if (!objective) c.epochs = 0;
  return c;
}

// Trains, extracts and evaluates one cell; returns the eval report.
inline EvalReport run_cell(const RunConfig& cfg, const SurveyManifest& data, const EvalConfig& eval) {
  namespace fs = std::filesystem;
  const RunRecord rec = train(cfg, data);
  const LatentTable lat = extract_latents(rec.final_state, data);
  EvalConfig ec = eval;
  if (ec.pca_dim) ec.pca_dim = std::min(*ec.pca_dim, lat.dim);
  const auto labels = data.labels();
  EvalReport rep = evaluate(lat.values, lat.rows(), lat.dim, labels, data.class_names, ec);
  if (!cfg.out_dir.empty()) {
    write_latents_csv(lat, fs::path(cfg.out_dir) / "latents.csv");
    save_report(rep, fs::path(cfg.out_dir) / "report.json");
    write_confusion_csv(rep, fs::path(cfg.out_dir) / "confusion.csv");
  }
  return rep;
}

struct ExperimentResult {
  std::vector<ExperimentRow> rows;
  bool any_failed = false;
};

inline std::string format_rows_csv(const std::vector<ExperimentRow>& rows) {
  std::string out = "method,objective,mode,dataset,dim,mean_macro_f1,std_macro_f1,n_seeds,status\n";
  char buf[512];
  for (const auto& r : rows) {
    if (r.failed)
      std::snprintf(buf, sizeof buf, "%s,%s,%s,%s,%zu,,,%zu,FAILED\n", r.method.c_str(), r.objective.c_str(),
                    r.mode.c_str(), r.dataset.c_str(), r.dim, r.n_seeds);
    else
      std::snprintf(buf, sizeof buf, "%s,%s,%s,%s,%zu,%.6f,%.6f,%zu,ok\n", r.method.c_str(), r.objective.c_str(),
                    r.mode.c_str(), r.dataset.c_str(), r.dim, r.mean_f1, r.std_f1, r.n_seeds);
    out += buf;
  }
  return out;
}

// Every cell is attempted; failures are recorded in their row.
inline ExperimentResult run_experiment(const ExperimentMatrix& m, const std::filesystem::path& out,
                                       std::ostream& log = std::cerr) {
  namespace fs = std::filesystem;
  fs::create_directories(out);
  std::ofstream(out / "matrix_resolved.json") << nlohmann::json(m).dump(2) << '\n';
  const SurveyManifest data = load_dataset(m.dataset);

  ExperimentResult result;
  auto run_group = [&](std::optional<Objective> obj, SamplerMode mode, std::size_t dim) {
    ExperimentRow row;
    row.objective = obj ? to_string(*obj) : "none";
    row.mode = obj ? to_string(mode) : "none";
    row.method = obj ? method_name(*obj, mode) : "untrained";
    row.dataset = m.dataset_name;
    row.dim = dim;
    const std::string cell = row.objective + "_" + row.mode + "_d" + std::to_string(dim);
    std::vector<double> f1;
    for (auto seed : m.seeds) {
      const fs::path dir = out / "cells" / cell / ("seed_" + std::to_string(seed));
      try {
        const EvalReport rep = run_cell(cell_config(m, obj, mode, dim, seed, dir.string()), data, m.eval);
        f1.push_back(rep.macro_f1);
        log << cell << " seed " << seed << ": macro-F1 " << rep.macro_f1 << '\n';
      } catch (const std::exception& e) {
        row.failed = true;
        row.error = e.what();
        log << cell << " seed " << seed << " FAILED: " << e.what() << '\n';
      }
    }
    row.n_seeds = f1.size();
    if (!row.failed) std::tie(row.mean_f1, row.std_f1) = detail::mean_std(f1);
    result.any_failed = result.any_failed || row.failed;
    result.rows.push_back(row);
  };

  for (auto dim : m.dims) {
    if (m.baseline) run_group(std::nullopt, SamplerMode::kStandard, dim);
    for (auto obj : m.objectives)
      for (auto mode : m.modes) run_group(obj, mode, dim);
  }
  std::ofstream(out / "comparison.csv") << format_rows_csv(result.rows);
  return result;
}

}  // namespace geossl
