#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "geossl/checkpoint.hpp"
#include "geossl/experiment.hpp"
#include "geossl/trainer.hpp"

using namespace geossl;
namespace fs = std::filesystem;

namespace {

GeneratorConfig small_survey(std::size_t n) {
  GeneratorConfig g;
  g.n_patches = n;
  g.image_size = 16;
  return g;
}

RunConfig small_run(Objective obj, std::size_t n_patches = 64) {
  RunConfig c;
  c.dataset.generator = small_survey(n_patches);
  c.dataset.generator_seed = 7;
  c.objective = obj;
  c.encoder.widths = {4, 8};
  c.encoder.latent_dim = 16;
  c.encoder.projector_hidden = 32;
  c.encoder.predictor_hidden = 16;
  c.encoder.n_prototypes = 8;
  c.augment.global_size = 14;
  c.augment.local_size = 6;
  c.augment.n_local = 2;
  c.loss.queue_capacity = 32;
  c.batch_size = 16;
  c.epochs = 1;
  return c;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("geossl_trainer_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST(Train, ZeroEpochsWritesOnlyInitialCheckpoint) {
  RunConfig c = small_run(Objective::kSimClr);
  c.epochs = 0;
  c.out_dir = temp_dir("zero").string();
  const RunRecord rec = train(c);
  ASSERT_EQ(rec.epochs.size(), 1u);
  EXPECT_EQ(rec.epochs[0].epoch, 0u);
  EXPECT_TRUE(fs::exists(fs::path(c.out_dir) / "ckpt_epoch_0000.bin"));
  EXPECT_FALSE(fs::exists(fs::path(c.out_dir) / "ckpt_epoch_0001.bin"));
  EXPECT_EQ(slurp(fs::path(c.out_dir) / "loss.csv"), "epoch,loss\n");
  EXPECT_EQ(rec.final_state.student.params, init_model(resolve(c, load_dataset(c.dataset)).encoder, 0).params);
}

TEST(Train, GeoBelowMinSpacingEqualsStandard) {
  RunConfig a = small_run(Objective::kSimClr);
  a.epochs = 2;
  a.out_dir = temp_dir("std").string();
  RunConfig b = a;
  b.sampler = SamplerConfig{SamplerMode::kGeo, 1.0};  // track spacing is 2 m
  b.out_dir = temp_dir("geo").string();
  const RunRecord ra = train(a), rb = train(b);
  EXPECT_EQ(slurp(fs::path(a.out_dir) / "loss.csv"), slurp(fs::path(b.out_dir) / "loss.csv"));
  EXPECT_EQ(ra.final_state.student.params, rb.final_state.student.params);
}

TEST(Train, SimclrLossFallsBelowCollapseValue) {
  RunConfig c = small_run(Objective::kSimClr, 256);
  c.epochs = 5;
  const RunRecord rec = train(c);
  ASSERT_EQ(rec.epochs.size(), 6u);
  for (std::size_t e = 1; e < rec.epochs.size(); ++e) EXPECT_TRUE(std::isfinite(rec.epochs[e].loss));
  EXPECT_LT(rec.epochs.back().loss, std::log(31.0));
}

TEST(Train, EveryObjectiveRunsAndIsReproducible) {
  for (Objective obj : {Objective::kSimClr, Objective::kSimSiam, Objective::kMoco, Objective::kSwav,
                        Objective::kDeepCluster, Objective::kDino}) {
    RunConfig a = small_run(obj);
    a.sampler = SamplerConfig{SamplerMode::kGeo, 5.0};
    a.out_dir = temp_dir("rep_a").string();
    RunConfig b = a;
    b.out_dir = temp_dir("rep_b").string();
    const RunRecord ra = train(a), rb = train(b);
    const std::string name = to_string(obj);
    ASSERT_TRUE(std::isfinite(ra.epochs.back().loss)) << name;
    for (const char* f : {"ckpt_epoch_0000.bin", "ckpt_epoch_0001.bin", "loss.csv"})
      EXPECT_EQ(slurp(fs::path(a.out_dir) / f), slurp(fs::path(b.out_dir) / f)) << name << " " << f;
    EXPECT_NE(ra.final_state.student.params, init_model(ra.final_state.student.config, 0).params) << name;
  }
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  for (Objective obj : {Objective::kSimClr, Objective::kMoco, Objective::kDeepCluster, Objective::kDino}) {
    // Resume from the epoch-1 checkpoint of the same two-epoch schedule.
    RunConfig full = small_run(obj);
    full.epochs = 2;
    full.out_dir = temp_dir("resume_full").string();
    const RunRecord whole = train(full);

    RunConfig second = full;
    second.out_dir = temp_dir("resume_tail").string();
    second.resume = (fs::path(full.out_dir) / "ckpt_epoch_0001.bin").string();
    const RunRecord resumed = train(second);
    ASSERT_EQ(resumed.epochs.size(), 1u) << to_string(obj);
    EXPECT_EQ(resumed.epochs[0].epoch, 2u);
    EXPECT_DOUBLE_EQ(resumed.epochs[0].loss, whole.epochs.back().loss) << to_string(obj);
    EXPECT_TRUE(resumed.final_state == whole.final_state) << to_string(obj);
    EXPECT_EQ(slurp(fs::path(second.out_dir) / "ckpt_epoch_0002.bin"),
              slurp(fs::path(full.out_dir) / "ckpt_epoch_0002.bin"))
        << to_string(obj);
  }
}

TEST(Train, ResumeRejectsDifferentConfig) {
  RunConfig first = small_run(Objective::kSimClr);
  first.out_dir = temp_dir("resume_bad").string();
  train(first);
  RunConfig other = small_run(Objective::kSimClr);
  other.epochs = 2;
  other.loss.temperature = 0.5;
  other.resume = (fs::path(first.out_dir) / "ckpt_epoch_0001.bin").string();
  EXPECT_THROW(train(other), TrainError);
}

TEST(Train, TeacherFollowsEmaOfStudentOnly) {
  // One step per epoch: teacher_1 = m * theta_0 + (1 - m) * theta_1 exactly.
  for (Objective obj : {Objective::kMoco, Objective::kDino}) {
    RunConfig c = small_run(obj, 16);
    const RunRecord rec = train(c);
    const auto theta0 = init_model(rec.final_state.student.config, 0).params;
    const auto& theta1 = rec.final_state.student.params;
    ASSERT_TRUE(rec.final_state.teacher.has_value());
    const auto& t = rec.final_state.teacher->params;
    const double m = c.loss.momentum;
    for (std::size_t k = 0; k < t.size(); ++k) ASSERT_NEAR(t[k], m * theta0[k] + (1.0 - m) * theta1[k], 1e-12);
  }
}

TEST(Train, EventsAndLossLogs) {
  RunConfig c = small_run(Objective::kSimSiam);
  c.epochs = 2;
  c.out_dir = temp_dir("logs").string();
  train(c);
  std::ifstream ev(fs::path(c.out_dir) / "events.jsonl");
  std::string line;
  std::vector<nlohmann::json> events;
  while (std::getline(ev, line)) events.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(events.size(), 5u);
  EXPECT_EQ(events[0]["event"], "start");
  EXPECT_TRUE(events[1]["loss"].is_null());
  EXPECT_TRUE(events[2]["loss"].is_number());
  EXPECT_EQ(events[3]["checkpoint"], "ckpt_epoch_0002.bin");
  EXPECT_EQ(events[4]["event"], "end");
  std::istringstream csv(slurp(fs::path(c.out_dir) / "loss.csv"));
  std::getline(csv, line);
  EXPECT_EQ(line, "epoch,loss");
  std::getline(csv, line);
  EXPECT_TRUE(line.starts_with("1,"));
}

TEST(Checkpoint, RoundTripAndCorruption) {
  RunConfig c = small_run(Objective::kMoco);
  const RunRecord rec = train(c);
  const auto bytes = encode_checkpoint(rec.final_state);
  EXPECT_TRUE(decode_checkpoint(bytes) == rec.final_state);

  auto bad = bytes;
  bad[0] ^= 0xff;
  EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
  EXPECT_THROW(decode_checkpoint({bytes.begin(), bytes.begin() + 30}), CheckpointError);
  EXPECT_THROW(decode_checkpoint({bytes.begin(), bytes.end() - 8}), CheckpointError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
  EXPECT_THROW(load_checkpoint(temp_dir("nothing") / "x.bin"), CheckpointError);
}

TEST(Extract, DeterministicAndCsvRoundTrip) {
  RunConfig c = small_run(Objective::kSimClr);
  const SurveyManifest data = load_dataset(c.dataset);
  const RunRecord rec = train(c, data);
  const LatentTable a = extract_latents(rec.final_state, data);
  const LatentTable b = extract_latents(rec.final_state, data);
  EXPECT_TRUE(a == b);
  EXPECT_EQ(a.rows(), data.size());
  EXPECT_EQ(a.dim, 16u);
  const fs::path dir = temp_dir("latents");
  fs::create_directories(dir);
  write_latents_csv(a, dir / "latents.csv");
  EXPECT_TRUE(read_latents_csv(dir / "latents.csv") == a);
}

TEST(Extract, ChannelMismatchRejected) {
  RunConfig c = small_run(Objective::kSimClr);
  const RunRecord rec = train(c);
  GeneratorConfig g = small_survey(8);
  g.channels = 1;
  g.textures.clear();
  EXPECT_THROW(extract_latents(rec.final_state, generate_survey(g, 1)), std::exception);
}

TEST(Config, UnknownKeyAndBadValuesRejected) {
  nlohmann::json j = small_run(Objective::kSimClr);
  j["epochz"] = 3;
  EXPECT_THROW(j.get<RunConfig>(), ConfigError);

  const SurveyManifest data = generate_survey(small_survey(64), 7);
  RunConfig c = small_run(Objective::kSimClr);
  c.batch_size = 128;
  EXPECT_THROW(resolve(c, data), ConfigError);
  c = small_run(Objective::kSimClr);
  c.sampler = SamplerConfig{SamplerMode::kGeo, std::nullopt};
  EXPECT_THROW(resolve(c, data), std::exception);
  c = small_run(Objective::kSwav);
  c.augment.n_local = 0;
  EXPECT_THROW(resolve(c, data), std::exception);
  EXPECT_THROW(parse_objective("byol"), ConfigError);
}

TEST(Config, ResolvedDefaultsAndJsonRoundTrip) {
  const SurveyManifest data = generate_survey(small_survey(64), 7);
  const RunConfig r = resolve(small_run(Objective::kDeepCluster), data);
  EXPECT_DOUBLE_EQ(*r.optimizer.lr, 0.03 * 16.0 / 64.0);
  EXPECT_EQ(r.loss.n_clusters, 12u);
  EXPECT_EQ(r.encoder.n_prototypes, 12u);
  const RunConfig back = nlohmann::json(r).get<RunConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(r));
}

TEST(Naming, MethodNames) {
  EXPECT_EQ(method_name(Objective::kSimClr, SamplerMode::kGeo), "GeoCLR");
  EXPECT_EQ(method_name(Objective::kSimClr, SamplerMode::kStandard), "SimCLR");
  EXPECT_EQ(method_name(Objective::kDino, SamplerMode::kGeo), "GeoDINO");
  EXPECT_EQ(method_name(Objective::kMoco, SamplerMode::kStandard), "MoCo");
}

TEST(Experiment, RowCountAndFailures) {
  ExperimentMatrix m;
  m.dataset.generator = small_survey(64);
  m.dataset.generator_seed = 7;
  m.objectives = {Objective::kSimClr, Objective::kSimSiam};
  m.modes = {SamplerMode::kStandard, SamplerMode::kGeo};
  m.dims = {16};
  m.seeds = {0};
  m.r_loc = 5.0;
  m.baseline = true;
  RunConfig base = small_run(Objective::kSimClr);
  base.dataset = {};
  m.base = base;
  m.base.erase("out_dir");
  m.eval.probe.epochs = 50;
  std::ostringstream log;
  const fs::path out = temp_dir("matrix");
  const ExperimentResult res = run_experiment(m, out, log);
  ASSERT_EQ(res.rows.size(), 1u + 2u * 2u);
  EXPECT_FALSE(res.any_failed) << log.str();
  EXPECT_EQ(res.rows[0].method, "untrained");
  EXPECT_EQ(res.rows[2].method, "GeoCLR");
  const std::string csv = slurp(out / "comparison.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
  EXPECT_EQ(csv, format_rows_csv(res.rows));

  // A geo cell without a radius fails; the rest of the matrix still runs.
  m.r_loc.reset();
  m.baseline = false;
  const ExperimentResult broken = run_experiment(m, temp_dir("matrix_fail"), log);
  ASSERT_EQ(broken.rows.size(), 4u);
  EXPECT_TRUE(broken.any_failed);
  EXPECT_FALSE(broken.rows[0].failed);
  EXPECT_TRUE(broken.rows[1].failed);
  EXPECT_NE(format_rows_csv(broken.rows).find("FAILED"), std::string::npos);
}
