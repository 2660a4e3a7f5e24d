#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include <gtest/gtest.h>
#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(GEOSSL_CLI_PATH) + " " + args + " 2>/dev/null";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("geossl_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

void write(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(2); }

nlohmann::json gen_config() { return {{"n_patches", 64}, {"image_size", 16}}; }

nlohmann::json run_config() {
  return {{"encoder", {{"widths", {4, 8}}, {"latent_dim", 16}, {"projector_hidden", 32}, {"predictor_hidden", 16},
                       {"n_prototypes", 8}}},
          {"augment", {{"global_size", 14}, {"local_size", 6}, {"n_local", 2}}},
          {"batch_size", 16},
          {"epochs", 1}};
}

// One survey shared by the tests below.
const fs::path& survey() {
  static const fs::path dir = [] {
    const fs::path d = temp_dir("survey");
    write(d / "gen.json", gen_config());
    run("gen-survey --config " + (d / "gen.json").string() + " --seed 7 --out " + (d / "data").string());
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Cli, GenSurveyDeterministicAndSeedSensitive) {
  const fs::path d = temp_dir("gen");
  write(d / "gen.json", gen_config());
  const std::string cfg = " --config " + (d / "gen.json").string();
  ASSERT_EQ(run("gen-survey" + cfg + " --seed 7 --out " + (d / "a").string()).code, 0);
  ASSERT_EQ(run("gen-survey" + cfg + " --seed 7 --out " + (d / "b").string()).code, 0);
  ASSERT_EQ(run("gen-survey" + cfg + " --seed 8 --out " + (d / "c").string()).code, 0);
  const auto a = tree(d / "a"), b = tree(d / "b"), c = tree(d / "c");
  EXPECT_EQ(a, b);
  EXPECT_TRUE(a.count("manifest.jsonl") && a.count("resolved_config.json"));
  EXPECT_NE(a.at("manifest.jsonl"), c.at("manifest.jsonl"));
}

TEST(Cli, MissingRequiredFlagIsUsageError) {
  EXPECT_EQ(run("gen-survey --out " + temp_dir("noconf").string()).code, 2);
  EXPECT_EQ(run("train").code, 2);
  EXPECT_EQ(run("no-such-command").code, 2);
}

TEST(Cli, GeoWithoutRadiusIsUsageError) {
  const fs::path d = temp_dir("geo");
  write(d / "run.json", run_config());
  const auto r = run("train --config " + (d / "run.json").string() + " --manifest " +
                     (survey() / "data" / "manifest.jsonl").string() + " --mode geo --out " + (d / "run").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(fs::exists(d / "run" / "ckpt_epoch_0000.bin"));
}

TEST(Cli, UnknownConfigKeyIsUsageError) {
  const fs::path d = temp_dir("badkey");
  nlohmann::json j = run_config();
  j["batchsize"] = 4;
  write(d / "run.json", j);
  EXPECT_EQ(run("train --config " + (d / "run.json").string() + " --manifest " +
                (survey() / "data" / "manifest.jsonl").string() + " --out " + (d / "run").string())
                .code,
            2);
}

TEST(Cli, TrainExtractEvalCompare) {
  const fs::path d = temp_dir("pipeline");
  write(d / "run.json", run_config());
  const std::string manifest = (survey() / "data" / "manifest.jsonl").string();
  const auto t = run("train --config " + (d / "run.json").string() + " --manifest " + manifest +
                     " --objective simclr --mode geo --r-loc 5 --seed 1 --out " + (d / "run").string());
  ASSERT_EQ(t.code, 0);
  const fs::path ckpt = d / "run" / "ckpt_epoch_0001.bin";
  EXPECT_TRUE(fs::exists(ckpt));
  EXPECT_NE(t.out.find("ckpt_epoch_0001.bin"), std::string::npos);
  EXPECT_TRUE(fs::exists(d / "run" / "loss.csv"));
  EXPECT_TRUE(fs::exists(d / "run" / "events.jsonl"));
  EXPECT_TRUE(fs::exists(d / "run" / "resolved_config.json"));

  ASSERT_EQ(run("extract --checkpoint " + ckpt.string() + " --manifest " + manifest + " --out " +
                (d / "z1.csv").string())
                .code,
            0);
  ASSERT_EQ(run("extract --checkpoint " + ckpt.string() + " --manifest " + manifest + " --out " +
                (d / "z2.csv").string())
                .code,
            0);
  EXPECT_EQ(slurp(d / "z1.csv"), slurp(d / "z2.csv"));

  const auto e = run("eval --latents " + (d / "z1.csv").string() + " --manifest " + manifest +
                     " --pca-dim 8 --out " + (d / "eval").string());
  ASSERT_EQ(e.code, 0);
  EXPECT_NE(e.out.find("macro_f1"), std::string::npos);
  EXPECT_TRUE(fs::exists(d / "eval" / "confusion.csv"));
  const auto report = d / "eval" / "report.json";
  ASSERT_EQ(run("compare --a " + report.string() + " --b " + report.string() + " --out " + (d / "delta.csv").string())
                .code,
            0);
  EXPECT_NE(slurp(d / "delta.csv").find("macro,"), std::string::npos);

  EXPECT_EQ(run("eval --latents " + (d / "missing.csv").string() + " --out " + (d / "eval2").string()).code, 1);
}

TEST(Cli, HelpListsConfigKeys) {
  const auto h = run("train --help");
  EXPECT_EQ(h.code, 0);
  for (const char* key : {"[config: objective]", "[config: sampler.mode]", "[config: sampler.r_loc]",
                          "[config: epochs]", "[config: batch_size]", "[config: seed]"})
    EXPECT_NE(h.out.find(key), std::string::npos) << key;
  EXPECT_EQ(run("--version").code, 0);
}

TEST(Cli, ExperimentRowsFailuresAndRerun) {
  const fs::path d = temp_dir("experiment");
  nlohmann::json base = run_config();
  nlohmann::json matrix = {{"dataset", {{"manifest", (survey() / "data" / "manifest.jsonl").string()}}},
                           {"objectives", {"simclr"}},
                           {"modes", {"standard", "geo"}},
                           {"dims", {16}},
                           {"seeds", {0}},
                           {"r_loc", 5.0},
                           {"baseline", true},
                           {"base", base},
                           {"eval", {{"probe", {{"epochs", 50}}}}}};
  write(d / "m.json", matrix);
  ASSERT_EQ(run("experiment --matrix " + (d / "m.json").string() + " --out " + (d / "a").string()).code, 0);
  ASSERT_EQ(run("experiment --matrix " + (d / "m.json").string() + " --out " + (d / "b").string()).code, 0);
  const std::string csv = slurp(d / "a" / "comparison.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);  // header + baseline + 2 cells
  EXPECT_EQ(csv, slurp(d / "b" / "comparison.csv"));

  matrix.erase("r_loc");
  write(d / "bad.json", matrix);
  EXPECT_EQ(run("experiment --matrix " + (d / "bad.json").string() + " --out " + (d / "c").string()).code, 1);
  EXPECT_NE(slurp(d / "c" / "comparison.csv").find("FAILED"), std::string::npos);
}
