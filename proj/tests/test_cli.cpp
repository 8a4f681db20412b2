#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dsfpn/dsfpn.hpp"
#include "support/fixtures.hpp"

using namespace dsfpn;
using dsfpn::testing::micro_config;
using dsfpn::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int status = -1;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string("\"") + DSFPN_CLI_PATH + "\" " + args + " 2>/dev/null";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf;
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) r.out.append(buf.data(), n);
  r.status = pclose(pipe);
  return r;
}

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::size_t count_ext(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  return out;
}

}  // namespace

TEST(Cli, SynthWritesImagesAndAnnotations) {
  TempDir dir("cli_synth");
  ASSERT_EQ(cli("synth --n 10 --seed 3 --out " + dir.str("a")).status, 0);
  EXPECT_EQ(count_ext(dir.path() / "a", ".ppm"), 10u);
  EXPECT_EQ(count_ext(dir.path() / "a", ".json"), 1u);
  EXPECT_EQ(coco_read(dir.str("a/annotations.json")).samples.size(), 10u);

  ASSERT_EQ(cli("synth --n 10 --seed 3 --out " + dir.str("b")).status, 0);
  for (const auto& e : fs::directory_iterator(dir.path() / "a")) {
    EXPECT_EQ(slurp(e.path()), slurp(dir.path() / "b" / e.path().filename())) << e.path();
  }
}

TEST(Cli, BadArgumentsExitNonzero) {
  TempDir dir("cli_bad");
  EXPECT_NE(cli("synth --n 0 --out " + dir.str("x")).status, 0);
  EXPECT_NE(cli("synth --out " + dir.str("x")).status, 0);
  EXPECT_NE(cli("frobnicate").status, 0);
  EXPECT_NE(cli("eval --data " + dir.str("missing.json")).status, 0);
  std::ofstream(dir.str("cfg.json")) << R"({"model":{"bogus":1}})";
  std::ofstream(dir.str("data.json")) << R"({"images":[],"annotations":[],"categories":[]})";
  EXPECT_NE(cli("train --config " + dir.str("cfg.json") + " --data " + dir.str("data.json") + " --out " + dir.str("r")).status,
            0);
}

TEST(Cli, EvalOfPerfectDetectionsIsOne) {
  TempDir dir("cli_eval");
  ASSERT_EQ(cli("synth --n 6 --seed 4 --out " + dir.str("d")).status, 0);
  const auto ds = coco_read(dir.str("d/annotations.json"), false);
  std::vector<const Sample*> samples;
  for (const auto& s : ds.samples) samples.push_back(&s);
  std::vector<EvalDetection> dets;
  for (const auto& g : ground_truth_of(samples)) dets.push_back({g.image_id, g.category, g.box, 1.0, {}});
  std::ofstream(dir.str("dets.json")) << detections_to_json(dets, ds).dump();
  const auto r = cli("eval --detections " + dir.str("dets.json") + " --data " + dir.str("d/annotations.json"));
  ASSERT_EQ(r.status, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_DOUBLE_EQ(j["bbox"]["AP"].get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(j["bbox"]["AP50"].get<double>(), 1.0);
}

TEST(Cli, InferOnBlankImageWithBackgroundModelIsEmpty) {
  TempDir dir("cli_infer");
  const auto cfg = micro_config(false, false, false);
  auto params = init_params<float>(cfg, 0);
  for (auto& [name, t] : params) {
    if (name.ends_with(".cls.bias")) t.mutable_data()[0] = 20.0f;  // background wins everywhere
  }
  write_checkpoint(dir.str("m"), cfg, params);
  write_ppm(Image(32, 32), dir.str("blank.ppm"));
  const auto r = cli("infer --checkpoint " + dir.str("m.json") + " --image " + dir.str("blank.ppm"));
  ASSERT_EQ(r.status, 0);
  EXPECT_EQ(nlohmann::json::parse(r.out), nlohmann::json::array());

  write_ppm(Image(16, 16), dir.str("small.ppm"));
  EXPECT_NE(cli("infer --checkpoint " + dir.str("m.json") + " --image " + dir.str("small.ppm")).status, 0);
}

TEST(Cli, TrainThenEvalReproducesLoggedAp) {
  TempDir dir("cli_train");
  ASSERT_EQ(cli("synth --n 8 --size 32 --seed 5 --out " + dir.str("train")).status, 0);
  ASSERT_EQ(cli("synth --n 4 --size 32 --seed 6 --out " + dir.str("val")).status, 0);
  ExperimentConfig cfg;
  cfg.model = micro_config(true, true, false);
  cfg.train.iterations = 6;
  cfg.train.eval_interval = 3;
  cfg.train.roi_batch = 8;
  cfg.train.train_eval_subsample = 4;
  std::ofstream(dir.str("cfg.json")) << to_json(cfg).dump(2);
  const auto t = cli("train --config " + dir.str("cfg.json") + " --data " + dir.str("train/annotations.json") + " --val " +
                     dir.str("val/annotations.json") + " --out " + dir.str("run"));
  ASSERT_EQ(t.status, 0);
  for (auto f : {"config.json", "manifest.json", "train_log.csv", "final.json", "final.bin", "best.json"}) {
    EXPECT_TRUE(fs::exists(dir.path() / "run" / f)) << f;
  }

  std::ifstream log(dir.str("run/train_log.csv"));
  std::string header, line, last;
  std::getline(log, header);
  while (std::getline(log, line)) last = line;
  const auto cols = split(header), cells = split(last);
  const auto col = [&](const std::string& name) {
    return std::stod(cells[std::find(cols.begin(), cols.end(), name) - cols.begin()]);
  };

  const auto e = cli("eval --checkpoint " + dir.str("run/final.json") + " --data " + dir.str("val/annotations.json"));
  ASSERT_EQ(e.status, 0);
  const auto j = nlohmann::json::parse(e.out);
  EXPECT_NEAR(j["bbox"]["AP50"].get<double>(), col("val_ap50"), 1e-9);
  EXPECT_NEAR(j["bbox"]["AP"].get<double>(), col("val_ap"), 1e-9);

  const auto x = cli("export-features --checkpoint " + dir.str("run/final.json") + " --image " +
                     (dir.path() / "val" / coco_read(dir.str("val/annotations.json"), false).samples[0].file_name).string() +
                     " --out " + dir.str("maps/f"));
  ASSERT_EQ(x.status, 0);
  EXPECT_EQ(count_ext(dir.path() / "maps", ".pgm"), 6u);
}

TEST(Cli, ProbeReportsBackboneRatios) {
  TempDir dir("cli_probe");
  ExperimentConfig cfg;
  cfg.model = micro_config(false, false, false);
  cfg.train.roi_batch = 8;
  std::ofstream(dir.str("cfg.json")) << to_json(cfg).dump();
  const auto r = cli("probe --config " + dir.str("cfg.json") + " --n 2");
  ASSERT_EQ(r.status, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_TRUE(j["backbone_ratio_on_over_off"].contains("backbone.stage0.conv1"));
  EXPECT_EQ(j["ds_on"]["batches"], 2);
}
