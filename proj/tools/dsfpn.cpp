// Command-line driver: dataset synthesis, training, evaluation, inference, probing, feature export, ablations.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dsfpn/dsfpn.hpp"

namespace fs = std::filesystem;
using namespace dsfpn;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << text;
  if (!os) throw std::runtime_error("failed writing '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string content_hash(const std::vector<std::string>& parts) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : parts) {
    for (unsigned char c : p) h = (h ^ c) * 1099511628211ull;
    h = (h ^ 0xff) * 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// Flags that override the loaded experiment config.
struct Overrides {
  std::optional<std::size_t> iterations, stages, aux_box_source, eval_interval;
  std::optional<std::uint64_t> seed;
  std::optional<bool> ds, dc, masks;

  void add_to(CLI::App* app) {
    app->add_option("--iterations", iterations, "Training iterations");
    app->add_option("--seed", seed, "Random seed");
    app->add_option("--eval-interval", eval_interval, "Iterations between evaluations");
    app->add_option("--stages", stages, "Detection stages (1 or 3)");
    app->add_option("--aux-box-source", aux_box_source, "Stage whose boxes feed the auxiliary heads");
    app->add_option("--ds", ds, "Dual supervision on/off");
    app->add_option("--dc", dc, "Decoupled heads on/off");
    app->add_option("--masks", masks, "Mask branch on/off");
  }

  void apply(ExperimentConfig& c) const {
    if (iterations) c.train.iterations = *iterations;
    if (seed) c.train.seed = *seed;
    if (eval_interval) c.train.eval_interval = *eval_interval;
    if (stages) c.model.num_stages = *stages;
    if (aux_box_source) c.model.aux_box_source = *aux_box_source;
    if (ds) c.model.ds_enabled = *ds;
    if (dc) c.model.dc_enabled = *dc;
    if (masks) c.model.with_masks = *masks;
    detail::validate_section(c.model, "model");
    detail::validate_section(c.train, "train");
  }
};

ExperimentConfig load_config(const std::string& path, const Overrides& o) {
  ExperimentConfig c = path.empty() ? ExperimentConfig{} : load_experiment(path);
  o.apply(c);
  return c;
}

void check_dataset_matches(const Dataset& ds, const ModelConfig& cfg) {
  if (ds.categories.size() != cfg.num_classes) {
    throw std::runtime_error("dataset has " + std::to_string(ds.categories.size()) + " categories but the model expects " +
                             std::to_string(cfg.num_classes));
  }
  for (const auto& s : ds.samples) {
    if (s.image.height != cfg.image_size || s.image.width != cfg.image_size) {
      throw std::runtime_error("image '" + s.file_name + "' is not " + std::to_string(cfg.image_size) + "x" +
                               std::to_string(cfg.image_size));
    }
  }
}

std::vector<const Sample*> all_samples(const Dataset& ds) {
  std::vector<const Sample*> out;
  for (const auto& s : ds.samples) out.push_back(&s);
  return out;
}

const CLI::Validator kPositive(
    [](std::string& v) -> std::string {
      try {
        std::size_t pos = 0;
        if (std::stoll(v, &pos) > 0 && pos == v.size()) return {};
      } catch (const std::exception&) {
      }
      return "must be a positive integer, got '" + v + "'";
    },
    "POSITIVE");

// ---- commands ----

struct SynthArgs {
  std::size_t n = 0, size = 64, classes = 3;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  const auto ds = synth_generate(a.n, a.size, a.classes, a.seed);
  coco_write(ds, a.out);
  std::cerr << "wrote " << ds.samples.size() << " images to " << a.out << '\n';
  return 0;
}

struct TrainArgs {
  std::string config, data, val, out;
  Overrides overrides;
};

int cmd_train(const TrainArgs& a) {
  const auto cfg = load_config(a.config, a.overrides);
  const auto train_ds = coco_read(a.data);
  check_dataset_matches(train_ds, cfg.model);
  std::optional<Dataset> val_ds;
  if (!a.val.empty()) {
    val_ds = coco_read(a.val);
    check_dataset_matches(*val_ds, cfg.model);
  }
  const fs::path out = a.out;
  fs::create_directories(out);
  const auto config_json = to_json(cfg);
  write_text(out / "config.json", config_json.dump(2) + "\n");
  nlohmann::json manifest{{"command", "train"},
                          {"config", config_json},
                          {"seed", cfg.train.seed},
                          {"data", a.data},
                          {"val", a.val},
                          {"content_hash", content_hash({config_json.dump(), read_text(a.data),
                                                         a.val.empty() ? "" : read_text(a.val)})},
                          {"artifacts",
                           {{"config", "config.json"},
                            {"log", "train_log.csv"},
                            {"final_checkpoint", "final.json"},
                            {"best_checkpoint", "best.json"}}}};
  write_text(out / "manifest.json", manifest.dump(2) + "\n");

  TrainHooks<float> hooks;
  hooks.on_row = [&](const LogRow& r) {
    if (!r.eval) return;
    std::cerr << "iter " << r.iteration << " loss " << r.total << " train AP50 " << r.eval->train.ap50;
    if (val_ds) std::cerr << " val AP50 " << r.eval->val.ap50;
    std::cerr << '\n';
  };
  hooks.on_diverged = [&](const ParamSet<float>& p) {
    write_checkpoint((out / "last_stable").string(), cfg.model, p);
    std::cerr << "wrote last stable checkpoint to " << (out / "last_stable.json").string() << '\n';
  };
  const auto result = train<float>(cfg.model, cfg.train, annotated(train_ds),
                                   val_ds ? all_samples(*val_ds) : std::vector<const Sample*>{}, hooks);
  write_text(out / "train_log.csv", log_csv(result.log));
  write_checkpoint((out / "final").string(), cfg.model, result.params);
  write_checkpoint((out / "best").string(), cfg.model, result.best);
  std::cerr << "wrote " << (out / "final.json").string() << '\n';
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, detections;
};

int cmd_eval(const EvalArgs& a) {
  if (a.checkpoint.empty() == a.detections.empty()) {
    throw CLI::ValidationError("eval", "give exactly one of --checkpoint or --detections");
  }
  const auto ds = coco_read(a.data, a.detections.empty());
  const auto samples = all_samples(ds);
  const auto gts = ground_truth_of(samples);
  EvalReport report;
  if (!a.detections.empty()) {
    const auto dets = detections_from_json(read_json_file(a.detections), ds);
    const bool masks = std::any_of(dets.begin(), dets.end(), [](const auto& d) { return !d.mask.data.empty(); });
    report = evaluate_detections(dets, gts, masks);
  } else {
    const auto [cfg, params] = read_checkpoint<float>(a.checkpoint);
    check_dataset_matches(ds, cfg);
    report = evaluate_model(samples, cfg, params);
  }
  std::cout << to_json(report).dump(2) << '\n';
  return 0;
}

struct InferArgs {
  std::string checkpoint, image;
  int image_id = 1;
};

int cmd_infer(const InferArgs& a) {
  const auto [cfg, params] = read_checkpoint<float>(a.checkpoint);
  const Image im = read_pnm(a.image);
  if (im.height != cfg.image_size || im.width != cfg.image_size) {
    throw std::runtime_error("image must be " + std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  }
  std::vector<EvalDetection> dets;
  for (auto& d : forward_infer(im, cfg, params)) dets.push_back({a.image_id, d.label, d.box, d.score, std::move(d.mask)});
  Dataset labels;
  labels.categories.resize(cfg.num_classes);
  std::cout << detections_to_json(dets, labels).dump(2) << '\n';
  return 0;
}

struct ProbeArgs {
  std::string config, data;
  std::size_t n = 20;
  Overrides overrides;
};

// Probes the config with dual supervision on and off from the same initialization and batches.
int cmd_probe(const ProbeArgs& a) {
  const auto cfg = load_config(a.config, a.overrides);
  const Dataset ds = a.data.empty() ? synth_generate(64, cfg.model.image_size, cfg.model.num_classes, cfg.train.seed + 1)
                                    : coco_read(a.data);
  check_dataset_matches(ds, cfg.model);
  const auto batches = probe_batches(annotated(ds), a.n, cfg.train.batch_size, cfg.train.seed);
  ModelConfig on = cfg.model, off = cfg.model;
  on.ds_enabled = true;
  off.ds_enabled = false;
  const auto p_on = grad_probe(on, init_params<double>(on, cfg.train.seed), batches, cfg.train.sampling(), cfg.train.seed);
  const auto p_off = grad_probe(off, init_params<double>(off, cfg.train.seed), batches, cfg.train.sampling(), cfg.train.seed);
  nlohmann::json ratios;
  for (const auto& [layer, v] : p_off.layer_norms) {
    if (layer.rfind("backbone.", 0) == 0) ratios[layer] = v > 0 ? p_on.at(layer) / v : 0.0;
  }
  std::cout << nlohmann::json{{"ds_on", to_json(p_on)}, {"ds_off", to_json(p_off)}, {"backbone_ratio_on_over_off", ratios}}
                   .dump(2)
            << '\n';
  return 0;
}

struct ExportArgs {
  std::string checkpoint, image, out;
};

int cmd_export(const ExportArgs& a) {
  const auto [cfg, params] = read_checkpoint<float>(a.checkpoint);
  const Image im = read_pnm(a.image);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  for (const auto& p : export_feature_maps(cfg, params, im, a.out)) std::cout << p << '\n';
  return 0;
}

struct AblateArgs {
  std::string which, config, data, val, out;
  std::size_t seeds = 3;
  std::optional<std::size_t> threads;
  Overrides overrides;
};

int cmd_ablate(const AblateArgs& a) {
  const auto cfg = load_config(a.config, a.overrides);
  const Dataset train_ds = a.data.empty() ? synth_generate(500, cfg.model.image_size, cfg.model.num_classes, 1001)
                                          : coco_read(a.data);
  const Dataset val_ds = a.val.empty() ? synth_generate(100, cfg.model.image_size, cfg.model.num_classes, 2002)
                                       : coco_read(a.val);
  check_dataset_matches(train_ds, cfg.model);
  check_dataset_matches(val_ds, cfg.model);
  std::vector<std::uint64_t> seeds;
  for (std::size_t s = 0; s < a.seeds; ++s) seeds.push_back(cfg.train.seed + s);

  std::vector<AblationRun> runs;
  if (a.which == "ds_dc") runs = ds_dc_runs(cfg.model, cfg.train, seeds);
  if (a.which == "box_source") runs = box_source_runs(cfg.model, cfg.train, seeds);
  if (a.which == "convergence") runs = convergence_runs(cfg.model, cfg.train, seeds);

  const fs::path out = a.out;
  fs::create_directories(out);
  const auto threads = a.threads ? *a.threads : ablation_threads();
  const auto outcomes = run_all(runs, annotated(train_ds), all_samples(val_ds), threads, [](const RunOutcome& o) {
    std::cerr << o.label << " seed " << o.seed << ": val AP50 " << o.final_val.ap50 << " (" << o.seconds << " s)\n";
  });
  for (const auto& o : outcomes) {
    std::string tag = o.label;
    for (auto& c : tag) {
      if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
    }
    write_text(out / "runs" / (a.which + "_" + tag + "_seed" + std::to_string(o.seed) + ".csv"), log_csv(o.log));
  }
  write_text(out / (a.which + "_curves.csv"), curve_csv(labelled_curves(outcomes)));

  const auto rows = summarize_runs(runs, outcomes);
  const auto csv = table_csv(rows);
  write_text(out / (a.which + ".csv"), csv);
  write_text(out / (a.which + ".md"), table_markdown(rows));
  std::cout << csv;
  if (a.which == "convergence") {
    const auto summary = convergence_summary(outcomes);
    write_text(out / "convergence_iterations.csv", convergence_csv(summary));
    std::cout << convergence_csv(summary);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature pyramid detector with dual supervision: data, training, evaluation and ablations"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic shapes dataset (PPM images + COCO JSON)");
  s->add_option("--n", synth.n, "Number of images")->required()->check(kPositive);
  s->add_option("--size", synth.size, "Image side in pixels")->check(kPositive);
  s->add_option("--classes", synth.classes, "Number of shape classes (1-3)")->check(CLI::Range(1, 3));
  s->add_option("--seed", synth.seed, "Random seed");
  s->add_option("--out", synth.out, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a detector");
  t->add_option("--config", tr.config, "Experiment config JSON (defaults when omitted)");
  t->add_option("--data", tr.data, "Training annotations JSON")->required()->check(CLI::ExistingFile);
  t->add_option("--val", tr.val, "Validation annotations JSON")->check(CLI::ExistingFile);
  t->add_option("--out", tr.out, "Run directory")->required();
  tr.overrides.add_to(t);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Print box (and mask) AP as JSON");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint manifest")->check(CLI::ExistingFile);
  e->add_option("--detections", ev.detections, "Detections JSON to score instead of running a model")
      ->check(CLI::ExistingFile);
  e->add_option("--data", ev.data, "Ground-truth annotations JSON")->required()->check(CLI::ExistingFile);

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "Detect objects in one image; prints detections JSON");
  i->add_option("--checkpoint", inf.checkpoint, "Checkpoint manifest")->required()->check(CLI::ExistingFile);
  i->add_option("--image", inf.image, "PPM/PGM image")->required()->check(CLI::ExistingFile);
  i->add_option("--image-id", inf.image_id, "image_id written into the results");

  ProbeArgs pr;
  auto* p = app.add_subcommand("probe", "Per-layer gradient norms with dual supervision on and off");
  p->add_option("--config", pr.config, "Experiment config JSON")->check(CLI::ExistingFile);
  p->add_option("--n", pr.n, "Number of batches")->check(kPositive);
  p->add_option("--data", pr.data, "Annotations JSON (synthetic data when omitted)")->check(CLI::ExistingFile);
  pr.overrides.add_to(p);

  ExportArgs ex;
  auto* x = app.add_subcommand("export-features", "Write channel-summed pyramid maps as PGM images");
  x->add_option("--checkpoint", ex.checkpoint, "Checkpoint manifest")->required()->check(CLI::ExistingFile);
  x->add_option("--image", ex.image, "PPM/PGM image")->required()->check(CLI::ExistingFile);
  x->add_option("--out", ex.out, "Output path prefix")->required();

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "Run an ablation sweep and write CSV/markdown tables");
  a->add_option("--which", ab.which, "ds_dc | box_source | convergence")
      ->required()
      ->check(CLI::IsMember({"ds_dc", "box_source", "convergence"}));
  a->add_option("--seeds", ab.seeds, "Seeds per configuration")->check(kPositive);
  a->add_option("--out", ab.out, "Output directory")->required();
  a->add_option("--config", ab.config, "Base experiment config JSON")->check(CLI::ExistingFile);
  a->add_option("--data", ab.data, "Training annotations (500 synthetic images when omitted)")->check(CLI::ExistingFile);
  a->add_option("--val", ab.val, "Validation annotations (100 synthetic images when omitted)")->check(CLI::ExistingFile);
  a->add_option("--threads", ab.threads, "Parallel runs (default: DSFPN_THREADS or all cores)")->check(kPositive);
  ab.overrides.add_to(a);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }
  try {
    if (s->parsed()) return cmd_synth(synth);
    if (t->parsed()) return cmd_train(tr);
    if (e->parsed()) return cmd_eval(ev);
    if (i->parsed()) return cmd_infer(inf);
    if (p->parsed()) return cmd_probe(pr);
    if (x->parsed()) return cmd_export(ex);
    if (a->parsed()) return cmd_ablate(ab);
  } catch (const CLI::Error& err) {
    app.exit(err);
    return 2;
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 0;
}
