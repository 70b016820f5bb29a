#include "jrs/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "jrs/evalkit.hpp"
#include "jrs/trainer.hpp"

namespace jrs {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Clock {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); }
};

void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("failed writing " + path.string());
  }
  fs::rename(tmp, path);
}

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  json config = json::object();
  json inputs = json::object();
  json outputs = json::array();
  std::uint64_t seed = 0;

  void write(const fs::path& path, double runtime_s) const {
    json j;
    j["command"] = command;
    j["argv"] = argv;
    j["config"] = config;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["seed"] = seed;
    j["tool_version"] = std::string(kToolVersion);
    j["runtime_s"] = runtime_s;
    write_atomic(path, j.dump(2) + "\n");
  }
};

json config_json(const TrainConfig& cfg) {
  json j = json::object();
  for (const auto& [k, v] : cfg.to_map()) j[k] = v;
  return j;
}

// --- synth ----------------------------------------------------------------------------

struct SynthArgs {
  fs::path out;
  std::uint64_t first_seed = 0;
  int count = 1;
  int size = 64;
  double amplitude = 5.0;
  double noise = 0.02;
};

void cmd_synth(const SynthArgs& a, Manifest m) {
  Clock clock;
  fs::create_directories(a.out);
  for (int i = 0; i < a.count; ++i) {
    PhantomSpec spec;
    spec.seed = a.first_seed + static_cast<std::uint64_t>(i);
    spec.dims = {a.size, a.size, a.size};
    spec.amplitude_mm = a.amplitude;
    spec.noise_std = a.noise;
    const PhantomPair p = make_phantom_pair(spec);
    const fs::path dir = a.out / ("case_" + std::to_string(spec.seed));
    fs::create_directories(dir);
    save_volume(p.fixed, dir / "fixed.mhd");
    save_segmentation(p.fixed_seg, dir / "fixed_seg.mhd");
    save_volume(p.moving, dir / "moving.mhd");
    save_segmentation(p.moving_seg, dir / "moving_seg.mhd");
    save_dvf(p.gt_dvf, dir / "gt_dvf.mhd");
    m.outputs.push_back(dir.filename().string());
  }
  m.seed = a.first_seed;
  m.config = {{"count", a.count}, {"size", a.size}, {"amplitude_mm", a.amplitude}, {"noise_std", a.noise}};
  m.write(a.out / "manifest.json", clock.seconds());
}

// --- train ----------------------------------------------------------------------------

struct TrainArgs {
  fs::path config, data, out, resume;
  int ckpt_every = 500;
  std::vector<std::string> overrides;
  bool quiet = false;
};

void cmd_train(const TrainArgs& a, Manifest m) {
  Clock clock;
  // precedence: --set > config file > checkpoint (when resuming) > defaults
  TrainConfig cfg;
  if (!a.resume.empty()) cfg = checkpoint_config(a.resume);
  if (!a.config.empty()) cfg.apply_file(a.config);
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  if (a.ckpt_every < 1) throw Error("--ckpt-every must be >= 1");

  Trainer trainer(cfg, load_cases(a.data));
  fs::create_directories(a.out);
  trainer.set_diagnostic_dir(a.out);
  if (!a.resume.empty()) trainer.load_checkpoint(a.resume);
  write_atomic(a.out / "config.txt", cfg.to_text());

  std::ofstream log(a.out / "train_log.jsonl", a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw Error("cannot write " + (a.out / "train_log.jsonl").string());
  trainer.run([&](const IterationLog& r) {
    json j = {{"iter", r.iter},
              {"critic_steps", r.critic_steps},
              {"critic_loss", r.critic_loss},
              {"max_abs_critic", r.max_abs_critic},
              {"sim_ncc", r.gen.sim_ncc},
              {"sim_dsc", r.gen.sim_dsc},
              {"smooth", r.gen.smooth},
              {"adv", r.gen.adv},
              {"total", r.gen.total},
              {"seconds", r.seconds}};
    log << j.dump() << '\n' << std::flush;
    if (r.iter % a.ckpt_every == 0) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_%06d.ckpt", r.iter);
      trainer.save_checkpoint(a.out / name);
    }
    if (!a.quiet && (r.iter % 25 == 0 || r.iter == cfg.total_gen_iters))
      std::fprintf(stderr, "iter %d  ncc %.4f  dsc %.4f  smooth %.4f  adv %.4f  critic %.4f\n", r.iter, r.gen.sim_ncc,
                   r.gen.sim_dsc, r.gen.smooth, r.gen.adv, r.critic_loss);
  });
  trainer.save_checkpoint(a.out / "final.ckpt");

  m.config = config_json(cfg);
  m.seed = cfg.seed;
  m.inputs = {{"data", a.data.string()}};
  if (!a.config.empty()) m.inputs["config"] = a.config.string();
  if (!a.resume.empty()) m.inputs["resume"] = a.resume.string();
  m.outputs = {"final.ckpt", "train_log.jsonl", "config.txt"};
  m.write(a.out / "manifest.json", clock.seconds());
}

// --- propagate ------------------------------------------------------------------------

struct PropagateArgs {
  fs::path ckpt, fixed, moving, moving_seg, out;
  bool train_bn = false;
};

void cmd_propagate(const PropagateArgs& a, Manifest m) {
  TrainConfig cfg;
  auto g = load_generator(a.ckpt, &cfg);
  const Volume fixed = load_volume(a.fixed), moving = load_volume(a.moving);
  const Segmentation moving_seg = load_segmentation(a.moving_seg);
  Clock clock;  // inference only, as in the runtime figures
  Case c = preprocess_case("case", fixed, Segmentation(fixed.dims, fixed.spacing, fixed.origin), moving, moving_seg);
  const Propagation r = propagate(*g, c.fixed, c.moving, c.moving_seg, a.train_bn ? Mode::kTrain : Mode::kInference);
  // warp the original intensities on the 1 mm grid
  Volume moving_mm = moving.spacing == Vec3{1.0, 1.0, 1.0} ? moving : resample_isotropic(moving, 1.0);
  const Volume warped = warp_trilinear(moving_mm, r.dvf);
  const double runtime = clock.seconds();

  fs::create_directories(a.out);
  save_dvf(r.dvf, a.out / "dvf.mhd");
  save_volume(warped, a.out / "warped.mhd");
  save_segmentation(r.warped_seg, a.out / "warped_seg.mhd");
  write_heatmap(c.fixed, r.warped, c.fixed.dims.z / 2, a.out / "heatmap.pgm");

  m.config = config_json(cfg);
  m.seed = cfg.seed;
  m.inputs = {{"ckpt", a.ckpt.string()},
              {"fixed", a.fixed.string()},
              {"moving", a.moving.string()},
              {"moving_seg", a.moving_seg.string()}};
  m.outputs = {"dvf.mhd", "warped.mhd", "warped_seg.mhd", "heatmap.pgm"};
  m.write(a.out / "manifest.json", runtime);
}

// --- evaluate -------------------------------------------------------------------------

struct EvaluateArgs {
  fs::path pred, ref, out;
  std::string pred_name = "warped_seg.mhd";
  std::string ref_name = "fixed_seg.mhd";
};

// Case directories under `root` holding `file`; `root` itself counts as one case.
std::vector<std::pair<std::string, fs::path>> case_dirs(const fs::path& root, const std::string& file) {
  if (!fs::is_directory(root)) throw Error("not a directory: " + root.string());
  std::vector<std::pair<std::string, fs::path>> out;
  if (fs::exists(root / file)) {
    out.emplace_back(root.filename().string(), root);
    return out;
  }
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / file)) out.emplace_back(e.path().filename().string(), e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw Error("no " + file + " found under " + root.string());
  return out;
}

void cmd_evaluate(const EvaluateArgs& a, Manifest m) {
  Clock clock;
  const auto preds = case_dirs(a.pred, a.pred_name);
  const auto refs = case_dirs(a.ref, a.ref_name);
  std::map<std::string, fs::path> ref_by_id(refs.begin(), refs.end());
  const bool single = preds.size() == 1 && refs.size() == 1;

  std::vector<CaseResult> results;
  for (const auto& [id, dir] : preds) {
    fs::path ref_dir;
    if (single) ref_dir = refs.front().second;
    else if (auto it = ref_by_id.find(id); it != ref_by_id.end()) ref_dir = it->second;
    else throw Error("no reference for case " + id + " under " + a.ref.string());
    const Segmentation pred = load_segmentation(dir / a.pred_name);
    Segmentation ref = load_segmentation(ref_dir / a.ref_name);
    DVF dvf;
    const bool has_dvf = fs::exists(dir / "dvf.mhd");
    if (has_dvf) dvf = load_dvf(dir / "dvf.mhd");
    double runtime = 0.0;
    if (fs::exists(dir / "manifest.json")) {
      std::ifstream in(dir / "manifest.json");
      const json j = json::parse(in, nullptr, false);
      if (!j.is_discarded() && j.contains("runtime_s")) runtime = j["runtime_s"].get<double>();
    }
    results.push_back(evaluate_case(id, pred, ref, has_dvf ? &dvf : nullptr, runtime));
  }
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  write_results_csv(results, a.out);

  m.inputs = {{"pred", a.pred.string()}, {"ref", a.ref.string()}};
  m.config = {{"pred_name", a.pred_name}, {"ref_name", a.ref_name}};
  m.outputs = {a.out.filename().string()};
  fs::path mpath = a.out;
  mpath.replace_extension(".manifest.json");
  m.write(mpath, clock.seconds());
}

// --- report ---------------------------------------------------------------------------

struct ReportArgs {
  std::vector<fs::path> inputs;
  std::vector<std::string> names, baselines;
  fs::path out;
};

void cmd_report(const ReportArgs& a, Manifest m) {
  Clock clock;
  if (!a.names.empty() && a.names.size() != a.inputs.size()) throw Error("--names must match the number of --in files");
  std::vector<MethodResults> methods;
  for (std::size_t i = 0; i < a.inputs.size(); ++i)
    methods.push_back({a.names.empty() ? a.inputs[i].stem().string() : a.names[i], read_results_csv(a.inputs[i])});
  const ReportTables t = report_tables(methods, a.baselines);
  fs::create_directories(a.out);
  write_atomic(a.out / "tables.txt", t.text);
  write_atomic(a.out / "tables.csv", t.csv);
  m.outputs = {"tables.txt", "tables.csv"};
  for (const auto& p : emit_plots(methods, a.out / "plots")) m.outputs.push_back("plots/" + p.filename().string());
  json ins = json::array();
  for (const auto& p : a.inputs) ins.push_back(p.string());
  m.inputs = {{"in", ins}};
  m.config = {{"baselines", a.baselines}};
  m.write(a.out / "manifest.json", clock.seconds());
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Joint registration and segmentation with adversarial training"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write seeded phantom cases");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--seed", sa.first_seed, "First phantom seed");
  synth->add_option("--count", sa.count, "Number of cases")->check(CLI::PositiveNumber);
  synth->add_option("--size", sa.size, "Grid size (voxels per axis)")->check(CLI::Range(16, 512));
  synth->add_option("--amplitude", sa.amplitude, "Max ground-truth displacement (mm)")->check(CLI::NonNegativeNumber);
  synth->add_option("--noise", sa.noise, "Additive noise std")->check(CLI::NonNegativeNumber);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train the generator and critic");
  train->add_option("--config", ta.config, "key = value config file")->check(CLI::ExistingFile);
  train->add_option("--data", ta.data, "Directory of case_* folders")->required();
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_option("--resume", ta.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--ckpt-every", ta.ckpt_every, "Checkpoint period (generator iterations)");
  train->add_option("--set", ta.overrides, "Config override key=value (repeatable)");
  train->add_flag("--quiet", ta.quiet, "No progress lines");

  PropagateArgs pa;
  auto* prop = app.add_subcommand("propagate", "Register a pair and propagate contours");
  prop->add_option("--ckpt", pa.ckpt, "Trained checkpoint")->required();
  prop->add_option("--fixed", pa.fixed, "Fixed image (.mhd)")->required();
  prop->add_option("--moving", pa.moving, "Moving image (.mhd)")->required();
  prop->add_option("--moving-seg", pa.moving_seg, "Moving contours (.mhd)")->required();
  prop->add_option("--out", pa.out, "Output directory")->required();
  prop->add_flag("--train-bn", pa.train_bn, "Use batch statistics instead of running statistics");

  EvaluateArgs ea;
  auto* eval = app.add_subcommand("evaluate", "Score propagated contours against references");
  eval->add_option("--pred", ea.pred, "Prediction directory (or directory of case folders)")->required();
  eval->add_option("--ref", ea.ref, "Reference directory (or directory of case folders)")->required();
  eval->add_option("--out", ea.out, "Results CSV")->required();
  eval->add_option("--pred-name", ea.pred_name, "Prediction file inside each case folder");
  eval->add_option("--ref-name", ea.ref_name, "Reference file inside each case folder");

  ReportArgs ra;
  auto* report = app.add_subcommand("report", "Tables and plots from result CSVs");
  report->add_option("--in", ra.inputs, "Result CSVs, one per method")->required()->check(CLI::ExistingFile);
  report->add_option("--names", ra.names, "Method names (default: CSV file stems)");
  report->add_option("--baselines", ra.baselines, "Methods to test against (up to 4)");
  report->add_option("--out", ra.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  Manifest m;
  m.command = app.get_subcommands().front()->get_name();
  for (int i = 0; i < argc; ++i) m.argv.emplace_back(argv[i]);
  try {
    if (*synth) cmd_synth(sa, m);
    else if (*train) cmd_train(ta, m);
    else if (*prop) cmd_propagate(pa, m);
    else if (*eval) cmd_evaluate(ea, m);
    else if (*report) cmd_report(ra, m);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace jrs
