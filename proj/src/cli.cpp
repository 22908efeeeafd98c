#include "vita/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "vita/checkpoint.hpp"
#include "vita/dataio.hpp"
#include "vita/errors.hpp"
#include "vita/eval.hpp"
#include "vita/gradsuite.hpp"
#include "vita/scenegen.hpp"
#include "vita/train.hpp"

namespace vita {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

int thread_cap() {
  const char* env = std::getenv("VITA_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("VITA_THREADS must be a positive integer, got '" + std::string(env) + "'");
  return static_cast<int>(v);
}

fs::path manifest_path(const fs::path& output) {
  fs::path p = output;
  if (!p.has_filename()) p = p.parent_path();
  return fs::path(p.string() + ".manifest.json");
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw FormatError("failed writing " + path.string());
}

struct Manifest {
  std::string command;
  Json flags = Json::object();
  std::uint64_t seed = 0;
  std::string fingerprint;
  std::vector<std::string> artifacts;
  double wall_clock_s = 0;

  void write(const fs::path& anchor) const {
    Json j;
    j["command"] = command;
    j["flags"] = flags;
    j["seed"] = seed;
    j["config_fingerprint"] = fingerprint;
    j["artifacts"] = artifacts;
    j["wall_clock_s"] = wall_clock_s;
    j["tool_version"] = kToolVersion;
    write_text(manifest_path(anchor), j.dump(2) + "\n");
  }
};

Json collect_flags(const CLI::App* sub) {
  Json j = Json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string name = opt->get_lnames().front();
    if (name == "help") continue;
    if (opt->count() > 0) {
      const auto& res = opt->results();
      if (opt->get_type_size() == 0) {
        j[name] = true;
      } else {
        j[name] = res.size() == 1 ? Json(res.front()) : Json(res);
      }
    } else {
      j[name] = opt->get_default_str();
    }
  }
  return j;
}

std::vector<double> parse_lambdas(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("invalid lambda value '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("--lambdas needs at least one value");
  return out;
}

struct GenerateArgs {
  std::string out;
  GenerateOptions gen;
};

struct TrainArgs {
  std::string data, out = "model.ckpt", log, arch = "dual", preset = "toy", init;
  int steps = 500, batch = 8, limit = 0;
  double lr = -1, lambda_a = 1.0, lambda_o = 0.25, weight_decay = 0.01;
  std::uint64_t seed = 0;
};

struct EvalArgs {
  std::string checkpoint, data, split = "val", report = "report.json", oracle;
  double thr = 0.5;
  std::uint64_t seed = 0;
  int limit = 0;
  Index side = 64;
};

struct PredictArgs {
  std::string checkpoint, image, visible, prefix;
  double thr = 0.5;
};

struct SweepArgs {
  std::string data, out = "sweep.csv", lambdas = "0,0.25,0.5";
  int steps = 500, batch = 8, limit = 16, eval_limit = 0;
  double lr = kToyLearningRate;
  std::uint64_t seed = 0;
};

struct GradArgs {
  std::string report = "gradcheck.json";
  std::uint64_t seed = 0;
  bool skip_model = false;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int do_generate(const GenerateArgs& a, const Json& flags, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  GenerateOptions g = a.gen;
  g.threads = thread_cap();
  const Dataset d = generate_dataset(g);
  write_dataset(d, a.out);
  const BinMix mix = realized_mix(d);
  out << "generated " << d.scenes.size() << " scenes, " << d.instance_count() << " instances in " << a.out
      << "\nocclusion mix low/medium/high: " << mix.low << " / " << mix.medium << " / " << mix.high << " %\n";
  Manifest m{"generate", flags, g.seed, "", {a.out}, seconds_since(t0)};
  m.write(a.out);
  return 0;
}

int do_train(const TrainArgs& a, const Json& flags, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig cfg = ModelConfig::preset(a.preset, parse_head_kind(a.arch));
  cfg.seed = a.seed;
  AmodalSegmenter<float> model(cfg);
  if (!a.init.empty()) apply_checkpoint(read_checkpoint(a.init), model);

  const Dataset d = read_dataset(a.data);
  const auto samples = build_roi_samples(d, Split::train, cfg.image_side, static_cast<std::size_t>(a.limit));

  FitOptions o;
  o.steps = a.steps;
  o.batch_size = a.batch;
  o.seed = a.seed;
  o.optimizer.lr = a.lr >= 0 ? a.lr : (a.preset == "base" ? kBaseLearningRate : kToyLearningRate);
  o.optimizer.weight_decay = a.weight_decay;
  o.loss = {a.lambda_a, cfg.head_kind == HeadKind::dual ? a.lambda_o : 0.0};
  const std::string log = a.log.empty() ? a.out + ".log.jsonl" : a.log;
  o.log_path = log;
  o.checkpoint_path = a.out;
  const FitResult r = fit(model, samples, o);
  out << "trained " << to_string(cfg.head_kind) << " head on " << samples.size() << " RoIs for " << r.log.size()
      << " steps";
  if (!r.log.empty()) out << ", final loss " << r.log.back().loss_total;
  out << "\n";
  Manifest m{"train", flags, a.seed, cfg.fingerprint(), {a.out, log}, seconds_since(t0)};
  m.write(a.out);
  return 0;
}

int do_eval(const EvalArgs& a, const Json& flags, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset d = read_dataset(a.data);
  const Split split = parse_split(a.split);
  EvalReport report;
  std::string fingerprint;
  if (!a.oracle.empty()) {
    if (a.oracle != "gt") throw ConfigError("--oracle accepts only 'gt'");
    const auto samples = build_roi_samples(d, split, a.side, static_cast<std::size_t>(a.limit));
    std::vector<BinaryPrediction> preds;
    for (const auto& s : samples) preds.push_back({s.amodal, s.occluded});
    report = score_predictions(samples, preds);
    report.config_fingerprint = "oracle:gt";
  } else {
    if (a.checkpoint.empty()) throw ConfigError("eval needs --checkpoint (or --oracle gt)");
    AmodalSegmenter<float> model = load_checkpoint(a.checkpoint);
    const auto samples = build_roi_samples(d, split, model.config().image_side, static_cast<std::size_t>(a.limit));
    EvalOptions eo;
    eo.threshold = a.thr;
    eo.seed = a.seed;
    report = evaluate(model, samples, eo);
  }
  fingerprint = report.config_fingerprint;
  write_text(a.report, report.to_json() + "\n");
  out << "n=" << report.n_samples << " mIoU_A=" << report.miou_a << " mIoU_V=" << report.miou_v
      << " mIoU_O=" << report.miou_o << " t_inf=" << report.t_inf_ms << " +- " << report.t_inf_std_ms << " ms\n";
  Manifest m{"eval", flags, a.seed, fingerprint, {a.report}, seconds_since(t0)};
  m.write(a.report);
  return 0;
}

int do_predict(const PredictArgs& a, const Json& flags, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  AmodalSegmenter<float> model = load_checkpoint(a.checkpoint);
  SceneSample scene;
  scene.scene_id = fs::path(a.image).stem().string();
  scene.image = read_ppm(a.image);
  InstanceRecord inst;
  inst.visible = read_pgm(a.visible);
  if (inst.visible.cols() != scene.image.width || inst.visible.rows() != scene.image.height) {
    throw ContractError("visible mask size does not match the image");
  }
  inst.bbox = bounding_box(inst.visible);
  RoISample s;
  s.roi = extract_roi(scene, inst, model.config().image_side);

  NoGradGuard guard;
  const std::size_t zero = 0;
  const Prediction<float> p = model.forward(input_batch(std::span(&s, 1), std::span(&zero, 1)), Mode::eval);
  const Index W = scene.image.width, H = scene.image.height;
  const Mask amodal = paste_back(tensor_plane(p.amodal, 0), s.roi, a.thr, W, H);
  const Mask occluded = p.has_occluded()
                            ? paste_back(tensor_plane(p.occluded, 0), s.roi, a.thr, W, H)
                            : Mask(((amodal != 0) && (inst.visible == 0)).cast<std::uint8_t>());
  const std::string pa = a.prefix + "_amodal.pgm", po = a.prefix + "_occluded.pgm";
  if (fs::path(pa).has_parent_path()) fs::create_directories(fs::path(pa).parent_path());
  write_pgm(pa, amodal);
  write_pgm(po, occluded);
  out << "wrote " << pa << " (" << area(amodal) << " px) and " << po << " (" << area(occluded) << " px)\n";
  Manifest m{"predict", flags, model.config().seed, model.config().fingerprint(), {pa, po}, seconds_since(t0)};
  m.write(a.prefix);
  return 0;
}

int do_sweep(const SweepArgs& a, const Json& flags, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset d = read_dataset(a.data);
  ModelConfig cfg = ModelConfig::toy(HeadKind::dual);
  cfg.seed = a.seed;
  const auto train = build_roi_samples(d, Split::train, cfg.image_side, static_cast<std::size_t>(a.limit));
  const auto val = build_roi_samples(d, Split::val, cfg.image_side, static_cast<std::size_t>(a.eval_limit));
  FitOptions o;
  o.steps = a.steps;
  o.batch_size = a.batch;
  o.seed = a.seed;
  o.optimizer.lr = a.lr;
  const auto rows = lambda_sweep([&] { return AmodalSegmenter<float>(cfg); }, train, val, parse_lambdas(a.lambdas), o);
  const std::string csv = sweep_csv(rows);
  write_text(a.out, csv);
  out << csv;
  Manifest m{"sweep", flags, a.seed, cfg.fingerprint(), {a.out}, seconds_since(t0)};
  m.write(a.out);
  return 0;
}

int do_gradcheck(const GradArgs& a, const Json& flags, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const GradCheckOptions opts;
  const auto cases = run_gradient_suite(a.seed, opts, !a.skip_model);
  out << format_gradient_table(cases, opts.tolerance);
  bool ok = true;
  Json table = Json::array();
  for (const auto& c : cases) {
    const bool pass = c.report.passed && c.report.max_rel_error < opts.tolerance;
    ok = ok && pass;
    table.push_back({{"case", c.name},
                     {"probes", c.report.entries.size()},
                     {"max_rel_error", c.report.max_rel_error},
                     {"passed", pass}});
  }
  Json j;
  j["step"] = opts.step;
  j["tolerance"] = opts.tolerance;
  j["cases"] = table;
  j["passed"] = ok;
  write_text(a.report, j.dump(2) + "\n");
  Manifest m{"gradcheck", flags, a.seed, "", {a.report}, seconds_since(t0)};
  m.write(a.report);
  return ok ? 0 : 1;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Amodal instance segmentation with a ViT encoder and convolutional decoder heads", "vita"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Generate a synthetic layered-scene dataset");
  gen->add_option("--out", ga.out, "Dataset directory")->required();
  gen->add_option("--scenes", ga.gen.scenes, "Number of scenes")->capture_default_str();
  gen->add_option("--seed", ga.gen.seed, "Random seed")->capture_default_str();
  gen->add_option("--min-objects", ga.gen.min_objects)->capture_default_str();
  gen->add_option("--max-objects", ga.gen.max_objects)->capture_default_str();
  gen->add_option("--scene-side", ga.gen.scene_side)->capture_default_str();
  gen->add_option("--split-ratio", ga.gen.split_ratio, "Fraction of scenes in the train split")->capture_default_str();
  gen->add_option("--candidates", ga.gen.candidates, "Layouts sampled per scene")->capture_default_str();
  gen->add_option("--tolerance", ga.gen.tolerance_pp, "Allowed occlusion-mix deviation (percentage points)")
      ->capture_default_str();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a model on the train split");
  tr->add_option("--data", ta.data, "Dataset directory")->required();
  tr->add_option("--out", ta.out, "Checkpoint path")->capture_default_str();
  tr->add_option("--log", ta.log, "Loss log (JSON Lines); defaults to <out>.log.jsonl");
  tr->add_option("--arch", ta.arch)->check(CLI::IsMember({"single", "dual"}))->capture_default_str();
  tr->add_option("--preset", ta.preset)->check(CLI::IsMember({"toy", "base"}))->capture_default_str();
  tr->add_option("--steps", ta.steps)->capture_default_str();
  tr->add_option("--batch", ta.batch)->capture_default_str();
  tr->add_option("--lr", ta.lr, "Learning rate (default depends on preset)");
  tr->add_option("--weight-decay", ta.weight_decay)->capture_default_str();
  tr->add_option("--lambda-a", ta.lambda_a)->capture_default_str();
  tr->add_option("--lambda-o", ta.lambda_o)->capture_default_str();
  tr->add_option("--init-checkpoint", ta.init, "Start from an existing checkpoint");
  tr->add_option("--limit", ta.limit, "Use at most this many training RoIs (0 = all)")->capture_default_str();
  tr->add_option("--seed", ta.seed)->capture_default_str();

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  ev->add_option("--checkpoint", ea.checkpoint);
  ev->add_option("--data", ea.data)->required();
  ev->add_option("--split", ea.split)->check(CLI::IsMember({"train", "val"}))->capture_default_str();
  ev->add_option("--thr", ea.thr)->capture_default_str();
  ev->add_option("--report", ea.report)->capture_default_str();
  ev->add_option("--seed", ea.seed)->capture_default_str();
  ev->add_option("--limit", ea.limit)->capture_default_str();
  ev->add_option("--oracle", ea.oracle, "Score ground truth as predictions ('gt')");
  ev->add_option("--side", ea.side, "RoI side for --oracle")->capture_default_str();

  PredictArgs pa;
  auto* pr = app.add_subcommand("predict", "Predict amodal and occluded masks for one object");
  pr->add_option("--checkpoint", pa.checkpoint)->required();
  pr->add_option("--image", pa.image, "Scene image (PPM)")->required();
  pr->add_option("--visible-mask", pa.visible, "Visible mask of the object (PGM)")->required();
  pr->add_option("--out-prefix", pa.prefix)->required();
  pr->add_option("--thr", pa.thr)->capture_default_str();

  SweepArgs sa;
  auto* sw = app.add_subcommand("sweep", "Train and evaluate the dual head for several lambda_o values");
  sw->add_option("--data", sa.data)->required();
  sw->add_option("--lambdas", sa.lambdas)->capture_default_str();
  sw->add_option("--steps", sa.steps)->capture_default_str();
  sw->add_option("--batch", sa.batch)->capture_default_str();
  sw->add_option("--lr", sa.lr)->capture_default_str();
  sw->add_option("--limit", sa.limit, "Training RoIs")->capture_default_str();
  sw->add_option("--eval-limit", sa.eval_limit, "Validation RoIs (0 = all)")->capture_default_str();
  sw->add_option("--seed", sa.seed)->capture_default_str();
  sw->add_option("--out", sa.out)->capture_default_str();

  GradArgs ka;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite (64-bit)");
  gc->add_option("--seed", ka.seed)->capture_default_str();
  gc->add_option("--report", ka.report)->capture_default_str();
  gc->add_flag("--skip-model", ka.skip_model, "Only check individual ops");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "vita: " << e.what() << "\n" << "run 'vita --help' for usage\n";
    return 2;
  }

  try {
    if (*gen) return do_generate(ga, collect_flags(gen), out);
    if (*tr) return do_train(ta, collect_flags(tr), out);
    if (*ev) return do_eval(ea, collect_flags(ev), out);
    if (*pr) return do_predict(pa, collect_flags(pr), out);
    if (*sw) return do_sweep(sa, collect_flags(sw), out);
    if (*gc) return do_gradcheck(ka, collect_flags(gc), out);
  } catch (const std::exception& e) {
    err << "vita: error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace vita
