#include "cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "convreg/evaldata.hpp"
#include "convreg/network.hpp"
#include "convreg/registration.hpp"
#include "convreg/training.hpp"
#include "convreg/volume_io.hpp"

namespace convreg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 1;
  bool seed_set = false;
  int threads = 0;
  std::string out;
};

struct Options {
  Common common;
  std::string metric;
  std::string net;
  std::string scale = "desk";
  std::vector<std::string> inputs;
  std::string fixed_labels, moving_labels;
  std::string stage = "similarity";
  int index = 0;
  std::string offsets = "-10:10:1";
  int samples = 2000;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path);
  try {
    json j = json::parse(in);
    if (!j.is_object()) throw DataError("config " + path + " must hold a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw DataError("cannot parse config " + path + ": " + e.what());
  }
}

json section(const json& cfg, const char* name) { return cfg.contains(name) ? cfg.at(name) : json::object(); }

std::uint64_t resolve_seed(const Common& c, const json& cfg) {
  if (c.seed_set) return c.seed;
  try {
    return cfg.value("seed", std::uint64_t{1});
  } catch (const json::exception& e) {
    throw DataError(std::string("bad seed in config: ") + e.what());
  }
}

fs::path require_out(const Common& c) {
  if (c.out.empty()) throw DataError("--out is required");
  return c.out;
}

void prepare_out(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw DataError("failed writing " + path.string());
}

Architecture architecture_for_scale(const std::string& scale) {
  if (scale == "desk") return Architecture::reference();
  if (scale == "paper") return Architecture::paper_scale();
  throw DataError("unknown scale '" + scale + "'");
}

std::vector<AlignedPair> load_pairs(const std::vector<std::string>& dirs) {
  std::vector<AlignedPair> pairs;
  for (const auto& d : dirs) pairs.push_back({read_volume(fs::path(d) / "a.vol"), read_volume(fs::path(d) / "b.vol")});
  return pairs;
}

std::vector<AlignedPair> generate_pairs(const PhantomConfig& base, int count, std::uint64_t seed, const std::string& tag) {
  std::vector<AlignedPair> pairs;
  for (int i = 0; i < count; ++i) {
    PhantomConfig c = base;
    c.seed = derive_seed(seed, tag + "-" + std::to_string(i));
    Phantom ph = generate_phantom(c);
    pairs.push_back({std::move(ph.modality_a), std::move(ph.modality_b)});
  }
  return pairs;
}

std::vector<double> parse_offsets(const std::string& text) {
  std::vector<double> out;
  try {
    if (text.find(':') != std::string::npos) {
      std::stringstream ss(text);
      std::string a, b, c;
      std::getline(ss, a, ':');
      std::getline(ss, b, ':');
      std::getline(ss, c, ':');
      const double lo = std::stod(a), hi = std::stod(b), step = std::stod(c);
      if (!(step > 0.0) || hi < lo) throw DataError("offset range must be lo:hi:step with step > 0 and hi >= lo");
      const auto n = static_cast<long>(std::floor((hi - lo) / step + 1e-9));
      for (long i = 0; i <= n; ++i) out.push_back(lo + static_cast<double>(i) * step);
    } else if (!text.empty()) {
      std::stringstream ss(text);
      std::string item;
      while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
    }
  } catch (const std::logic_error& e) {
    throw DataError("bad offsets '" + text + "'");
  }
  return out;
}

int cmd_phantom(const Options& o, std::ostream& out) {
  const json cfg = load_config(o.common.config);
  PhantomConfig pc = phantom_config_from_json(section(cfg, "phantom"));
  pc.seed = resolve_seed(o.common, cfg);
  pc.validate();
  const fs::path dir = require_out(o.common);

  const Phantom ph = generate_phantom(pc);
  prepare_out(dir);
  write_volume(dir / "a.vol", ph.modality_a);
  write_volume(dir / "b.vol", ph.modality_b);
  write_volume(dir / "labels.vol", ph.labels);
  write_json(dir / "phantom.json",
             {{"modality_a", "a.vol"}, {"modality_b", "b.vol"}, {"labels", "labels.vol"}, {"config", to_json(pc)}});
  write_json(dir / "config.json", {{"command", "phantom"}, {"seed", pc.seed}, {"phantom", to_json(pc)}});
  out << "wrote phantom to " << dir.string() << '\n';
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  const json cfg = load_config(o.common.config);
  const std::uint64_t seed = resolve_seed(o.common, cfg);
  TrainConfig tc = train_config_from_json(section(cfg, "train"));
  tc.seed = seed;
  const AugmentConfig aug = augment_config_from_json(section(cfg, "augment"));
  const Architecture arch = cfg.contains("architecture") ? architecture_from_json(cfg.at("architecture"))
                                                         : architecture_for_scale(o.scale);
  PhantomConfig pc = phantom_config_from_json(section(cfg, "phantom"));
  const int pairs_count = cfg.value("pairs", 3);
  if (o.inputs.empty() && pairs_count < 1) throw DataError("pairs must be at least 1");
  const fs::path dir = require_out(o.common);

  const Network net0 = init_network<float>(arch, derive_seed(seed, "network-init"));
  const std::vector<AlignedPair> data =
      o.inputs.empty() ? generate_pairs(pc, pairs_count, seed, "train-phantom") : load_pairs(o.inputs);
  const json resolved = {{"command", "train"},
                         {"seed", seed},
                         {"scale", o.scale},
                         {"train", to_json(tc)},
                         {"augment", to_json(aug)},
                         {"architecture", to_json(arch)},
                         {"phantom", to_json(pc)},
                         {"pairs", o.inputs.empty() ? json(pairs_count) : json(o.inputs)}};
  prepare_out(dir);
  write_json(dir / "config.json", resolved);

  const TrainResult r = train(net0, data, tc, aug, [&](const TrainPoint& p) {
    out << "step " << p.step << " loss " << std::setprecision(6) << p.loss << " accuracy " << p.accuracy << std::endl;
  });
  write_checkpoint(dir / "net", r.net, arch, seed, tc.iterations, resolved);
  std::ofstream csv(dir / "curves.csv");
  if (!csv) throw DataError("cannot write curves.csv");
  csv << "step,loss,accuracy\n" << std::setprecision(17);
  for (const auto& p : r.curve) csv << p.step << ',' << p.loss << ',' << p.accuracy << '\n';
  return kExitOk;
}

int cmd_classify(const Options& o, std::ostream& out) {
  const json cfg = load_config(o.common.config);
  const std::uint64_t seed = resolve_seed(o.common, cfg);
  if (o.net.empty()) throw DataError("--net is required");
  if (o.samples < 1) throw DataError("--samples must be positive");
  const AugmentConfig aug = augment_config_from_json(section(cfg, "augment"));
  const PhantomConfig pc = phantom_config_from_json(section(cfg, "phantom"));
  const int pairs_count = cfg.value("pairs", 1);
  const Network net = read_checkpoint(o.net);
  const std::vector<AlignedPair> data =
      o.inputs.empty() ? generate_pairs(pc, pairs_count, seed, "heldout-phantom") : load_pairs(o.inputs);

  std::mt19937_64 rng(derive_seed(seed, "classify-samples"));
  std::vector<TrainingSample> samples;
  samples.reserve(static_cast<std::size_t>(o.samples));
  for (int i = 0; i < o.samples; ++i) samples.push_back(sample_pair(data, aug, net.patch_size(), rng));
  const double acc = evaluate_classifier(net, samples);
  out << "accuracy " << std::setprecision(6) << acc << '\n';
  if (!o.common.out.empty()) {
    const fs::path dir = o.common.out;
    prepare_out(dir);
    write_json(dir / "config.json", {{"command", "classify"},
                                     {"seed", seed},
                                     {"net", o.net},
                                     {"samples", o.samples},
                                     {"augment", to_json(aug)},
                                     {"phantom", to_json(pc)},
                                     {"pairs", o.inputs.empty() ? json(pairs_count) : json(o.inputs)}});
    write_json(dir / "classify.json", {{"accuracy", acc}, {"samples", o.samples}});
  }
  return kExitOk;
}

PipelineConfig resolve_pipeline(const Options& o, const json& cfg) {
  PipelineConfig pc = pipeline_config_from_json(section(cfg, "pipeline"), PipelineConfig::by_scale(o.scale));
  if (!o.metric.empty()) pc.metric = metric_kind_from_string(o.metric);
  return pc;
}

int cmd_register(const Options& o, std::ostream& out) {
  if (o.inputs.size() != 2) throw CLI::ValidationError("register", "expects FIXED and MOVING volumes");
  const json cfg = load_config(o.common.config);
  const std::uint64_t seed = resolve_seed(o.common, cfg);
  const PipelineConfig pc = resolve_pipeline(o, cfg);
  if (pc.metric == MetricKind::Cnn && o.net.empty()) throw DataError("--net is required for the cnn metric");
  const fs::path dir = require_out(o.common);
  const Volume fixed = read_volume(o.inputs[0]);
  const Volume moving = read_volume(o.inputs[1]);
  std::optional<Network> net;
  if (pc.metric == MetricKind::Cnn) net = read_checkpoint(o.net);
  std::optional<LabelVolume> fixed_labels, moving_labels;
  if (!o.fixed_labels.empty()) fixed_labels = read_label_volume(o.fixed_labels);
  if (!o.moving_labels.empty()) moving_labels = read_label_volume(o.moving_labels);

  json resolved = {{"command", "register"},
                   {"seed", seed},
                   {"scale", o.scale},
                   {"fixed", o.inputs[0]},
                   {"moving", o.inputs[1]},
                   {"pipeline", to_json(pc)}};
  if (net) resolved["net"] = o.net;
  prepare_out(dir);
  write_json(dir / "config.json", resolved);

  RegistrationReport r;
  try {
    r = register_images(fixed, moving, net ? &*net : nullptr, pc, seed);
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }
  json report = to_json(r);
  write_volume(dir / "warped.vol", resample(moving, r.transform, fixed.geometry()));
  if (moving_labels) {
    const LabelVolume warped = warp_labels(*moving_labels, r.transform, fixed.geometry());
    write_volume(dir / "warped_labels.vol", warped);
    if (fixed_labels) {
      report["overlap_initial"] = to_json(dice_jaccard(*fixed_labels, warp_labels(*moving_labels, TransformStack{}, fixed.geometry())));
      report["overlap_final"] = to_json(dice_jaccard(*fixed_labels, warped));
    }
  }
  write_json(dir / "report.json", report);
  write_json(dir / "timings.json", timings_json(r));
  out << "metric evaluations " << r.metric_evaluations << '\n';
  if (r.transform.similarity) {
    const Vec3 t = r.transform.similarity->translation;
    out << "translation " << t.x() << ' ' << t.y() << ' ' << t.z() << '\n';
  }
  if (report.contains("overlap_final"))
    out << "mean dice " << report["overlap_initial"]["mean_dice"].get<double>() << " -> "
        << report["overlap_final"]["mean_dice"].get<double>() << '\n';
  return kExitOk;
}

int cmd_evaluate(const Options& o, std::ostream& out) {
  if (o.inputs.size() != 2) throw CLI::ValidationError("evaluate", "expects two label volumes");
  const LabelVolume a = read_label_volume(o.inputs[0]);
  const LabelVolume b = read_label_volume(o.inputs[1]);
  if (!(a.geometry() == b.geometry())) throw DataError("label volumes differ in geometry");
  const OverlapScores s = dice_jaccard(a, b);
  out << "mean dice " << std::setprecision(6) << s.mean_dice << '\n';
  out << "mean jaccard " << s.mean_jaccard << '\n';
  if (!o.common.out.empty()) {
    const fs::path dir = o.common.out;
    prepare_out(dir);
    write_json(dir / "config.json", {{"command", "evaluate"}, {"a", o.inputs[0]}, {"b", o.inputs[1]}});
    write_json(dir / "overlap.json", to_json(s));
  }
  return kExitOk;
}

int cmd_sweep(const Options& o, std::ostream& out) {
  if (o.inputs.size() != 2) throw CLI::ValidationError("sweep", "expects FIXED and MOVING volumes");
  const json cfg = load_config(o.common.config);
  const std::uint64_t seed = resolve_seed(o.common, cfg);
  const PipelineConfig pc = resolve_pipeline(o, cfg);
  const Stage stage = stage_from_string(o.stage);
  const std::vector<double> offsets = parse_offsets(o.offsets);
  if (pc.metric == MetricKind::Cnn && o.net.empty()) throw DataError("--net is required for the cnn metric");
  const fs::path dir = require_out(o.common);
  const Volume fixed = read_volume(o.inputs[0]);
  const Volume moving = read_volume(o.inputs[1]);
  std::optional<Network> net;
  if (pc.metric == MetricKind::Cnn) net = read_checkpoint(o.net);

  std::optional<MaskVolume> mask;
  if (pc.metric == MetricKind::MiMasked) mask = head_mask(fixed, pc.mask_threshold);
  MetricContext ctx = MetricContext::make(fixed, moving, std::move(mask));
  ctx.warped_channel = pc.warped_channel;
  TransformStack stack;
  if (stage == Stage::Similarity) {
    SimilarityParams sp;
    sp.center = fixed.geometry().center();
    stack.similarity = sp;
  } else {
    stack.bspline = BSplineGrid::covering(fixed.geometry(), pc.control_points);
  }
  if (o.index < 0 || o.index >= stack.parameter_count(stage))
    throw DataError("parameter index " + std::to_string(o.index) + " out of range");

  json resolved = {{"command", "sweep"},   {"seed", seed},       {"fixed", o.inputs[0]},
                   {"moving", o.inputs[1]}, {"stage", o.stage},   {"index", o.index},
                   {"offsets", offsets},    {"pipeline", to_json(pc)}};
  if (net) resolved["net"] = o.net;
  prepare_out(dir);
  write_json(dir / "config.json", resolved);
  const auto rows = perturbation_sweep(pc.metric, net ? &*net : nullptr, ctx, stack, stage, o.index, offsets, pc.mi_bins);
  write_sweep_csv(dir / "sweep.csv", rows);
  out << "wrote " << rows.size() << " rows to " << (dir / "sweep.csv").string() << '\n';
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Learned multimodal similarity metric for 3D registration"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub, bool needs_out) {
    sub->add_option("--config", o.common.config, "JSON configuration file");
    sub->add_option_function<std::uint64_t>(
        "--seed",
        [&](const std::uint64_t& s) {
          o.common.seed = s;
          o.common.seed_set = true;
        },
        "Root random seed");
    sub->add_option("--threads", o.common.threads, "Worker threads (default: all)")->check(CLI::NonNegativeNumber);
    auto* opt = sub->add_option("--out", o.common.out, "Output directory");
    if (needs_out) opt->required();
  };
  auto add_metric = [&](CLI::App* sub) {
    sub->add_option("--metric", o.metric, "Similarity metric")->check(CLI::IsMember({"cnn", "mi", "mi+m"}));
    sub->add_option("--net", o.net, "Network checkpoint directory");
    sub->add_option("--scale", o.scale, "Configuration scale")->check(CLI::IsMember({"desk", "paper"}));
  };

  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic two-modality phantom");
  add_common(phantom, true);

  auto* train_cmd = app.add_subcommand("train", "Train the patch network");
  add_common(train_cmd, true);
  train_cmd->add_option("--scale", o.scale, "Network scale")->check(CLI::IsMember({"desk", "paper"}));
  train_cmd->add_option("pairs", o.inputs, "Phantom directories (default: generated)");

  auto* classify = app.add_subcommand("classify", "Held-out patch classification accuracy");
  add_common(classify, false);
  classify->add_option("--net", o.net, "Network checkpoint directory")->required();
  classify->add_option("--samples", o.samples, "Number of held-out samples");
  classify->add_option("pairs", o.inputs, "Phantom directories (default: generated)");

  auto* reg = app.add_subcommand("register", "Register MOVING onto FIXED");
  add_common(reg, true);
  add_metric(reg);
  reg->add_option("volumes", o.inputs, "FIXED MOVING")->expected(2)->required();
  reg->add_option("--fixed-labels", o.fixed_labels, "Fixed label volume for overlap scores");
  reg->add_option("--moving-labels", o.moving_labels, "Moving label volume to warp");

  auto* evaluate = app.add_subcommand("evaluate", "Dice and Jaccard overlap of two label volumes");
  add_common(evaluate, false);
  evaluate->add_option("labels", o.inputs, "A B")->expected(2)->required();

  auto* sweep = app.add_subcommand("sweep", "Perturb one transform parameter and record the metric");
  add_common(sweep, true);
  add_metric(sweep);
  sweep->add_option("volumes", o.inputs, "FIXED MOVING")->expected(2)->required();
  sweep->add_option("--stage", o.stage, "Transform stage")->check(CLI::IsMember({"similarity", "bspline"}));
  sweep->add_option("--index", o.index, "Parameter index within the stage");
  sweep->add_option("--offsets", o.offsets, "lo:hi:step or a comma-separated list");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    set_thread_count(o.common.threads);
    if (phantom->parsed()) return cmd_phantom(o, out);
    if (train_cmd->parsed()) return cmd_train(o, out);
    if (classify->parsed()) return cmd_classify(o, out);
    if (reg->parsed()) return cmd_register(o, out);
    if (evaluate->parsed()) return cmd_evaluate(o, out);
    if (sweep->parsed()) return cmd_sweep(o, out);
  } catch (const CLI::ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace convreg::cli
