#include "cli/app.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

#include "cli/common.hpp"
#include "cli/pipeline.hpp"
#include "cli/svg.hpp"

namespace bsift::cli {

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string config;
  bool quiet = false;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  try {
    return read_json(path);
  } catch (const FormatError& e) {
    throw ConfigError(std::string("config ") + e.what());
  }
}

fs::path require_out(const Globals& g, const char* what) {
  if (g.out.empty()) throw ConfigError(std::string("--out is required (") + what + ")");
  return g.out;
}

// Trigger stored next to a poisoned bundle, if any.
std::optional<TriggerSpec> bundle_trigger(const fs::path& bundle, const ImageShape& shape) {
  const fs::path p = bundle / "trigger.json";
  if (!fs::exists(p)) return std::nullopt;
  return load_trigger_file(p, shape);
}

}  // namespace

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"bsift: find backdoor-poisoned training samples with masked scaled prediction consistency"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version());
  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random choice of the command");
  app.add_option("--out", g.out, "Output directory (file path for score-spc, eval, roc-plot)");
  app.add_option("--config", g.config, "JSON config file");
  app.add_flag("-q,--quiet", g.quiet, "Suppress progress messages");
  for (auto* opt : app.get_options()) opt->configurable(false);

  Logger log = [&](const std::string& msg) {
    if (!g.quiet) err << msg << '\n';
  };
  std::function<void()> action;

  // make-toy-dataset ---------------------------------------------------------
  auto* toy = app.add_subcommand("make-toy-dataset", "Write seeded synthetic train/test bundles");
  toy->fallthrough();
  std::size_t toy_train = 2500, toy_test = 500;
  std::string cifar_dir;
  toy->add_option("--n-train", toy_train, "Training samples")->capture_default_str();
  toy->add_option("--n-test", toy_test, "Test samples")->capture_default_str();
  toy->add_option("--cifar10", cifar_dir, "Import CIFAR-10 binary batches from this directory instead");
  toy->callback([&] {
    action = [&] {
      const fs::path dir = require_out(g, "bundle directory");
      const std::uint64_t seed = g.seed.value_or(0);
      ImageBatch train, test;
      int classes = kToyClasses;
      if (!cifar_dir.empty()) {
        train = load_cifar10(cifar_dir, true);
        test = load_cifar10(cifar_dir, false);
        classes = 10;
      } else {
        train = make_toy_images(toy_train, seed);
        test = make_toy_images(toy_test, seed + 1000003);
      }
      save_dataset(as_clean_dataset(std::move(train), classes, seed), dir / "train");
      save_dataset(as_clean_dataset(std::move(test), classes, seed), dir / "test");
      log("wrote " + (dir / "train").string() + " and " + (dir / "test").string());
    };
  });

  // poison -----------------------------------------------------------------------
  auto* poison = app.add_subcommand("poison", "Stamp a trigger into a clean bundle");
  poison->fallthrough();
  std::string p_dataset, p_attack = "badnets", p_trigger;
  double p_gamma = 0.1, p_alpha = 0.2;
  int p_target = 0;
  std::size_t p_patch = 5;
  poison->add_option("--dataset", p_dataset, "Clean bundle directory")->required();
  poison->add_option("--attack", p_attack, "badnets | blend | trojan")
      ->check(CLI::IsMember({"badnets", "blend", "trojan"}))
      ->capture_default_str();
  poison->add_option("--gamma", p_gamma, "Poisoning ratio")->capture_default_str();
  poison->add_option("--target-label", p_target, "Target class")->capture_default_str();
  poison->add_option("--patch-size", p_patch, "BadNets patch side")->capture_default_str();
  poison->add_option("--blend-alpha", p_alpha, "Blend weight")->capture_default_str();
  poison->add_option("--trigger-file", p_trigger, "Trigger PNG or JSON sidecar (required for trojan)");
  poison->callback([&] {
    action = [&] {
      const fs::path dir = require_out(g, "poisoned bundle directory");
      const auto clean = load_dataset(p_dataset);
      const std::uint64_t seed = g.seed.value_or(0);
      TriggerSpec t;
      if (!p_trigger.empty()) {
        t = load_trigger_file(p_trigger, clean.batch.shape());
      } else if (p_attack == "badnets") {
        t = make_badnets_trigger(p_patch, clean.batch.shape(), seed);
      } else if (p_attack == "blend") {
        t = make_blend_trigger(clean.batch.shape(), seed, p_alpha);
      } else {
        throw ConfigError("--trigger-file is required for the trojan attack");
      }
      const auto d = poison_dataset(clean.batch, clean.num_classes, t, p_gamma, p_target, seed, p_attack);
      save_dataset(d, dir);
      save_trigger(t, dir / "trigger.json");
      log("poisoned " + std::to_string(d.poison_count()) + " of " + std::to_string(d.size()) + " samples");
    };
  });

  // train --------------------------------------------------------------------------
  auto* train = app.add_subcommand("train", "Train a classifier on a bundle");
  train->fallthrough();
  std::string t_dataset, t_test;
  std::optional<int> t_epochs;
  std::optional<double> t_lr;
  std::optional<std::string> t_arch;
  train->add_option("--dataset", t_dataset, "Training bundle")->required();
  train->add_option("--test", t_test, "Clean test bundle for ACC/ASR");
  train->add_option("--epochs", t_epochs, "Epochs");
  train->add_option("--lr", t_lr, "Initial learning rate");
  train->add_option("--arch", t_arch, "small_cnn | resnet_mini")->check(CLI::IsMember({"small_cnn", "resnet_mini"}));
  train->callback([&] {
    action = [&] {
      const fs::path dir = require_out(g, "model directory");
      TrainConfig cfg;
      update_from_json(cfg, load_config(g.config));
      if (t_epochs) {
        cfg.epochs = *t_epochs;
        std::erase_if(cfg.milestones, [&](int m) { return m >= cfg.epochs; });
      }
      if (t_lr) cfg.learning_rate = *t_lr;
      if (t_arch) cfg.arch = *t_arch;
      if (g.seed) cfg.seed = *g.seed;
      const auto d = load_dataset(t_dataset);
      auto net = train_classifier(d, cfg, [&](const EpochStats& s) {
        log("epoch " + std::to_string(s.epoch) + " lr " + format_double(s.lr) + " loss " +
            format_double(s.mean_loss) + " train_acc " + format_double(s.train_acc));
      });
      fs::create_directories(dir);
      net.save(dir / "model.bin");
      json report = {{"config", to_json(cfg)}};
      if (!t_test.empty()) {
        const auto test = load_dataset(t_test);
        report["acc"] = evaluate_acc(net, test.batch);
        if (auto trig = bundle_trigger(t_dataset, d.batch.shape())) {
          report["asr"] = evaluate_asr(net, test.batch, *trig, d.target_label);
        }
      }
      write_json(dir / "train.json", report);
      out << report.dump(2) << '\n';
    };
  });

  // score-spc ------------------------------------------------------------------------
  auto* score = app.add_subcommand("score-spc", "Vanilla SPC scores");
  score->fallthrough();
  std::string s_model, s_dataset, s_scales = "2..12";
  score->add_option("--model", s_model, "Checkpoint")->required();
  score->add_option("--dataset", s_dataset, "Bundle")->required();
  score->add_option("--scales", s_scales, "Scale set, e.g. 2..12")->capture_default_str();
  score->callback([&] {
    action = [&] {
      const fs::path path = require_out(g, "scores CSV path");
      const auto net = nn::Network::load(s_model);
      const auto d = load_dataset(s_dataset);
      write_spc_csv(path, spc_score_dataset(net, d, parse_scales(s_scales)), d.is_backdoor);
    };
  });

  // detect -------------------------------------------------------------------------------
  auto* detect = app.add_subcommand("detect", "Run the bi-level MSPC detector");
  detect->fallthrough();
  std::string d_model, d_dataset;
  std::optional<std::string> d_scales;
  std::optional<double> d_tau, d_lambda, d_lr;
  std::optional<int> d_rounds, d_epochs;
  std::optional<std::size_t> d_batch;
  bool d_full = false;
  detect->add_option("--model", d_model, "Checkpoint")->required();
  detect->add_option("--dataset", d_dataset, "Bundle")->required();
  detect->add_option("--tau", d_tau, "Linear shift (default 0.1)");
  detect->add_option("--lambda", d_lambda, "L1 weight on the mask (default 0.001)");
  detect->add_option("--scales", d_scales, "Scale set (default 2..12)");
  detect->add_option("--outer-rounds", d_rounds, "Alternating rounds (default 4)");
  detect->add_option("--lower-epochs", d_epochs, "Lower-level epochs (default 10)");
  detect->add_option("--lower-lr", d_lr, "Lower-level learning rate (default 0.1)");
  detect->add_option("--batch-size", d_batch, "Lower-level minibatch (default 1000)");
  detect->add_flag("--full-batch", d_full, "Deterministic full-batch descent with step halving");
  detect->callback([&] {
    action = [&] {
      const fs::path dir = require_out(g, "report directory");
      BilevelConfig cfg;
      update_from_json(cfg, load_config(g.config));
      if (d_tau) cfg.tau = *d_tau;
      if (d_lambda) cfg.lambda_l1 = *d_lambda;
      if (d_scales) cfg.scales = parse_scales(*d_scales);
      if (d_rounds) cfg.outer_rounds = *d_rounds;
      if (d_epochs) cfg.lower_epochs = *d_epochs;
      if (d_lr) cfg.lower_lr = *d_lr;
      if (d_batch) cfg.batch_size = *d_batch;
      if (d_full) cfg.full_batch_mode = true;
      if (g.seed) cfg.seed = *g.seed;
      const auto net = nn::Network::load(d_model);
      const auto d = load_dataset(d_dataset);
      const auto spc = spc_score_dataset(net, d, cfg.scales);
      const auto r = run_bilevel(net, d.batch.images, cfg, [&](int round, const ScoreVector&, const SplitVector& w) {
        log("round " + std::to_string(round) + ": " + std::to_string(w.count()) + " samples flagged");
      });
      for (const auto& w : r.warnings) log("warning: " + w);
      fs::create_directories(dir);
      write_detect_csv(dir / "scores.csv", spc, r.mspc, r.w, d.is_backdoor);
      save_mask(r.mask, dir);
      json trace = trace_json(r);
      trace["config"] = to_json(cfg);
      write_json(dir / "trace.json", trace);
      out << "flagged " << r.w.count() << " of " << d.size() << " samples\n";
    };
  });

  // eval -----------------------------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "ROC, AUROC and threshold-0 rates from scores.csv");
  eval->fallthrough();
  std::string e_scores, e_column = "mspc";
  eval->add_option("--scores", e_scores, "scores.csv from detect or score-spc")->required();
  eval->add_option("--column", e_column, "Score column to rank by")->capture_default_str();
  eval->callback([&] {
    action = [&] {
      const fs::path roc_path = require_out(g, "roc CSV path");
      const auto table = read_score_csv(e_scores);
      const auto& scores = table.column(e_column);
      const auto& flags = table.column("is_backdoor");
      std::vector<std::uint8_t> labels(flags.begin(), flags.end());
      const std::span<const std::uint8_t> lab(labels);
      write_roc_csv(roc_path, roc_curve<std::uint8_t>(scores, lab));
      json summary = {{"column", e_column}, {"auroc", auroc<std::uint8_t>(scores, lab)}};
      if (e_column == "mspc") {
        const auto rz = tpr_fpr_at_zero<std::uint8_t>(ScoreVector{scores, ScoreKind::Mspc}, lab);
        summary["tpr_at_0"] = rz.tpr;
        summary["fpr_at_0"] = rz.fpr;
      }
      if (table.has("spc") && e_column != "spc") summary["auroc_spc"] = auroc<std::uint8_t>(table.column("spc"), lab);
      write_json(roc_path.parent_path() / "summary.json", summary);
      out << summary.dump(2) << '\n';
    };
  });

  // roc-plot -------------------------------------------------------------------------------
  auto* plot = app.add_subcommand("roc-plot", "Render roc.csv files to an SVG chart");
  plot->fallthrough();
  std::vector<std::string> r_inputs;
  std::string r_title = "ROC";
  plot->add_option("--roc", r_inputs, "One or more roc.csv files (name=path to label)")->required();
  plot->add_option("--title", r_title, "Chart title");
  plot->callback([&] {
    action = [&] {
      const fs::path svg_path = require_out(g, "SVG path");
      std::vector<RocSeries> series;
      for (const auto& in : r_inputs) {
        const auto eq = in.find('=');
        const std::string name = eq == std::string::npos ? fs::path(in).stem().string() : in.substr(0, eq);
        const std::string path = eq == std::string::npos ? in : in.substr(eq + 1);
        series.push_back({name, read_roc_csv(path)});
      }
      if (svg_path.has_parent_path()) fs::create_directories(svg_path.parent_path());
      std::ofstream f(svg_path);
      if (!f) throw IoError("cannot open " + svg_path.string());
      f << render_roc_svg(series, r_title);
    };
  });

  // retrain --------------------------------------------------------------------------------
  auto* retrain = app.add_subcommand("retrain", "Retrain on the samples detect kept (w = 0)");
  retrain->fallthrough();
  std::string rt_dataset, rt_split, rt_test, rt_trigger;
  retrain->add_option("--dataset", rt_dataset, "Poisoned bundle")->required();
  retrain->add_option("--split", rt_split, "scores.csv with a w column")->required();
  retrain->add_option("--test", rt_test, "Clean test bundle")->required();
  retrain->add_option("--trigger-file", rt_trigger, "Trigger used for ASR (default: the bundle's)");
  retrain->callback([&] {
    action = [&] {
      const fs::path dir = require_out(g, "model directory");
      TrainConfig cfg;
      update_from_json(cfg, load_config(g.config));
      if (g.seed) cfg.seed = *g.seed;
      const auto d = load_dataset(rt_dataset);
      const auto test = load_dataset(rt_test);
      const auto table = read_score_csv(rt_split);
      const auto& wcol = table.column("w");
      detail::require(wcol.size() == d.size(), "split has " + std::to_string(wcol.size()) + " rows, dataset has " +
                                                   std::to_string(d.size()));
      SplitVector w;
      for (double v : wcol) w.w.push_back(v != 0.0);
      std::optional<TriggerSpec> t =
          rt_trigger.empty() ? bundle_trigger(rt_dataset, d.batch.shape()) : load_trigger_file(rt_trigger, d.batch.shape());
      if (!t) throw ConfigError("no trigger found; pass --trigger-file");
      auto [net, report] = retrain_on_clean(d, w, cfg, test.batch, *t, [&](const EpochStats& s) {
        log("epoch " + std::to_string(s.epoch) + " loss " + format_double(s.mean_loss));
      });
      fs::create_directories(dir);
      net.save(dir / "model.bin");
      json j = {{"acc", report.acc}, {"asr", report.asr}, {"kept", w.size() - w.count()}};
      write_json(dir / "retrain.json", j);
      out << j.dump(2) << '\n';
    };
  });

  // adaptive-trigger -----------------------------------------------------------------------
  auto* adaptive = app.add_subcommand("adaptive-trigger", "White-box trigger optimization against a mask");
  adaptive->fallthrough();
  std::string a_model, a_mask, a_dataset, a_init;
  AdaptiveConfig a_cfg;
  std::optional<std::string> a_scales;
  std::size_t a_samples = 256;
  a_cfg.step_size = 0.05;
  adaptive->add_option("--model", a_model, "Poisoned model checkpoint")->required();
  adaptive->add_option("--mask", a_mask, "Directory holding mask.u8 + mask_meta.json")->required();
  adaptive->add_option("--dataset", a_dataset, "Bundle of clean images to stamp")->required();
  adaptive->add_option("--init", a_init, "Initial trigger (default: random blend pattern)");
  adaptive->add_option("--steps", a_cfg.steps, "Ascent steps")->capture_default_str();
  adaptive->add_option("--step-size", a_cfg.step_size, "Ascent step size")->capture_default_str();
  adaptive->add_option("--tau", a_cfg.tau, "Linear shift")->capture_default_str();
  adaptive->add_option("--scales", a_scales, "Scale set (default 2..12)");
  adaptive->add_option("--samples", a_samples, "Clean images used per objective evaluation")->capture_default_str();
  adaptive->callback([&] {
    action = [&] {
      const fs::path dir = require_out(g, "trigger directory");
      if (a_scales) a_cfg.scales = parse_scales(*a_scales);
      const auto net = nn::Network::load(a_model);
      const Mask m = load_mask(a_mask);
      const auto d = load_dataset(a_dataset);
      std::vector<std::size_t> clean_idx;
      for (std::size_t i = 0; i < d.size() && clean_idx.size() < a_samples; ++i) {
        if (!d.is_backdoor[i]) clean_idx.push_back(i);
      }
      detail::require(!clean_idx.empty(), "dataset has no clean samples");
      const Tensor clean = subset(d.batch, clean_idx).images;
      const TriggerSpec init = a_init.empty() ? make_blend_trigger(d.batch.shape(), g.seed.value_or(0))
                                              : load_trigger_file(a_init, d.batch.shape());
      const auto r = optimize_adaptive_trigger(net, m, clean, init, a_cfg);
      save_trigger(r.trigger, dir / "trigger.json");
      write_json(dir / "adaptive_trace.json", {{"objective", r.objective_trace}});
      out << "objective " << format_double(r.objective_trace.front()) << " -> "
          << format_double(r.objective_trace.back()) << '\n';
    };
  });

  // pipeline -------------------------------------------------------------------------------
  auto* pipe = app.add_subcommand("pipeline", "Run the whole experiment from one JSON config");
  pipe->fallthrough();
  std::string pipe_config;
  pipe->add_option("config_file", pipe_config, "Pipeline config (same as --config)");
  pipe->callback([&] {
    action = [&] {
      const fs::path dir = require_out(g, "run directory");
      const std::string path = !pipe_config.empty() ? pipe_config : g.config;
      if (path.empty()) throw ConfigError("pipeline needs a config file");
      json cfg = load_config(path);
      if (g.seed && cfg.is_object()) {
        for (const char* key : {"dataset", "attack", "train", "detect"}) {
          if (cfg.contains(key) && cfg[key].is_object()) cfg[key]["seed"] = *g.seed;
        }
      }
      const json manifest = run_pipeline(cfg, dir, log);
      out << manifest.at("summary").dump(2) << '\n';
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    action();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const StageError& e) {
    err << json{{"stage", e.stage()}, {"error", e.kind()}, {"message", e.what()}}.dump() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << json{{"error", error_kind(e)}, {"message", e.what()}}.dump() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace bsift::cli
