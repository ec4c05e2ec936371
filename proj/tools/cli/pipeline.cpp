#include "cli/pipeline.hpp"

#include <chrono>

#include "cli/common.hpp"

namespace bsift::cli {

namespace {

template <typename Fn>
auto stage(const std::string& name, const Logger& log, Fn&& fn) {
  log("[" + name + "] start");
  const auto t0 = std::chrono::steady_clock::now();
  try {
    if constexpr (std::is_void_v<decltype(fn())>) {
      fn();
      log("[" + name + "] done in " +
          format_double(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + " s");
    } else {
      auto r = fn();
      log("[" + name + "] done in " +
          format_double(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + " s");
      return r;
    }
  } catch (const StageError&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, error_kind(e), e.what());
  }
}

const json& section(const json& config, const char* key) {
  if (!config.is_object()) throw ConfigError("config must be a JSON object");
  if (!config.contains(key)) throw ConfigError(std::string("missing section \"") + key + "\"");
  const json& s = config.at(key);
  if (!s.is_object()) throw ConfigError(std::string("section \"") + key + "\" must be an object");
  return s;
}

template <typename T>
T get(const json& s, const char* section_name, const char* key, T fallback) {
  if (!s.contains(key)) return fallback;
  try {
    return s.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(section_name) + "." + key + " has the wrong type");
  }
}

json file_entry(const fs::path& root, const fs::path& file) {
  return {{"path", fs::relative(file, root).generic_string()}, {"fnv1a64", hex64(file_hash(file))}};
}

json artifact(const fs::path& root, const std::string& name, const std::vector<fs::path>& files) {
  json list = json::array();
  for (const auto& f : files) list.push_back(file_entry(root, f));
  return {{"name", name}, {"files", list}};
}

std::vector<fs::path> bundle_files(const fs::path& dir) {
  return {dir / "meta.json", dir / "images.u8", dir / "labels.csv"};
}

TriggerSpec make_trigger(const json& attack, const ImageShape& shape, std::uint64_t seed) {
  const auto name = get<std::string>(attack, "attack", "name", "badnets");
  if (name == "badnets") {
    return make_badnets_trigger(get<std::size_t>(attack, "attack", "patch_size", 5), shape, seed);
  }
  if (name == "blend") return make_blend_trigger(shape, seed, get<double>(attack, "attack", "blend_alpha", 0.2));
  if (name == "trojan") {
    if (!attack.contains("trigger_file")) throw ConfigError("attack.trigger_file is required for trojan");
    return load_trigger_file(attack.at("trigger_file").get<std::string>(), shape);
  }
  throw ConfigError("attack.name must be badnets, blend or trojan (got \"" + name + "\")");
}

}  // namespace

json run_pipeline(const json& config, const fs::path& out, const Logger& log) {
  for (const char* key : kPipelineSections) section(config, key);
  const json& ds = section(config, "dataset");
  const json& atk = section(config, "attack");
  const json& ev = section(config, "eval");

  TrainConfig train_cfg;
  BilevelConfig detect_cfg;
  try {
    update_from_json(train_cfg, section(config, "train"));
    update_from_json(detect_cfg, section(config, "detect"));
    validate(train_cfg);
    validate(detect_cfg);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train/detect section: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }

  fs::create_directories(out);
  const fs::path data_dir = out / "data";

  // dataset
  const auto source = get<std::string>(ds, "dataset", "source", "toy");
  const auto data_seed = get<std::uint64_t>(ds, "dataset", "seed", 0);
  const auto split = stage("dataset", log, [&] {
    if (source == "toy") {
      const auto n_train = get<std::size_t>(ds, "dataset", "n_train", 2500);
      const auto n_test = get<std::size_t>(ds, "dataset", "n_test", 500);
      return std::pair{make_toy_images(n_train, data_seed), make_toy_images(n_test, data_seed + 1000003)};
    }
    if (source == "bundle") {
      if (!ds.contains("train") || !ds.contains("test")) throw ConfigError("dataset.train and dataset.test are required");
      return std::pair{load_dataset(ds.at("train").get<std::string>()).batch,
                       load_dataset(ds.at("test").get<std::string>()).batch};
    }
    if (source == "cifar10") {
      if (!ds.contains("dir")) throw ConfigError("dataset.dir is required for cifar10");
      const fs::path dir = ds.at("dir").get<std::string>();
      return std::pair{load_cifar10(dir, true), load_cifar10(dir, false)};
    }
    throw ConfigError("dataset.source must be toy, bundle or cifar10 (got \"" + source + "\")");
  });
  const ImageBatch& train_clean = split.first;
  const ImageBatch& test = split.second;
  const int num_classes = get<int>(ds, "dataset", "num_classes", kToyClasses);

  // attack
  const auto attack_seed = get<std::uint64_t>(atk, "attack", "seed", 0);
  const auto attack_name = get<std::string>(atk, "attack", "name", "badnets");
  TriggerSpec trigger;
  PoisonedDataset poisoned = stage("attack", log, [&] {
    trigger = make_trigger(atk, train_clean.shape(), attack_seed);
    auto d = poison_dataset(train_clean, num_classes, trigger, get<double>(atk, "attack", "gamma", 0.1),
                            get<int>(atk, "attack", "target_label", 0), attack_seed, attack_name);
    save_dataset(d, data_dir / "train");
    save_dataset(as_clean_dataset(test, num_classes, data_seed), data_dir / "test");
    save_trigger(trigger, data_dir / "train" / "trigger.json");
    return d;
  });

  // train
  nn::Network model = stage("train", log, [&] {
    auto net = train_classifier(poisoned, train_cfg, [&](const EpochStats& s) {
      log("[train] epoch " + std::to_string(s.epoch) + " loss " + format_double(s.mean_loss) + " acc " +
          format_double(s.train_acc));
    });
    net.save(out / "model.bin");
    return net;
  });

  // score
  const ScoreVector spc = stage("score", log, [&] { return spc_score_dataset(model, poisoned, detect_cfg.scales); });

  // detect
  const BilevelResult res = stage("detect", log, [&] {
    auto r = run_bilevel(model, poisoned.batch.images, detect_cfg, [&](int round, const ScoreVector&, const SplitVector& w) {
      log("[detect] round " + std::to_string(round) + " selected " + std::to_string(w.count()));
    });
    for (const auto& warning : r.warnings) log("[detect] warning: " + warning);
    write_detect_csv(out / "scores.csv", spc, r.mspc, r.w, poisoned.is_backdoor);
    save_mask(r.mask, out);
    write_json(out / "trace.json", trace_json(r));
    return r;
  });

  // eval
  json summary = stage("eval", log, [&] {
    const auto labels = as_labels(poisoned.is_backdoor);
    const std::span<const std::uint8_t> lab(labels);
    json s;
    s["acc"] = evaluate_acc(model, test);
    s["asr"] = evaluate_asr(model, test, trigger, poisoned.target_label);
    s["selected"] = res.w.count();
    if (poisoned.poison_count() > 0 && poisoned.poison_count() < poisoned.size()) {
      const auto rz = tpr_fpr_at_zero<std::uint8_t>(res.mspc, lab);
      s["auroc"] = auroc<std::uint8_t>(res.mspc.scores, lab);
      s["auroc_spc"] = auroc<std::uint8_t>(spc.scores, lab);
      s["tpr_at_0"] = rz.tpr;
      s["fpr_at_0"] = rz.fpr;
      write_roc_csv(out / "eval" / "roc.csv", roc_curve<std::uint8_t>(res.mspc.scores, lab));
      write_roc_csv(out / "eval" / "roc_spc.csv", roc_curve<std::uint8_t>(spc.scores, lab));
      const std::size_t clean_count = poisoned.size() - poisoned.poison_count();
      json ncr_rows = json::array();
      for (double frac : get<std::vector<double>>(ev, "eval", "ncr_fractions", {0.2, 0.5, 0.8, 1.0})) {
        const auto k = static_cast<std::size_t>(frac * static_cast<double>(clean_count));
        if (k == 0) continue;
        ncr_rows.push_back({{"fraction", frac}, {"k", k}, {"ncr", ncr(bottom_k(res.mspc.scores, res.masked_kl, k), poisoned)}});
      }
      s["ncr"] = ncr_rows;
    }
    write_json(out / "eval" / "summary.json", s);
    return s;
  });

  json artifacts = json::array();
  {
    std::vector<fs::path> files = bundle_files(data_dir / "train");
    for (const auto& f : bundle_files(data_dir / "test")) files.push_back(f);
    files.push_back(data_dir / "train" / "trigger.json");
    files.push_back(data_dir / "train" / "trigger.u8");
    artifacts.push_back(artifact(out, "dataset", files));
  }
  artifacts.push_back(artifact(out, "model", {out / "model.bin"}));
  artifacts.push_back(artifact(out, "scores", {out / "scores.csv"}));
  artifacts.push_back(artifact(out, "mask", {out / "mask.u8", out / "mask_meta.json"}));
  artifacts.push_back(artifact(out, "trace", {out / "trace.json"}));
  {
    std::vector<fs::path> files{out / "eval" / "summary.json"};
    if (fs::exists(out / "eval" / "roc.csv")) {
      files.push_back(out / "eval" / "roc.csv");
      files.push_back(out / "eval" / "roc_spc.csv");
    }
    artifacts.push_back(artifact(out, "eval", files));
  }

  // optional retrain on the samples the detector kept
  if (get<bool>(ev, "eval", "retrain", false)) {
    stage("retrain", log, [&] {
      TrainConfig rcfg = train_cfg;
      if (ev.contains("retrain_train")) update_from_json(rcfg, ev.at("retrain_train"));
      validate(rcfg);
      auto [net, report] = retrain_on_clean(poisoned, res.w, rcfg, test, trigger);
      net.save(out / "retrain_model.bin");
      write_json(out / "retrain.json", {{"acc", report.acc},
                                        {"asr", report.asr},
                                        {"acc_before", summary["acc"]},
                                        {"asr_before", summary["asr"]},
                                        {"kept", res.w.size() - res.w.count()}});
    });
    artifacts.push_back(artifact(out, "retrain", {out / "retrain.json", out / "retrain_model.bin"}));
  }

  json resolved = config;
  resolved["train"] = to_json(train_cfg);
  resolved["detect"] = to_json(detect_cfg);
  json manifest = {
      {"tool", "bsift"},
      {"version", version()},
      {"config_hash", hex64(fnv1a(config.dump()))},
      {"config", resolved},
      {"seeds", {{"dataset", data_seed}, {"attack", attack_seed}, {"train", train_cfg.seed}, {"detect", detect_cfg.seed}}},
      {"versions",
       {{"bsift", version()},
        {"compiler", __VERSION__},
        {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                      std::to_string(EIGEN_MINOR_VERSION)},
        {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                              std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                              std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}},
      {"artifacts", artifacts},
      {"summary", summary},
  };
  write_json(out / "manifest.json", manifest);
  return manifest;
}

}  // namespace bsift::cli
