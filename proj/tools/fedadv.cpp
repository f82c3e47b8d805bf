#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedadv/config.hpp"

namespace fs = std::filesystem;
using namespace fedadv;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

#ifndef FEDADV_DEFAULT_PRESET_DIR
#define FEDADV_DEFAULT_PRESET_DIR "presets"
#endif

fs::path preset_dir() {
  if (const char* env = std::getenv("FEDADV_PRESET_DIR")) return env;
  return FEDADV_DEFAULT_PRESET_DIR;
}

struct ConfigSource {
  std::string config_path;
  std::string preset;
  std::vector<std::string> overrides;
  std::size_t threads = 0;

  void add_options(CLI::App* cmd) {
    auto* cfg = cmd->add_option("-c,--config", config_path, "Experiment config (JSON)");
    auto* pre = cmd->add_option("-p,--preset", preset, "Name of a shipped preset");
    cfg->excludes(pre);
    cmd->add_option("-s,--set", overrides, "Override a config value, e.g. --set train.pgd.epsilon=8/255")
        ->allow_extra_args(false);
    cmd->add_option("-j,--threads", threads, "Cap on worker threads (0: use the config value)");
  }

  // What was asked for, as written on the command line.
  std::string label() const { return preset.empty() ? config_path : "preset:" + preset; }

  fs::path file() const {
    if (!preset.empty()) return preset_dir() / (preset + ".json");
    if (config_path.empty()) throw ConfigError("one of --config or --preset is required");
    return config_path;
  }

  ExperimentConfig load() const {
    ExperimentConfig cfg = load_config(file(), overrides);
    if (threads > 0) cfg.threads = threads;
    return cfg;
  }
};

std::string round_name(std::size_t round) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "round_%04zu", round);
  return buf;
}

void append_line(const fs::path& file, const std::string& line) {
  std::ofstream out(file, std::ios::app | std::ios::binary);
  if (!out) throw IoError("cannot write " + file.string());
  out << line << '\n';
}

json histogram_json(const Dataset& d) { return d.class_counts(); }

std::string histogram_row(const std::string& name, const Dataset& d) {
  std::ostringstream s;
  s << std::left << std::setw(10) << name << std::right << std::setw(7) << d.size();
  for (std::size_t c : d.class_counts()) s << std::setw(7) << c;
  return s.str();
}

std::string histogram_header(std::size_t classes) {
  std::ostringstream s;
  s << std::left << std::setw(10) << "part" << std::right << std::setw(7) << "total";
  for (std::size_t c = 0; c < classes; ++c) s << std::setw(7) << ("c" + std::to_string(c));
  return s.str();
}

json seeds_json(const ExperimentConfig& cfg) {
  json clients = json::array();
  for (std::size_t k = 0; k < cfg.partition.clients; ++k) clients.push_back(client_seed(cfg.seed, k));
  return json{{"master", cfg.seed},
              {"data", derive_seed(cfg.seed, Stream::data)},
              {"init", derive_seed(cfg.seed, Stream::init)},
              {"partition", derive_seed(cfg.seed, Stream::partition)},
              {"shared", derive_seed(cfg.seed, Stream::shared)},
              {"clients", clients}};
}

json sharing_json(const ExperimentConfig& cfg) {
  const auto& sh = cfg.partition.sharing;
  if (!sh.enabled) return json{{"enabled", false}};
  return json{{"enabled", true},
              {"mode", to_string(sh.mode)},
              {"reserve_per_class", sh.reserve_per_class},
              {"sample_per_class", sh.sample_per_class},
              {"reserved_examples", sh.reserve_per_class * cfg.data.classes},
              {"shared_examples", sh.sample_per_class * cfg.data.classes}};
}

// ---------------------------------------------------------------------------

int cmd_run(const ConfigSource& src, const fs::path& out) {
  const ExperimentConfig cfg = src.load();
  const TrainTest data = load_data(cfg.data, cfg.seed);
  const fs::path ckpt_dir = out / "checkpoints";
  fs::create_directories(ckpt_dir);
  const fs::path rounds_log = out / "rounds.jsonl";
  const fs::path timing_log = out / "timing.jsonl";
  fs::remove(rounds_log);
  fs::remove(timing_log);

  json manifest{{"schema_version", 1},
                {"tool", "fedadv"},
                {"version", kVersion},
                {"command", "run"},
                {"config_source", src.label()},
                {"overrides", src.overrides},
                {"config", config_to_json(cfg)},
                {"fingerprint", config_fingerprint(cfg)},
                {"seeds", seeds_json(cfg)},
                {"data", {{"train_examples", data.train.size()}, {"test_examples", data.test.size()}}},
                {"sharing", sharing_json(cfg)},
                {"artifacts",
                 {{"checkpoints", "checkpoints"},
                  {"rounds_log", "rounds.jsonl"},
                  {"timing_log", "timing.jsonl"},
                  {"report", {"report.json", "report.csv", "report.txt"}}}}};
  detail::write_text(out / "manifest.json", manifest.dump(2) + "\n");

  std::cerr << "[fedadv] " << cfg.name << ": " << cfg.partition.clients << " client(s), " << cfg.rounds
            << " round(s), " << data.train.size() << " train / " << data.test.size() << " test\n";

  ModelSpec spec = resolve_model(cfg.model, data.train);
  save_checkpoint(ckpt_dir / "initial", spec, initial_params(spec, cfg.seed), 0);
  json rounds = json::array();
  const auto observer = [&](const RoundRecord& rec, const ModelParams& global) {
    save_checkpoint(ckpt_dir / round_name(rec.round + 1), spec, global, rec.round + 1);
    const json j = rec;
    append_line(rounds_log, j.dump());
    append_line(timing_log, json{{"round", rec.round}, {"seconds", rec.duration_seconds}}.dump());
    rounds.push_back(j);
    double mean_loss = 0;
    for (Real l : rec.client_losses) mean_loss += l;
    mean_loss /= static_cast<double>(std::max<std::size_t>(rec.client_losses.size(), 1));
    std::cerr << "[fedadv] round " << rec.round + 1 << "/" << cfg.rounds << "  loss " << std::fixed
              << std::setprecision(4) << mean_loss;
    if (rec.natural_accuracy) std::cerr << "  natural " << percent(*rec.natural_accuracy);
    std::cerr << "  (" << std::setprecision(1) << rec.duration_seconds << "s)\n";
  };
  ExperimentResult res = run_experiment(cfg, data, observer);
  save_checkpoint(ckpt_dir / "final", res.spec, res.final_params, cfg.rounds);

  res.report.fingerprint = config_fingerprint(cfg);
  write_report({res.report}, rounds, out);

  json sizes = json::array();
  if (!res.records.empty()) sizes = res.records.front().client_sizes;
  manifest["clients"] = {{"sizes", sizes}};
  detail::write_text(out / "manifest.json", manifest.dump(2) + "\n");

  std::cout << detail::read_text(out / "report.txt");
  return 0;
}

int cmd_partition(const ConfigSource& src, const fs::path& out) {
  const ExperimentConfig cfg = src.load();
  const TrainTest data = load_data(cfg.data, cfg.seed);
  fs::create_directories(out);
  const ClientSetup setup = setup_clients(data.train, cfg);

  std::ostringstream summary;
  summary << histogram_header(data.train.num_classes) << '\n';
  json clients = json::array();
  for (const auto& c : setup.clients) {
    char name[32];
    std::snprintf(name, sizeof name, "client_%02zu", c.id);
    save_dataset(c.data, out / name);
    summary << histogram_row(name, c.data) << '\n';
    clients.push_back({{"file", name}, {"examples", c.data.size()}, {"class_counts", histogram_json(c.data)}});
  }
  json shared = nullptr;
  if (setup.sharing) {
    save_dataset(setup.sharing->shared, out / "shared");
    summary << histogram_row("shared", setup.sharing->shared) << '\n';
    shared = {{"file", "shared"},
              {"examples", setup.sharing->shared.size()},
              {"class_counts", histogram_json(setup.sharing->shared)}};
  }
  save_dataset(data.test, out / "test");
  summary << histogram_row("test", data.test) << '\n';
  detail::write_text(out / "summary.txt", summary.str());

  const json manifest{{"schema_version", 1},
                      {"tool", "fedadv"},
                      {"version", kVersion},
                      {"command", "partition"},
                      {"config_source", src.label()},
                      {"overrides", src.overrides},
                      {"config", config_to_json(cfg)},
                      {"fingerprint", config_fingerprint(cfg)},
                      {"seeds", seeds_json(cfg)},
                      {"sharing", sharing_json(cfg)},
                      {"clients", clients},
                      {"shared", shared},
                      {"test", {{"file", "test"}, {"examples", data.test.size()}}}};
  detail::write_text(out / "manifest.json", manifest.dump(2) + "\n");
  std::cout << summary.str();
  return 0;
}

struct AttackFlags {
  std::string family = "pgd";
  std::string eps = "8/255";
  std::string step = "2/255";
  int iters = 7;
  std::uint64_t seed = 0;
  std::string cw_weight = "1";
  int cw_steps = 100;
  std::string cw_lr = "0.01";
  std::string overshoot = "0.02";
  std::string sigma = "0.1";

  void add_options(CLI::App* cmd) {
    cmd->add_option("--family", family, "fgsm, bim, pgd, cw_l2, deepfool or gaussian")->capture_default_str();
    cmd->add_option("--eps", eps, "L-inf budget (fractions like 8/255 accepted)")->capture_default_str();
    cmd->add_option("--step", step, "Step size for bim/pgd")->capture_default_str();
    cmd->add_option("--iters", iters, "Iterations for bim/pgd")->capture_default_str();
    cmd->add_option("--seed", seed, "Attack seed")->capture_default_str();
    cmd->add_option("--cw-weight", cw_weight, "C&W trade-off constant")->capture_default_str();
    cmd->add_option("--cw-steps", cw_steps, "C&W optimizer steps")->capture_default_str();
    cmd->add_option("--cw-lr", cw_lr, "C&W learning rate")->capture_default_str();
    cmd->add_option("--overshoot", overshoot, "DeepFool overshoot")->capture_default_str();
    cmd->add_option("--sigma", sigma, "Gaussian attack standard deviation")->capture_default_str();
  }

  AttackConfig to_config() const {
    AttackConfig a;
    const auto fam = parse_attack_family(family);
    if (!fam) throw ConfigError("--family: unknown attack '" + family + "'");
    a.family = *fam;
    a.epsilon = parse_real(eps, "--eps");
    a.step = parse_real(step, "--step");
    a.iterations = iters;
    a.seed = seed;
    a.cw_weight = parse_real(cw_weight, "--cw-weight");
    a.cw_steps = cw_steps;
    a.cw_lr = parse_real(cw_lr, "--cw-lr");
    a.overshoot = parse_real(overshoot, "--overshoot");
    a.noise_sigma = parse_real(sigma, "--sigma");
    a.validate();
    return a;
  }
};

int cmd_attack(const std::string& checkpoint, const std::string& dataset, const fs::path& out,
               const AttackFlags& flags) {
  const AttackConfig attack = flags.to_config();
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset data = load_dataset(dataset);
  data.validate();
  if (data.dim() != ck.spec.input_dim()) {
    throw ConfigError("--dataset: examples have " + std::to_string(data.dim()) + " features, model expects " +
                      std::to_string(ck.spec.input_dim()));
  }
  fs::create_directories(out);
  const NetworkClassifier model(ck.spec, ck.params);

  Dataset adv = data;
  std::vector<std::uint8_t> flagged(data.size(), 0);
  for (std::size_t start = 0, batch = 0; start < data.size(); start += kEvalBatch, ++batch) {
    IndexList idx;
    for (std::size_t i = start; i < std::min(data.size(), start + kEvalBatch); ++i) idx.push_back(i);
    const Dataset part = data.subset(idx);
    AttackConfig cfg = attack;
    cfg.seed = derive_seed(attack.seed, Stream::attack, {batch});
    Tensor x;
    try {
      x = run_attack(model, part.inputs, part.labels, cfg).perturbed;
    } catch (const NumericError&) {
      x = part.inputs;
      for (std::size_t r = 0; r < part.size(); ++r) {
        const IndexList one{r};
        const Dataset single = part.subset(one);
        try {
          const AdvBatch b = run_attack(model, single.inputs, single.labels, cfg);
          std::copy(b.perturbed.row(0).begin(), b.perturbed.row(0).end(), x.row(r).begin());
        } catch (const NumericError&) {
          flagged[start + r] = 1;
        }
      }
    }
    for (std::size_t r = 0; r < part.size(); ++r) {
      std::copy(x.row(r).begin(), x.row(r).end(), adv.inputs.row(start + r).begin());
      adv.provenance[start + r] = Provenance::adversarial;
    }
  }
  save_dataset(adv, out / "adversarial");

  const auto clean = predict(ck.spec, ck.params, data.inputs);
  const auto after = predict(ck.spec, ck.params, adv.inputs);
  std::ostringstream csv;
  csv << "index,label,clean_pred,adv_pred,success,linf,l2,flagged\n";
  csv << std::setprecision(17);
  std::size_t successes = 0;
  double max_linf = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    double linf = 0, l2 = 0;
    const auto a = data.inputs.row(i);
    const auto b = adv.inputs.row(i);
    for (std::size_t j = 0; j < a.size(); ++j) {
      const double d = static_cast<double>(b[j]) - static_cast<double>(a[j]);
      linf = std::max(linf, std::abs(d));
      l2 += d * d;
    }
    l2 = std::sqrt(l2);
    const bool success = after[i] != data.labels[i];
    successes += success;
    max_linf = std::max(max_linf, linf);
    csv << i << ',' << data.labels[i] << ',' << clean[i] << ',' << after[i] << ',' << int(success) << ','
        << linf << ',' << l2 << ',' << int(flagged[i]) << '\n';
  }
  detail::write_text(out / "attack.csv", csv.str());
  const json summary{{"schema_version", 1},
                     {"version", kVersion},
                     {"checkpoint", checkpoint},
                     {"dataset", dataset},
                     {"attack", attack_to_json(attack)},
                     {"examples", data.size()},
                     {"successes", successes},
                     {"success_rate", static_cast<double>(successes) / static_cast<double>(data.size())},
                     {"flagged", std::count(flagged.begin(), flagged.end(), 1)},
                     {"max_linf", max_linf}};
  detail::write_text(out / "attack.json", summary.dump(2) + "\n");
  std::cout << to_string(attack.family) << ": " << successes << "/" << data.size() << " misclassified ("
            << percent(summary["success_rate"].get<double>()) << "%), max L-inf " << max_linf << '\n';
  return 0;
}

struct EvalFlags {
  std::vector<std::string> attacks;
  std::string eps = "8/255";
  std::string noise_sigma;
  std::string noise_mu = "0";
  bool noise_fgsm_only = false;
  std::size_t max_examples = 0;
  std::uint64_t seed = 0;
  std::string regime = "eval";

  void add_options(CLI::App* cmd) {
    cmd->add_option("-a,--attacks", attacks, "Attack families to run (default: none, natural accuracy only)")
        ->delimiter(',');
    cmd->add_option("--eps", eps, "L-inf budget for fgsm/bim/pgd")->capture_default_str();
    cmd->add_option("--noise-sigma", noise_sigma, "Enable test-time Gaussian noise with this standard deviation");
    cmd->add_option("--noise-mu", noise_mu, "Mean of the test-time noise")->capture_default_str();
    cmd->add_flag("--noise-fgsm-only", noise_fgsm_only, "Apply test-time noise to FGSM columns only");
    cmd->add_option("--max-examples", max_examples, "Evaluate only the first N examples (0: all)");
    cmd->add_option("--seed", seed, "Evaluation seed")->capture_default_str();
    cmd->add_option("--regime", regime, "Row label in the report")->capture_default_str();
  }

  EvalSettings to_settings() const {
    EvalSettings s;
    const Real e = parse_real(eps, "--eps");
    for (const auto& name : attacks) {
      const auto fam = parse_attack_family(name);
      if (!fam) throw ConfigError("--attacks: unknown attack '" + name + "'");
      AttackConfig a;
      a.family = *fam;
      a.epsilon = e;
      s.attacks.push_back(a);
    }
    if (!noise_sigma.empty()) {
      s.test_noise = true;
      s.noise_sigma = parse_real(noise_sigma, "--noise-sigma");
      s.noise_mu = parse_real(noise_mu, "--noise-mu");
    }
    s.noise_all_attacks = !noise_fgsm_only;
    s.max_examples = max_examples;
    return s;
  }
};

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const fs::path& out,
             const EvalFlags& flags) {
  const EvalSettings settings = flags.to_settings();
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset data = load_dataset(dataset);
  if (data.dim() != ck.spec.input_dim()) {
    throw ConfigError("--dataset: examples have " + std::to_string(data.dim()) + " features, model expects " +
                      std::to_string(ck.spec.input_dim()));
  }
  const EvalReport rep = evaluate(ck.spec, ck.params, data, settings, flags.seed, flags.regime);
  write_report({rep}, json::array(), out);
  std::cout << detail::read_text(out / "report.txt");
  return 0;
}

int cmd_presets() {
  std::vector<fs::path> files;
  const fs::path dir = preset_dir();
  if (!fs::is_directory(dir)) throw ConfigError("preset directory not found: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const ExperimentConfig c = load_config(f);
    std::cout << std::left << std::setw(28) << f.stem().string() << c.description << '\n';
  }
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated adversarial training experiments"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  ConfigSource run_src;
  std::string run_out;
  auto* run = app.add_subcommand("run", "Train (centralized or federated), checkpoint and evaluate");
  run_src.add_options(run);
  run->add_option("-o,--out", run_out, "Output directory")->required();

  ConfigSource part_src;
  std::string part_out;
  auto* part = app.add_subcommand("partition", "Write per-client datasets and class histograms");
  part_src.add_options(part);
  part->add_option("-o,--out", part_out, "Output directory")->required();

  AttackFlags attack_flags;
  std::string attack_ckpt, attack_data, attack_out;
  auto* attack = app.add_subcommand("attack", "Perturb a dataset against a checkpoint");
  attack->add_option("--checkpoint", attack_ckpt, "Checkpoint prefix (without .json)")->required();
  attack->add_option("--dataset", attack_data, "Dataset prefix (without .json)")->required();
  attack->add_option("-o,--out", attack_out, "Output directory")->required();
  attack_flags.add_options(attack);

  EvalFlags eval_flags;
  std::string eval_ckpt, eval_data, eval_out;
  auto* eval = app.add_subcommand("eval", "Natural and robust accuracy of a checkpoint");
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint prefix (without .json)")->required();
  eval->add_option("--dataset", eval_data, "Dataset prefix (without .json)")->required();
  eval->add_option("-o,--out", eval_out, "Output directory")->required();
  eval_flags.add_options(eval);

  auto* presets = app.add_subcommand("presets", "List shipped presets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (run->parsed()) return cmd_run(run_src, run_out);
    if (part->parsed()) return cmd_partition(part_src, part_out);
    if (attack->parsed()) return cmd_attack(attack_ckpt, attack_data, attack_out, attack_flags);
    if (eval->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_out, eval_flags);
    if (presets->parsed()) return cmd_presets();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitRuntime;
}
