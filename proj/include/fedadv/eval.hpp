#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedadv/attacks.hpp"
#include "fedadv/data.hpp"
#include "fedadv/model.hpp"
#include "fedadv/rng.hpp"

namespace fedadv {

// Test-time Gaussian noise, applied after any attack.
struct NoiseConfig {
  Real mu = 0;
  Real sigma = static_cast<Real>(0.1);
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kEvalBatch = 128;

// Column name used in reports for an attack configuration.
inline std::string attack_column(AttackFamily f) {
  switch (f) {
    case AttackFamily::fgsm: return "FGSM";
    case AttackFamily::bim: return "BIM";
    case AttackFamily::pgd: return "PGD";
    case AttackFamily::cw_l2: return "C&W";
    case AttackFamily::deepfool: return "DeepFool";
    case AttackFamily::gaussian: return "Gaussian";
  }
  return "?";
}

inline Real natural_accuracy(const ModelSpec& spec, const ModelParams& params, const Dataset& test,
                             const std::optional<NoiseConfig>& noise = std::nullopt) {
  test.validate();
  std::size_t correct = 0;
  for (std::size_t start = 0, batch = 0; start < test.size(); start += kEvalBatch, ++batch) {
    IndexList idx;
    for (std::size_t i = start; i < std::min(test.size(), start + kEvalBatch); ++i) idx.push_back(i);
    const Dataset part = test.subset(idx);
    Tensor x = part.inputs;
    if (noise) x = gaussian_noise(x, noise->mu, noise->sigma, derive_seed(noise->seed, Stream::noise, {0, batch}));
    const auto pred = predict(spec, params, x);
    for (std::size_t r = 0; r < pred.size(); ++r) correct += pred[r] == part.labels[r];
  }
  return static_cast<Real>(correct) / static_cast<Real>(test.size());
}

struct RobustResult {
  Real accuracy = 0;
  std::size_t correct = 0;
  std::size_t successes = 0; // attack flipped the label away from the truth
  std::size_t flagged = 0;   // attack raised; scored from the clean prediction
};

// Crafts x' from each clean test input, optionally adds test-time noise to x',
// then classifies. The denominator is the full test set.
inline RobustResult robust_accuracy(const ModelSpec& spec, const ModelParams& params,
                                    const Dataset& test, const AttackConfig& attack,
                                    const std::optional<NoiseConfig>& noise = std::nullopt) {
  test.validate();
  attack.validate();
  const NetworkClassifier model(spec, params);
  RobustResult res;
  for (std::size_t start = 0, batch = 0; start < test.size(); start += kEvalBatch, ++batch) {
    IndexList idx;
    for (std::size_t i = start; i < std::min(test.size(), start + kEvalBatch); ++i) idx.push_back(i);
    const Dataset part = test.subset(idx);
    AttackConfig cfg = attack;
    cfg.seed = derive_seed(attack.seed, Stream::attack, {batch});
    Tensor adv;
    std::vector<std::uint8_t> usable(part.size(), 1);
    try {
      adv = run_attack(model, part.inputs, part.labels, cfg).perturbed;
    } catch (const NumericError&) {
      // Retry one example at a time; failures fall back to the clean input.
      adv = part.inputs;
      for (std::size_t r = 0; r < part.size(); ++r) {
        const IndexList one{r};
        const Dataset single = part.subset(one);
        try {
          const AdvBatch b = run_attack(model, single.inputs, single.labels, cfg);
          std::copy(b.perturbed.row(0).begin(), b.perturbed.row(0).end(), adv.row(r).begin());
        } catch (const NumericError&) {
          usable[r] = 0;
        }
      }
    }
    if (noise) adv = gaussian_noise(adv, noise->mu, noise->sigma, derive_seed(noise->seed, Stream::noise, {1, batch}));
    const auto pred = predict(spec, params, adv);
    std::vector<int> clean_pred;
    for (std::size_t r = 0; r < part.size(); ++r) {
      if (!usable[r]) {
        if (clean_pred.empty()) clean_pred = predict(spec, params, part.inputs);
        ++res.flagged;
        res.correct += clean_pred[r] == part.labels[r];
        continue;
      }
      if (pred[r] == part.labels[r]) {
        ++res.correct;
      } else {
        ++res.successes;
      }
    }
  }
  res.accuracy = static_cast<Real>(res.correct) / static_cast<Real>(test.size());
  return res;
}

struct EvalSettings {
  std::vector<AttackConfig> attacks;
  bool test_noise = false;
  Real noise_mu = 0;
  Real noise_sigma = static_cast<Real>(0.1);
  bool noise_all_attacks = true; // false: only FGSM columns see test-time noise
  std::size_t max_examples = 0;  // 0 = whole test set
};

struct EvalReport {
  std::string regime;
  Real natural = 0;
  std::map<std::string, Real> robust;
  std::size_t n_test = 0;
  std::size_t natural_correct = 0;
  std::map<std::string, std::size_t> robust_correct;
  std::map<std::string, std::size_t> successes;
  std::map<std::string, std::size_t> flagged;
  bool test_noise = false;
  Real noise_mu = 0;
  Real noise_sigma = 0;
  std::string fingerprint;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"regime", r.regime},
                     {"natural", r.natural},
                     {"robust", r.robust},
                     {"n_test", r.n_test},
                     {"natural_correct", r.natural_correct},
                     {"robust_correct", r.robust_correct},
                     {"successes", r.successes},
                     {"flagged", r.flagged},
                     {"test_noise", {{"enabled", r.test_noise}, {"mu", r.noise_mu}, {"sigma", r.noise_sigma}}},
                     {"fingerprint", r.fingerprint}};
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  j.at("regime").get_to(r.regime);
  r.natural = j.at("natural").get<Real>();
  j.at("robust").get_to(r.robust);
  j.at("n_test").get_to(r.n_test);
  j.at("natural_correct").get_to(r.natural_correct);
  j.at("robust_correct").get_to(r.robust_correct);
  j.at("successes").get_to(r.successes);
  j.at("flagged").get_to(r.flagged);
  const auto& n = j.at("test_noise");
  n.at("enabled").get_to(r.test_noise);
  r.noise_mu = n.at("mu").get<Real>();
  r.noise_sigma = n.at("sigma").get<Real>();
  j.at("fingerprint").get_to(r.fingerprint);
}

inline Dataset limit_examples(const Dataset& ds, std::size_t max_examples) {
  if (max_examples == 0 || max_examples >= ds.size()) return ds;
  IndexList idx(max_examples);
  std::iota(idx.begin(), idx.end(), 0);
  return ds.subset(idx);
}

inline EvalReport evaluate(const ModelSpec& spec, const ModelParams& params, const Dataset& full_test,
                           const EvalSettings& settings, std::uint64_t seed,
                           std::string regime = {}) {
  const Dataset test = limit_examples(full_test, settings.max_examples);
  EvalReport rep;
  rep.regime = std::move(regime);
  rep.n_test = test.size();
  rep.test_noise = settings.test_noise;
  rep.noise_mu = settings.test_noise ? settings.noise_mu : Real{0};
  rep.noise_sigma = settings.test_noise ? settings.noise_sigma : Real{0};
  std::optional<NoiseConfig> noise;
  if (settings.test_noise) noise = NoiseConfig{settings.noise_mu, settings.noise_sigma, derive_seed(seed, Stream::eval)};
  rep.natural = natural_accuracy(spec, params, test, noise);
  rep.natural_correct = static_cast<std::size_t>(std::llround(rep.natural * static_cast<Real>(test.size())));
  for (std::size_t a = 0; a < settings.attacks.size(); ++a) {
    AttackConfig cfg = settings.attacks[a];
    cfg.seed = derive_seed(seed, Stream::attack, {a, cfg.seed});
    const bool noisy = settings.test_noise &&
                       (settings.noise_all_attacks || cfg.family == AttackFamily::fgsm);
    const auto res = robust_accuracy(spec, params, test, cfg, noisy ? noise : std::nullopt);
    std::string col = attack_column(cfg.family);
    while (rep.robust.count(col)) col += "'";
    rep.robust[col] = res.accuracy;
    rep.robust_correct[col] = res.correct;
    rep.successes[col] = res.successes;
    rep.flagged[col] = res.flagged;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Report files: report.json (machine), report.csv and report.txt (human).

inline constexpr int kReportSchemaVersion = 1;

inline std::vector<std::string> report_columns(const std::vector<EvalReport>& reports) {
  std::vector<std::string> cols{"FGSM", "C&W", "DeepFool", "PGD"};
  for (const auto& r : reports) {
    for (const auto& [name, _] : r.robust) {
      if (std::find(cols.begin(), cols.end(), name) == cols.end()) cols.push_back(name);
    }
  }
  return cols;
}

inline std::string percent(Real v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", static_cast<double>(v) * 100.0);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

// `rounds` is an already-serialized list of round records (may be empty).
inline void write_report(const std::vector<EvalReport>& reports, const nlohmann::json& rounds,
                         const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  const auto cols = report_columns(reports);

  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["columns"] = cols;
  j["reports"] = reports;
  j["rounds"] = rounds.is_null() ? nlohmann::json::array() : rounds;
  detail::write_text(out_dir / "report.json", j.dump(1) + "\n");

  std::ostringstream csv;
  csv << "regime,Natural";
  for (const auto& c : cols) csv << ',' << csv_field(c);
  csv << '\n';
  for (const auto& r : reports) {
    csv << csv_field(r.regime) << ',' << percent(r.natural);
    for (const auto& c : cols) {
      auto it = r.robust.find(c);
      csv << ',' << (it == r.robust.end() ? std::string{} : percent(it->second));
    }
    csv << '\n';
  }
  detail::write_text(out_dir / "report.csv", csv.str());

  std::size_t regime_w = 6;
  for (const auto& r : reports) regime_w = std::max(regime_w, r.regime.size());
  std::ostringstream txt;
  auto pad = [](const std::string& s, std::size_t w) {
    return s.size() >= w ? s : std::string(w - s.size(), ' ') + s;
  };
  txt << std::string("Regime") + std::string(regime_w - 6, ' ') << "  " << pad("Natural", 8);
  for (const auto& c : cols) txt << "  " << pad(c, std::max<std::size_t>(c.size(), 8));
  txt << '\n';
  for (const auto& r : reports) {
    txt << r.regime << std::string(regime_w - r.regime.size(), ' ') << "  " << pad(percent(r.natural), 8);
    for (const auto& c : cols) {
      auto it = r.robust.find(c);
      txt << "  " << pad(it == r.robust.end() ? "-" : percent(it->second), std::max<std::size_t>(c.size(), 8));
    }
    txt << '\n';
  }
  detail::write_text(out_dir / "report.txt", txt.str());
}

inline std::vector<EvalReport> read_report(const std::filesystem::path& out_dir) {
  const auto j = nlohmann::json::parse(detail::read_text(out_dir / "report.json"));
  return j.at("reports").get<std::vector<EvalReport>>();
}

} // namespace fedadv
