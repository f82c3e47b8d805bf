#pragma once

#include <array>
#include <charconv>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedadv/fed.hpp"

namespace fedadv {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kCheckpointSchemaVersion = 1;

using nlohmann::json;

// Parses "0.25", "8/255" or "1e-3". Throws ConfigError naming `field`.
inline Real parse_real(std::string_view text, const std::string& field) {
  auto number = [&](std::string_view s) {
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
    double v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size()) {
      throw ConfigError(field + ": cannot parse '" + std::string(text) + "' as a number");
    }
    return v;
  };
  const auto slash = text.find('/');
  if (slash == std::string_view::npos) return static_cast<Real>(number(text));
  const double den = number(text.substr(slash + 1));
  if (den == 0) throw ConfigError(field + ": zero denominator in '" + std::string(text) + "'");
  return static_cast<Real>(number(text.substr(0, slash)) / den);
}

namespace detail {

// Reads one JSON object, remembering which keys were consumed so that
// unknown (misspelled) keys can be reported.
class FieldReader {
public:
  FieldReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const json* child(const std::string& key) {
    return has(key) ? &j_.at(key) : nullptr;
  }

  void real(const std::string& key, Real& out) {
    if (const json* v = child(key)) out = to_real(*v, field(key));
  }

  template <class Int>
  void integer(const std::string& key, Int& out) {
    if (const json* v = child(key)) out = to_int<Int>(*v, field(key));
  }

  void boolean(const std::string& key, bool& out) {
    if (const json* v = child(key)) {
      if (!v->is_boolean()) throw ConfigError(field(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }

  void string(const std::string& key, std::string& out) {
    if (const json* v = child(key)) {
      if (!v->is_string()) throw ConfigError(field(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }

  template <class Int>
  void int_list(const std::string& key, std::vector<Int>& out) {
    if (const json* v = child(key)) {
      if (!v->is_array()) throw ConfigError(field(key) + ": expected a list");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        out.push_back(to_int<Int>((*v)[i], field(key) + "[" + std::to_string(i) + "]"));
      }
    }
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(field(key) + ": unknown key");
    }
  }

  static Real to_real(const json& v, const std::string& field) {
    if (v.is_number()) return v.get<Real>();
    if (v.is_string()) return parse_real(v.get<std::string>(), field);
    throw ConfigError(field + ": expected a number or a fraction string");
  }

  template <class Int>
  static Int to_int(const json& v, const std::string& field) {
    if (v.is_number_integer()) {
      const auto x = v.get<std::int64_t>();
      if constexpr (std::is_unsigned_v<Int>) {
        if (x < 0) throw ConfigError(field + ": must be >= 0");
      }
      return static_cast<Int>(x);
    }
    if (v.is_number_float()) {
      const double d = v.get<double>();
      if (d == static_cast<double>(static_cast<std::int64_t>(d))) return to_int<Int>(json(static_cast<std::int64_t>(d)), field);
    }
    throw ConfigError(field + ": expected an integer");
  }

private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class Enum, std::size_t N>
Enum parse_enum(const json& v, const std::string& field, const std::array<std::pair<const char*, Enum>, N>& names) {
  if (v.is_string()) {
    for (const auto& [name, value] : names) {
      if (v.get<std::string>() == name) return value;
    }
  }
  std::string allowed;
  for (const auto& [name, _] : names) allowed += std::string(allowed.empty() ? "" : ", ") + name;
  throw ConfigError(field + ": expected one of " + allowed);
}

inline constexpr std::array<std::pair<const char*, PartitionScheme>, 3> kSchemeNames{
    {{"iid", PartitionScheme::iid}, {"one_class", PartitionScheme::one_class}, {"two_class", PartitionScheme::two_class}}};
inline constexpr std::array<std::pair<const char*, SharingMode>, 2> kSharingNames{
    {{"append", SharingMode::append}, {"warmup", SharingMode::warmup}}};
inline constexpr std::array<std::pair<const char*, ModelKind>, 2> kModelNames{
    {{"mlp", ModelKind::mlp}, {"conv", ModelKind::conv}}};
inline constexpr std::array<std::pair<const char*, DataSource>, 3> kSourceNames{
    {{"blobs", DataSource::blobs}, {"images", DataSource::images}, {"cifar10", DataSource::cifar10}}};
inline constexpr std::array<std::pair<const char*, Activation>, 2> kActivationNames{
    {{"relu", Activation::relu}, {"identity", Activation::identity}}};

template <class Enum, std::size_t N>
const char* enum_name(Enum e, const std::array<std::pair<const char*, Enum>, N>& names) {
  for (const auto& [name, value] : names) {
    if (value == e) return name;
  }
  return "?";
}

} // namespace detail

// ---------------------------------------------------------------------------
// Attack configuration.

inline json attack_to_json(const AttackConfig& a) {
  return json{{"family", to_string(a.family)},
              {"epsilon", a.epsilon},
              {"step", a.step},
              {"iterations", a.iterations},
              {"cw_weight", a.cw_weight},
              {"cw_confidence", a.cw_confidence},
              {"cw_steps", a.cw_steps},
              {"cw_lr", a.cw_lr},
              {"cw_binary_search", a.cw_binary_search},
              {"overshoot", a.overshoot},
              {"max_iter", a.max_iter},
              {"noise_mu", a.noise_mu},
              {"noise_sigma", a.noise_sigma},
              {"seed", a.seed}};
}

inline AttackConfig attack_from_json(const json& j, const std::string& path,
                                     AttackFamily default_family = AttackFamily::pgd) {
  detail::FieldReader r(j, path);
  AttackConfig a;
  a.family = default_family;
  if (const json* f = r.child("family")) {
    const auto fam = f->is_string() ? parse_attack_family(f->get<std::string>()) : std::nullopt;
    if (!fam) throw ConfigError(r.field("family") + ": expected one of fgsm, bim, pgd, cw_l2, deepfool, gaussian");
    a.family = *fam;
  }
  r.real("epsilon", a.epsilon);
  r.real("step", a.step);
  r.integer("iterations", a.iterations);
  r.real("cw_weight", a.cw_weight);
  r.real("cw_confidence", a.cw_confidence);
  r.integer("cw_steps", a.cw_steps);
  r.real("cw_lr", a.cw_lr);
  r.integer("cw_binary_search", a.cw_binary_search);
  r.real("overshoot", a.overshoot);
  r.integer("max_iter", a.max_iter);
  r.real("noise_mu", a.noise_mu);
  r.real("noise_sigma", a.noise_sigma);
  r.integer("seed", a.seed);
  r.finish();
  try {
    a.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return a;
}

// ---------------------------------------------------------------------------
// Model spec.

inline json spec_to_json(const ModelSpec& s) {
  json layers = json::array();
  for (const auto& layer : s.layers) {
    if (const auto* d = std::get_if<Dense>(&layer)) {
      layers.push_back({{"type", "dense"}, {"in", d->in}, {"out", d->out}, {"activation", to_string(d->activation)}});
    } else {
      const auto& c = std::get<Conv2d>(layer);
      layers.push_back({{"type", "conv2d"},
                        {"in_channels", c.in_channels},
                        {"out_channels", c.out_channels},
                        {"kernel", c.kernel},
                        {"stride", c.stride},
                        {"padding", c.padding},
                        {"activation", to_string(c.activation)}});
    }
  }
  return json{{"input", {{"channels", s.input.channels}, {"height", s.input.height}, {"width", s.input.width}}},
              {"num_classes", s.num_classes},
              {"layers", layers}};
}

inline ModelSpec spec_from_json(const json& j, const std::string& path = "spec") {
  detail::FieldReader r(j, path);
  ModelSpec s;
  if (const json* in = r.child("input")) {
    detail::FieldReader ri(*in, r.field("input"));
    ri.integer("channels", s.input.channels);
    ri.integer("height", s.input.height);
    ri.integer("width", s.input.width);
    ri.finish();
  }
  r.integer("num_classes", s.num_classes);
  if (const json* layers = r.child("layers")) {
    if (!layers->is_array()) throw ConfigError(r.field("layers") + ": expected a list");
    for (std::size_t i = 0; i < layers->size(); ++i) {
      detail::FieldReader rl((*layers)[i], r.field("layers") + "[" + std::to_string(i) + "]");
      std::string type;
      rl.string("type", type);
      Activation act = Activation::relu;
      if (const json* a = rl.child("activation")) act = detail::parse_enum(*a, rl.field("activation"), detail::kActivationNames);
      if (type == "dense") {
        Dense d{0, 0, act};
        rl.integer("in", d.in);
        rl.integer("out", d.out);
        s.layers.emplace_back(d);
      } else if (type == "conv2d") {
        Conv2d c;
        c.activation = act;
        rl.integer("in_channels", c.in_channels);
        rl.integer("out_channels", c.out_channels);
        rl.integer("kernel", c.kernel);
        rl.integer("stride", c.stride);
        rl.integer("padding", c.padding);
        s.layers.emplace_back(c);
      } else {
        throw ConfigError(rl.field("type") + ": expected dense or conv2d");
      }
      rl.finish();
    }
  }
  r.finish();
  (void)s.layout();
  return s;
}

// ---------------------------------------------------------------------------
// Experiment configuration.

inline json config_to_json(const ExperimentConfig& c) {
  const auto& im = c.data.images;
  json attacks = json::array();
  for (const auto& a : c.eval.attacks) attacks.push_back(attack_to_json(a));
  const auto& o = c.train.optimizer;
  const auto& au = c.train.augment;
  const auto& sh = c.partition.sharing;
  return json{
      {"schema_version", kConfigSchemaVersion},
      {"name", c.name},
      {"description", c.description},
      {"seed", c.seed},
      {"rounds", c.rounds},
      {"threads", c.threads},
      {"eval_every", c.eval_every},
      {"model",
       {{"kind", detail::enum_name(c.model.kind, detail::kModelNames)},
        {"hidden", c.model.hidden},
        {"conv_width", c.model.conv_width}}},
      {"data",
       {{"source", detail::enum_name(c.data.source, detail::kSourceNames)},
        {"classes", c.data.classes},
        {"dim", c.data.dim},
        {"train_per_class", c.data.train_per_class},
        {"test_per_class", c.data.test_per_class},
        {"spread", c.data.spread},
        {"images",
         {{"side", im.side},
          {"shape_contrast", im.shape_contrast},
          {"clutter_contrast", im.clutter_contrast},
          {"clutter_bumps", im.clutter_bumps},
          {"pixel_noise", im.pixel_noise},
          {"texture_amplitude", im.texture_amplitude},
          {"max_shift", im.max_shift}}},
        {"cifar_dir", c.data.cifar_dir},
        {"downsample", c.data.downsample},
        {"max_train", c.data.max_train},
        {"max_test", c.data.max_test}}},
      {"partition",
       {{"clients", c.partition.clients},
        {"scheme", detail::enum_name(c.partition.scheme, detail::kSchemeNames)},
        {"two_class_skew", c.partition.two_class_skew},
        {"sharing",
         {{"enabled", sh.enabled},
          {"reserve_per_class", sh.reserve_per_class},
          {"sample_per_class", sh.sample_per_class},
          {"mode", detail::enum_name(sh.mode, detail::kSharingNames)},
          {"warmup_epochs", sh.warmup_epochs}}}}},
      {"train",
       {{"local_epochs", c.train.local_epochs},
        {"batch_size", c.train.batch_size},
        {"label_smoothing", c.train.label_smoothing},
        {"precompute_adversarial", c.train.precompute_adversarial},
        {"optimizer",
         {{"lr", o.base_lr}, {"momentum", o.momentum}, {"weight_decay", o.weight_decay}, {"milestones", o.milestones}}},
        {"pgd", attack_to_json(c.train.pgd)},
        {"augment",
         {{"adv_ratio", au.adv_ratio},
          {"noise_ratio", au.noise_ratio},
          {"noise_mu", au.noise_mu},
          {"noise_sigma", au.noise_sigma},
          {"flip", au.flip},
          {"crop_pad", au.crop_pad}}}}},
      {"eval",
       {{"attacks", attacks},
        {"test_noise", c.eval.test_noise},
        {"noise_mu", c.eval.noise_mu},
        {"noise_sigma", c.eval.noise_sigma},
        {"noise_all_attacks", c.eval.noise_all_attacks},
        {"max_examples", c.eval.max_examples}}}};
}

// Missing keys keep their defaults; unknown keys are errors.
inline ExperimentConfig config_from_json(const json& j) {
  using detail::FieldReader;
  ExperimentConfig c;
  FieldReader r(j, "");
  if (const json* v = r.child("schema_version")) {
    if (FieldReader::to_int<int>(*v, "schema_version") != kConfigSchemaVersion) {
      throw ConfigError("schema_version: unsupported value " + v->dump());
    }
  }
  r.string("name", c.name);
  r.string("description", c.description);
  r.integer("seed", c.seed);
  r.integer("rounds", c.rounds);
  r.integer("threads", c.threads);
  r.integer("eval_every", c.eval_every);

  if (const json* m = r.child("model")) {
    FieldReader rm(*m, "model");
    if (const json* k = rm.child("kind")) c.model.kind = detail::parse_enum(*k, "model.kind", detail::kModelNames);
    rm.int_list("hidden", c.model.hidden);
    rm.integer("conv_width", c.model.conv_width);
    rm.finish();
  }

  if (const json* d = r.child("data")) {
    FieldReader rd(*d, "data");
    if (const json* s = rd.child("source")) c.data.source = detail::parse_enum(*s, "data.source", detail::kSourceNames);
    rd.integer("classes", c.data.classes);
    rd.integer("dim", c.data.dim);
    rd.integer("train_per_class", c.data.train_per_class);
    rd.integer("test_per_class", c.data.test_per_class);
    rd.real("spread", c.data.spread);
    if (const json* im = rd.child("images")) {
      FieldReader ri(*im, "data.images");
      auto& s = c.data.images;
      ri.integer("side", s.side);
      ri.real("shape_contrast", s.shape_contrast);
      ri.real("clutter_contrast", s.clutter_contrast);
      ri.integer("clutter_bumps", s.clutter_bumps);
      ri.real("pixel_noise", s.pixel_noise);
      ri.real("texture_amplitude", s.texture_amplitude);
      ri.integer("max_shift", s.max_shift);
      ri.finish();
    }
    rd.string("cifar_dir", c.data.cifar_dir);
    rd.integer("downsample", c.data.downsample);
    rd.integer("max_train", c.data.max_train);
    rd.integer("max_test", c.data.max_test);
    rd.finish();
  }

  if (const json* p = r.child("partition")) {
    FieldReader rp(*p, "partition");
    rp.integer("clients", c.partition.clients);
    if (const json* s = rp.child("scheme")) {
      c.partition.scheme = detail::parse_enum(*s, "partition.scheme", detail::kSchemeNames);
    }
    rp.real("two_class_skew", c.partition.two_class_skew);
    if (const json* s = rp.child("sharing")) {
      FieldReader rs(*s, "partition.sharing");
      auto& sh = c.partition.sharing;
      rs.boolean("enabled", sh.enabled);
      rs.integer("reserve_per_class", sh.reserve_per_class);
      rs.integer("sample_per_class", sh.sample_per_class);
      if (const json* m = rs.child("mode")) sh.mode = detail::parse_enum(*m, "partition.sharing.mode", detail::kSharingNames);
      rs.integer("warmup_epochs", sh.warmup_epochs);
      rs.finish();
    }
    rp.finish();
  }

  if (const json* t = r.child("train")) {
    FieldReader rt(*t, "train");
    rt.integer("local_epochs", c.train.local_epochs);
    rt.integer("batch_size", c.train.batch_size);
    rt.real("label_smoothing", c.train.label_smoothing);
    rt.boolean("precompute_adversarial", c.train.precompute_adversarial);
    if (const json* o = rt.child("optimizer")) {
      FieldReader ro(*o, "train.optimizer");
      auto& opt = c.train.optimizer;
      ro.real("lr", opt.base_lr);
      ro.real("momentum", opt.momentum);
      ro.real("weight_decay", opt.weight_decay);
      ro.int_list("milestones", opt.milestones);
      ro.finish();
    }
    if (const json* a = rt.child("pgd")) c.train.pgd = attack_from_json(*a, "train.pgd");
    if (const json* a = rt.child("augment")) {
      FieldReader ra(*a, "train.augment");
      auto& au = c.train.augment;
      ra.real("adv_ratio", au.adv_ratio);
      ra.real("noise_ratio", au.noise_ratio);
      ra.real("noise_mu", au.noise_mu);
      ra.real("noise_sigma", au.noise_sigma);
      ra.boolean("flip", au.flip);
      ra.integer("crop_pad", au.crop_pad);
      ra.finish();
    }
    rt.finish();
  }

  if (const json* e = r.child("eval")) {
    FieldReader re(*e, "eval");
    if (const json* list = re.child("attacks")) {
      if (!list->is_array()) throw ConfigError("eval.attacks: expected a list");
      c.eval.attacks.clear();
      for (std::size_t i = 0; i < list->size(); ++i) {
        const json& item = (*list)[i];
        const std::string field = "eval.attacks[" + std::to_string(i) + "]";
        if (item.is_string()) {
          c.eval.attacks.push_back(attack_from_json(json{{"family", item}}, field));
        } else {
          c.eval.attacks.push_back(attack_from_json(item, field));
        }
      }
    }
    re.boolean("test_noise", c.eval.test_noise);
    re.real("noise_mu", c.eval.noise_mu);
    re.real("noise_sigma", c.eval.noise_sigma);
    re.boolean("noise_all_attacks", c.eval.noise_all_attacks);
    re.integer("max_examples", c.eval.max_examples);
    re.finish();
  }
  r.finish();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Command-line overrides: "a.b.c=value". The value is read as JSON when it
// parses (numbers, booleans, lists), otherwise as a plain string, so
// "train.pgd.epsilon=8/255" works without quoting.

inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "': expected key.path=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "': empty key segment");
    const bool last = dot == std::string::npos;
    if (node->is_array()) {
      std::size_t idx = 0;
      const auto [ptr, ec] = std::from_chars(key.data(), key.data() + key.size(), idx);
      if (ec != std::errc{} || ptr != key.data() + key.size() || idx >= node->size()) {
        throw ConfigError(path + ": '" + key + "' is not a valid list index");
      }
      node = &(*node)[idx];
    } else {
      if (node->is_null()) *node = json::object();
      if (!node->is_object()) throw ConfigError(path + ": cannot descend into a scalar");
      node = &(*node)[key];
    }
    if (last) break;
    start = dot + 1;
  }
  *node = std::move(value);
}

inline json read_json_file(const std::filesystem::path& file) {
  if (!std::filesystem::exists(file)) throw ConfigError("config file not found: " + file.string());
  const json j = json::parse(detail::read_text(file), nullptr, false);
  if (j.is_discarded()) throw ConfigError(file.string() + ": not valid JSON");
  return j;
}

inline ExperimentConfig load_config(const std::filesystem::path& file,
                                    const std::vector<std::string>& overrides = {}) {
  json j = read_json_file(file);
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

// Stable 64-bit FNV-1a of the canonical config dump, as 16 hex digits.
inline std::string config_fingerprint(const ExperimentConfig& c) {
  const std::string s = config_to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Checkpoints: <prefix>.params.bin (float64 LE) + <prefix>.json.

struct Checkpoint {
  ModelSpec spec;
  ModelParams params;
  std::size_t round = 0;
};

inline void save_checkpoint(const std::filesystem::path& prefix, const ModelSpec& spec,
                            const ModelParams& params, std::size_t round) {
  if (params.size() != spec.num_params()) throw DimensionError("checkpoint: params do not match spec");
  std::filesystem::path bin = prefix;
  bin += ".params.bin";
  std::filesystem::path meta = prefix;
  meta += ".json";
  if (!prefix.parent_path().empty()) std::filesystem::create_directories(prefix.parent_path());
  std::ofstream out(bin, std::ios::binary);
  if (!out) throw IoError("cannot write " + bin.string());
  detail::write_f64_le(out, params.values);
  if (!out) throw IoError("write failed: " + bin.string());
  const json j{{"schema_version", kCheckpointSchemaVersion},
               {"format", "fedadv-checkpoint"},
               {"dtype", "float64-le"},
               {"spec", spec_to_json(spec)},
               {"num_params", params.size()},
               {"round", round}};
  detail::write_text(meta, j.dump(1) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& prefix) {
  std::filesystem::path meta = prefix;
  meta += ".json";
  std::filesystem::path bin = prefix;
  bin += ".params.bin";
  const json j = json::parse(detail::read_text(meta), nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw IngestionError(meta.string() + ": not valid JSON");
  if (j.value("schema_version", 0) != kCheckpointSchemaVersion) {
    throw IngestionError(meta.string() + ": unsupported checkpoint schema_version");
  }
  Checkpoint c;
  try {
    c.spec = spec_from_json(j.at("spec"));
    c.round = j.at("round").get<std::size_t>();
    const auto n = j.at("num_params").get<std::size_t>();
    if (n != c.spec.num_params()) throw IngestionError(meta.string() + ": num_params disagrees with spec");
    c.params.values = detail::read_f64_le(bin, n);
  } catch (const json::exception& e) {
    throw IngestionError(meta.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw IngestionError(meta.string() + ": " + e.what());
  }
  return c;
}

} // namespace fedadv
