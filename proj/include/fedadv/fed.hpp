#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <future>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedadv/attacks.hpp"
#include "fedadv/data.hpp"
#include "fedadv/errors.hpp"
#include "fedadv/eval.hpp"
#include "fedadv/model.hpp"
#include "fedadv/optim.hpp"
#include "fedadv/rng.hpp"

namespace fedadv {

enum class PartitionScheme { iid, one_class, two_class };
enum class SharingMode { append, warmup };

inline const char* to_string(PartitionScheme s) noexcept {
  switch (s) {
    case PartitionScheme::iid: return "iid";
    case PartitionScheme::one_class: return "one_class";
    case PartitionScheme::two_class: return "two_class";
  }
  return "?";
}

inline const char* to_string(SharingMode m) noexcept {
  return m == SharingMode::append ? "append" : "warmup";
}

struct SharingConfig {
  bool enabled = false;
  std::size_t reserve_per_class = 1000;
  std::size_t sample_per_class = 500;
  SharingMode mode = SharingMode::append;
  std::size_t warmup_epochs = 1; // server-side epochs on the shared set (warmup mode)
};

struct PartitionSpec {
  std::size_t clients = 1;
  PartitionScheme scheme = PartitionScheme::iid;
  Real two_class_skew = 0;
  SharingConfig sharing;
};

// Everything one client needs to train locally.
struct TrainingConfig {
  std::size_t local_epochs = 1;
  std::size_t batch_size = 32;
  OptimizerState optimizer;
  AttackConfig pgd;      // inner maximizer; pgd by default, fgsm/bim allowed
  AugmentConfig augment; // adv_ratio, noise copies, flip/crop
  Real label_smoothing = static_cast<Real>(0.1);
  bool precompute_adversarial = false;
};

enum class ModelKind { mlp, conv };

struct ModelConfig {
  ModelKind kind = ModelKind::mlp;
  std::vector<std::size_t> hidden{128, 64};
  std::size_t conv_width = 8;
};

enum class DataSource { blobs, images, cifar10 };

struct DataConfig {
  DataSource source = DataSource::blobs;
  std::size_t classes = 4;
  std::size_t dim = 16;
  std::size_t train_per_class = 400;
  std::size_t test_per_class = 200;
  Real spread = static_cast<Real>(0.1);
  ImageSynthSpec images;
  std::string cifar_dir; // empty: $FEDADV_DATA_DIR/cifar-10-batches-bin
  std::size_t downsample = 1;
  std::size_t max_train = 0; // 0 = all
  std::size_t max_test = 0;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string description;
  ModelConfig model;
  DataConfig data;
  PartitionSpec partition;
  std::size_t rounds = 1;
  TrainingConfig train;
  EvalSettings eval;
  std::size_t eval_every = 0; // 0: only the final model is evaluated
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const {
    if (partition.clients < 1) throw ConfigError("partition.clients must be >= 1");
    if (rounds < 1) throw ConfigError("rounds must be >= 1");
    if (train.local_epochs < 1) throw ConfigError("train.local_epochs must be >= 1");
    if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    if (!(train.label_smoothing >= 0 && train.label_smoothing < 1)) {
      throw ConfigError("train.label_smoothing must be in [0,1)");
    }
    train.optimizer.validate();
    train.augment.validate();
    if (train.augment.adv_ratio > 0) {
      if (!is_linf_family(train.pgd.family)) throw ConfigError("train.pgd.family must be fgsm, bim or pgd");
      train.pgd.validate();
    }
    for (const auto& a : eval.attacks) a.validate();
    if (partition.scheme == PartitionScheme::one_class && partition.clients != data.classes) {
      throw ConfigError("partition.clients must equal data.classes for one_class");
    }
    if (partition.scheme == PartitionScheme::two_class && 2 * partition.clients < data.classes) {
      throw ConfigError("partition.clients too small for two_class (2K < N)");
    }
    if (partition.sharing.enabled &&
        partition.sharing.sample_per_class > partition.sharing.reserve_per_class) {
      throw ConfigError("partition.sharing.sample_per_class exceeds reserve_per_class");
    }
    if (!(partition.two_class_skew >= 0 && partition.two_class_skew < 1)) {
      throw ConfigError("partition.two_class_skew must be in [0,1)");
    }
  }
};

inline ModelSpec resolve_model(const ModelConfig& cfg, const Dataset& data) {
  if (cfg.kind == ModelKind::conv) {
    if (!data.image_shaped()) throw ConfigError("model.kind=conv needs image-shaped data");
    return ModelSpec::small_conv(data.image, data.num_classes, cfg.conv_width);
  }
  ModelSpec spec = ModelSpec::mlp(data.dim(), cfg.hidden, data.num_classes);
  spec.input = data.image;
  return spec;
}

namespace detail {

// First `train` examples of every class go to train, the next `test` to test.
inline TrainTest split_per_class(const Dataset& ds, std::size_t train, std::size_t test) {
  IndexList tr, te;
  for (const auto& cls : ds.indices_by_class()) {
    for (std::size_t i = 0; i < cls.size(); ++i) (i < train ? tr : te).push_back(cls[i]);
    (void)test;
  }
  std::sort(tr.begin(), tr.end());
  std::sort(te.begin(), te.end());
  return {ds.subset(tr), ds.subset(te)};
}

} // namespace detail

inline TrainTest load_data(const DataConfig& cfg, std::uint64_t seed) {
  TrainTest tt;
  const std::uint64_t data_seed = derive_seed(seed, Stream::data);
  switch (cfg.source) {
    case DataSource::blobs: {
      const Dataset all = synth_blobs(cfg.classes, cfg.dim, cfg.train_per_class + cfg.test_per_class,
                                      cfg.spread, data_seed);
      tt = detail::split_per_class(all, cfg.train_per_class, cfg.test_per_class);
      break;
    }
    case DataSource::images: {
      ImageSynthSpec s = cfg.images;
      s.classes = cfg.classes;
      s.per_class = cfg.train_per_class + cfg.test_per_class;
      s.seed = data_seed;
      tt = detail::split_per_class(synth_images(s), cfg.train_per_class, cfg.test_per_class);
      break;
    }
    case DataSource::cifar10: {
      std::filesystem::path dir = cfg.cifar_dir;
      if (dir.empty()) {
        const char* env = std::getenv("FEDADV_DATA_DIR");
        if (!env) throw ConfigError("data.cifar_dir unset and FEDADV_DATA_DIR not defined");
        dir = std::filesystem::path(env) / "cifar-10-batches-bin";
      }
      tt = load_cifar10(dir);
      if (cfg.downsample > 1) {
        tt.train = downsample(tt.train, cfg.downsample);
        tt.test = downsample(tt.test, cfg.downsample);
      }
      break;
    }
  }
  tt.train = limit_examples(tt.train, cfg.max_train);
  tt.test = limit_examples(tt.test, cfg.max_test);
  return tt;
}

// ---------------------------------------------------------------------------
// Local adversarial training.

struct LocalTrainResult {
  ModelParams params;
  std::vector<Real> epoch_losses;
  Real mean_loss = 0;
};

// Augmented view of one minibatch: PGD examples are crafted against `current`.
inline Dataset augmented_batch(const ModelSpec& spec, const ModelParams& current,
                               const Dataset& batch, const TrainingConfig& cfg,
                               std::uint64_t seed) {
  const NetworkClassifier model(spec, current);
  return augment(batch, cfg.augment.adv_ratio > 0 ? &model : nullptr, cfg.pgd, cfg.augment, seed);
}

// One optimizer step on an already-augmented batch.
inline Real train_step(const ModelSpec& spec, ModelParams& params, const Dataset& view,
                       Real label_smoothing, OptimizerState& opt, Real lr) {
  const Tensor targets = soft_labels(view.labels, label_smoothing, spec.num_classes);
  const LossAndGrad lg = loss_and_grad(spec, params, view.inputs, targets);
  sgd_step(params, lg.grad, opt, lr);
  return lg.loss;
}

// Runs `epochs` epochs starting at global epoch index `first_epoch` (which
// drives the learning-rate schedule and the per-epoch seeds). `theta` is not
// modified; `opt` carries momentum across calls.
inline LocalTrainResult local_adv_train(const ModelSpec& spec, const ModelParams& theta,
                                        const Dataset& data, const TrainingConfig& cfg,
                                        OptimizerState& opt, std::size_t epochs,
                                        std::size_t first_epoch, std::uint64_t client_seed) {
  if (theta.size() != spec.num_params()) throw DimensionError("local_adv_train: params do not match spec");
  data.validate();
  LocalTrainResult out{theta, {}, 0};
  ModelParams& params = out.params;
  const std::size_t m = data.size();
  for (std::size_t e = 0; e < epochs; ++e) {
    const std::size_t epoch = first_epoch + e;
    const Real lr = lr_schedule(static_cast<int>(epoch), opt.base_lr, opt.milestones);
    IndexList order(m);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(client_seed, Stream::shuffle, {epoch}));
    std::shuffle(order.begin(), order.end(), rng);

    Dataset adv_pool;
    if (cfg.precompute_adversarial && cfg.augment.adv_ratio > 0) {
      const NetworkClassifier model(spec, params);
      AttackConfig pc = cfg.pgd;
      pc.seed = derive_seed(client_seed, Stream::attack, {epoch});
      adv_pool = data;
      adv_pool.inputs = run_attack(model, data.inputs, data.labels, pc).perturbed;
      adv_pool.provenance.assign(m, Provenance::adversarial);
    }

    Real loss_sum = 0;
    std::size_t steps = 0;
    for (std::size_t start = 0, b = 0; start < m; start += cfg.batch_size, ++b) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, m - start));
      const Dataset batch = data.subset(idx);
      const std::uint64_t batch_seed = derive_seed(client_seed, Stream::augment, {epoch, b});
      Dataset view;
      if (cfg.precompute_adversarial && cfg.augment.adv_ratio > 0) {
        TrainingConfig no_adv = cfg;
        no_adv.augment.adv_ratio = 0;
        view = augmented_batch(spec, params, batch, no_adv, batch_seed);
        Rng pick_rng(derive_seed(batch_seed, {6}));
        IndexList pick = detail::sample_indices(idx.size(), cfg.augment.adv_ratio, pick_rng);
        for (auto& p : pick) p = idx[p];
        view = concat(view, adv_pool.subset(pick));
      } else {
        view = augmented_batch(spec, params, batch, cfg, batch_seed);
      }
      try {
        loss_sum += train_step(spec, params, view, cfg.label_smoothing, opt, lr);
      } catch (const NumericError& e) {
        throw NumericError(std::string("epoch ") + std::to_string(epoch) + ": " + e.what());
      }
      ++steps;
    }
    out.epoch_losses.push_back(steps ? loss_sum / static_cast<Real>(steps) : Real{0});
  }
  if (!out.epoch_losses.empty()) {
    Real s = 0;
    for (Real l : out.epoch_losses) s += l;
    out.mean_loss = s / static_cast<Real>(out.epoch_losses.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fusion.

// theta = sum_k (|D_k| / |D|) theta_k
inline ModelParams fedavg(std::span<const ModelParams> params, std::span<const std::size_t> sizes) {
  if (params.empty()) throw FusionError("fedavg: no client parameters");
  if (params.size() != sizes.size()) throw FusionError("fedavg: params/sizes count mismatch");
  const std::size_t p = params.front().size();
  std::size_t total = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].size() != p) {
      throw FusionError("fedavg: client " + std::to_string(k) + " has " +
                        std::to_string(params[k].size()) + " parameters, expected " + std::to_string(p));
    }
    if (sizes[k] == 0) throw FusionError("fedavg: client " + std::to_string(k) + " has size 0");
    total += sizes[k];
  }
  if (std::all_of(params.begin(), params.end(), [&](const ModelParams& q) { return q == params.front(); })) {
    return params.front();
  }
  ModelParams out{std::vector<Real>(p, Real{0})};
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Real w = static_cast<Real>(sizes[k]) / static_cast<Real>(total);
    for (std::size_t i = 0; i < p; ++i) out.values[i] += w * params[k].values[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rounds.

struct ClientState {
  std::size_t id = 0;
  Dataset data;
  OptimizerState optimizer;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return data.size(); }
};

struct RoundRecord {
  std::size_t round = 0;
  std::vector<Real> client_losses;
  std::vector<std::size_t> client_sizes;
  std::optional<Real> natural_accuracy;
  std::map<std::string, Real> robust_accuracy;
  double duration_seconds = 0; // wall clock; kept out of the deterministic log

  friend bool operator==(const RoundRecord& a, const RoundRecord& b) {
    return a.round == b.round && a.client_losses == b.client_losses &&
           a.client_sizes == b.client_sizes && a.natural_accuracy == b.natural_accuracy &&
           a.robust_accuracy == b.robust_accuracy;
  }
};

inline void to_json(nlohmann::json& j, const RoundRecord& r) {
  j = nlohmann::json{{"round", r.round}, {"client_losses", r.client_losses}, {"client_sizes", r.client_sizes}};
  j["natural_accuracy"] = r.natural_accuracy ? nlohmann::json(*r.natural_accuracy) : nlohmann::json(nullptr);
  j["robust_accuracy"] = r.robust_accuracy;
}

inline void from_json(const nlohmann::json& j, RoundRecord& r) {
  j.at("round").get_to(r.round);
  r.client_losses = j.at("client_losses").get<std::vector<Real>>();
  j.at("client_sizes").get_to(r.client_sizes);
  if (j.at("natural_accuracy").is_null()) {
    r.natural_accuracy.reset();
  } else {
    r.natural_accuracy = j.at("natural_accuracy").get<Real>();
  }
  r.robust_accuracy = j.at("robust_accuracy").get<std::map<std::string, Real>>();
}

inline std::uint64_t client_seed(std::uint64_t master, std::size_t client) {
  return derive_seed(master, {0xC11E47ULL, client});
}

struct RoundOutcome {
  ModelParams params;
  RoundRecord record;
};

// Broadcast -> independent local training from the same snapshot -> FedAvg.
// Any client failure aborts the round before fusion.
inline RoundOutcome run_round(const ModelSpec& spec, const ModelParams& global,
                              std::vector<ClientState>& clients, const TrainingConfig& cfg,
                              std::size_t round, std::size_t threads = 1) {
  if (clients.empty()) throw ConfigError("run_round: no clients");
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t k_total = clients.size();
  std::vector<LocalTrainResult> results(k_total);
  auto train_one = [&](std::size_t k) {
    try {
      results[k] = local_adv_train(spec, global, clients[k].data, cfg, clients[k].optimizer,
                                   cfg.local_epochs, round * cfg.local_epochs, clients[k].seed);
    } catch (const ClientError&) {
      throw;
    } catch (const Error& e) {
      throw ClientError(clients[k].id, e.what());
    }
  };
  if (threads <= 1 || k_total == 1) {
    for (std::size_t k = 0; k < k_total; ++k) train_one(k);
  } else {
    for (std::size_t base = 0; base < k_total; base += threads) {
      std::vector<std::future<void>> jobs;
      for (std::size_t k = base; k < std::min(k_total, base + threads); ++k) {
        jobs.push_back(std::async(std::launch::async, train_one, k));
      }
      for (auto& j : jobs) j.get();
    }
  }
  std::vector<ModelParams> locals;
  std::vector<std::size_t> sizes;
  RoundOutcome out;
  out.record.round = round;
  for (std::size_t k = 0; k < k_total; ++k) {
    locals.push_back(std::move(results[k].params));
    sizes.push_back(clients[k].size());
    out.record.client_losses.push_back(results[k].mean_loss);
    out.record.client_sizes.push_back(clients[k].size());
  }
  out.params = fedavg(locals, sizes);
  out.record.duration_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// Builds client datasets: optional shared subset, then the partition scheme.
struct ClientSetup {
  std::vector<ClientState> clients;
  std::optional<SharedSplit> sharing;
  std::vector<IndexList> partition; // indices into the (remainder of the) train set
};

inline ClientSetup setup_clients(const Dataset& train, const ExperimentConfig& cfg) {
  ClientSetup setup;
  const Dataset* pool = &train;
  if (cfg.partition.sharing.enabled) {
    setup.sharing = build_shared_subset(train, cfg.partition.sharing.reserve_per_class,
                                        cfg.partition.sharing.sample_per_class,
                                        derive_seed(cfg.seed, Stream::shared));
    pool = &setup.sharing->remainder;
  }
  const std::uint64_t pseed = derive_seed(cfg.seed, Stream::partition);
  switch (cfg.partition.scheme) {
    case PartitionScheme::iid:
      setup.partition = partition_iid_indices(*pool, cfg.partition.clients, pseed);
      break;
    case PartitionScheme::one_class:
      setup.partition = partition_one_class_indices(*pool, cfg.partition.clients, pseed);
      break;
    case PartitionScheme::two_class:
      setup.partition = partition_two_class_indices(*pool, cfg.partition.clients, pseed,
                                                    cfg.partition.two_class_skew);
      break;
  }
  for (std::size_t k = 0; k < setup.partition.size(); ++k) {
    ClientState c;
    c.id = k;
    c.data = pool->subset(setup.partition[k]);
    if (setup.sharing && cfg.partition.sharing.mode == SharingMode::append) {
      c.data = concat(c.data, setup.sharing->shared);
    }
    c.optimizer = cfg.train.optimizer;
    c.optimizer.velocity.clear();
    c.seed = client_seed(cfg.seed, k);
    setup.clients.push_back(std::move(c));
  }
  return setup;
}

struct ExperimentResult {
  ModelSpec spec;
  ModelParams initial;
  ModelParams final_params;
  std::vector<RoundRecord> records;
  EvalReport report;
};

// Called after each round with the fused parameters.
using RoundObserver = std::function<void(const RoundRecord&, const ModelParams&)>;

inline ModelParams initial_params(const ModelSpec& spec, std::uint64_t master_seed) {
  return ModelParams::init(spec, derive_seed(master_seed, Stream::init));
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const TrainTest& data,
                                       const RoundObserver& observer = {}) {
  cfg.validate();
  data.train.validate();
  data.test.validate();
  ExperimentResult res;
  res.spec = resolve_model(cfg.model, data.train);
  res.initial = initial_params(res.spec, cfg.seed);
  ClientSetup setup = setup_clients(data.train, cfg);
  ModelParams global = res.initial;

  if (setup.sharing && cfg.partition.sharing.mode == SharingMode::warmup &&
      setup.sharing->shared.size() > 0) {
    OptimizerState opt = cfg.train.optimizer;
    opt.velocity.clear();
    global = local_adv_train(res.spec, global, setup.sharing->shared, cfg.train, opt,
                             cfg.partition.sharing.warmup_epochs, 0,
                             derive_seed(cfg.seed, Stream::shared, {1}))
                 .params;
  }

  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    RoundOutcome out = run_round(res.spec, global, setup.clients, cfg.train, t, cfg.threads);
    global = std::move(out.params);
    const bool last = t + 1 == cfg.rounds;
    if (cfg.eval_every > 0 && ((t + 1) % cfg.eval_every == 0 || last)) {
      const EvalReport rep = evaluate(res.spec, global, data.test, cfg.eval,
                                      derive_seed(cfg.seed, Stream::eval, {t}), cfg.name);
      out.record.natural_accuracy = rep.natural;
      out.record.robust_accuracy = rep.robust;
    }
    if (observer) observer(out.record, global);
    res.records.push_back(std::move(out.record));
  }
  res.final_params = std::move(global);
  res.report = evaluate(res.spec, res.final_params, data.test, cfg.eval,
                        derive_seed(cfg.seed, Stream::eval, {0xF1A1ULL}), cfg.name);
  return res;
}

// Single-client training with no orchestration: `epochs` consecutive epochs
// with one persistent optimizer, seeded as client 0.
inline ModelParams train_centralized(const ModelSpec& spec, const ModelParams& theta0,
                                     const Dataset& data, const TrainingConfig& cfg,
                                     std::size_t epochs, std::uint64_t master_seed) {
  OptimizerState opt = cfg.optimizer;
  opt.velocity.clear();
  return local_adv_train(spec, theta0, data, cfg, opt, epochs, 0, client_seed(master_seed, 0)).params;
}

} // namespace fedadv
