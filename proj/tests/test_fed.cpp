#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "fedadv/fed.hpp"
#include "oracles.hpp"

using namespace fedadv;

namespace {

ExperimentConfig blob_config(std::uint64_t seed) {
  ExperimentConfig c;
  c.data.source = DataSource::blobs;
  c.data.classes = 3;
  c.data.dim = 6;
  c.data.train_per_class = 40;
  c.data.test_per_class = 20;
  c.model.hidden = {8};
  c.train.batch_size = 16;
  c.train.optimizer.base_lr = 0.05;
  c.train.optimizer.milestones = {};
  c.train.pgd.iterations = 2;
  c.eval.attacks = {AttackConfig::fgsm_default()};
  c.seed = seed;
  return c;
}

ModelParams random_params(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0, 1);
  ModelParams p{std::vector<Real>(n)};
  for (auto& v : p.values) v = d(rng);
  return p;
}

std::vector<ClientState> clients_from(const std::vector<Dataset>& parts, const TrainingConfig& cfg,
                                      std::uint64_t master) {
  std::vector<ClientState> out;
  for (std::size_t k = 0; k < parts.size(); ++k) out.push_back({k, parts[k], cfg.optimizer, client_seed(master, k)});
  return out;
}

} // namespace

TEST(LocalTrain, ZeroLearningRateKeepsParams) {
  const ExperimentConfig c = blob_config(1);
  const TrainTest tt = load_data(c.data, 1);
  const ModelSpec spec = resolve_model(c.model, tt.train);
  const ModelParams theta = initial_params(spec, 1);
  TrainingConfig cfg = c.train;
  cfg.optimizer.base_lr = 0;
  OptimizerState opt = cfg.optimizer;
  const auto res = local_adv_train(spec, theta, tt.train, cfg, opt, 3, 0, 7);
  EXPECT_EQ(res.params, theta);
  EXPECT_EQ(res.epoch_losses.size(), 3u);
}

TEST(LocalTrain, InputParamsAreNotMutated) {
  const ExperimentConfig c = blob_config(2);
  const TrainTest tt = load_data(c.data, 2);
  const ModelSpec spec = resolve_model(c.model, tt.train);
  const ModelParams theta = initial_params(spec, 2);
  const ModelParams copy = theta;
  OptimizerState opt = c.train.optimizer;
  const auto res = local_adv_train(spec, theta, tt.train, c.train, opt, 1, 0, 3);
  EXPECT_EQ(theta, copy);
  EXPECT_NE(res.params, theta);
}

TEST(LocalTrain, ErmLossMostlyDecreases) {
  std::size_t monotone_runs = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ExperimentConfig c = blob_config(seed);
    c.data.classes = 4;
    c.data.dim = 16;
    c.data.train_per_class = 100;
    const TrainTest tt = load_data(c.data, seed);
    const ModelSpec spec = resolve_model(c.model, tt.train);
    TrainingConfig cfg = c.train;
    cfg.augment.adv_ratio = 0;
    cfg.label_smoothing = 0;
    OptimizerState opt = cfg.optimizer;
    const auto res = local_adv_train(spec, initial_params(spec, seed), tt.train, cfg, opt, 5, 0, seed);
    bool ok = true;
    for (std::size_t e = 1; e < res.epoch_losses.size(); ++e) ok = ok && res.epoch_losses[e] <= res.epoch_losses[e - 1];
    monotone_runs += ok;
  }
  EXPECT_GE(monotone_runs, 4u);
}

TEST(LocalTrain, OneStepMatchesHandPipeline) {
  const ExperimentConfig c = blob_config(3);
  const TrainTest tt = load_data(c.data, 3);
  const ModelSpec spec = resolve_model(c.model, tt.train);
  const ModelParams theta = initial_params(spec, 3);
  TrainingConfig cfg = c.train;
  cfg.batch_size = tt.train.size(); // one batch per epoch
  cfg.augment.noise_ratio = 0.5;
  const std::uint64_t cs = 99;

  OptimizerState opt = cfg.optimizer;
  const auto res = local_adv_train(spec, theta, tt.train, cfg, opt, 1, 0, cs);

  IndexList order(tt.train.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(cs, Stream::shuffle, {0}));
  std::shuffle(order.begin(), order.end(), rng);
  const Dataset batch = tt.train.subset(order);
  const NetworkClassifier model(spec, theta);
  const Dataset view = augment(batch, &model, cfg.pgd, cfg.augment, derive_seed(cs, Stream::augment, {0, 0}));
  LabeledBatch lb{view.inputs, soft_labels(view.labels, cfg.label_smoothing, spec.num_classes), view.labels};
  const ModelParams g = grad_params(spec, theta, lb);
  ModelParams want = theta;
  OptimizerState hand = cfg.optimizer;
  sgd_step(want, g, hand, lr_schedule(0, hand.base_lr, hand.milestones));
  EXPECT_EQ(res.params, want);
  EXPECT_EQ(opt.velocity, hand.velocity);
}

TEST(LocalTrain, PrecomputeModeRuns) {
  ExperimentConfig c = blob_config(4);
  c.train.precompute_adversarial = true;
  const TrainTest tt = load_data(c.data, 4);
  const ModelSpec spec = resolve_model(c.model, tt.train);
  OptimizerState opt = c.train.optimizer;
  const auto res = local_adv_train(spec, initial_params(spec, 4), tt.train, c.train, opt, 2, 0, 5);
  EXPECT_TRUE(std::all_of(res.params.values.begin(), res.params.values.end(), [](Real v) { return std::isfinite(v); }));
}

TEST(FedAvg, SingleClientIsIdentity) {
  const ModelParams a = random_params(10, 1);
  const std::vector<ModelParams> ps{a};
  const std::vector<std::size_t> sizes{7};
  EXPECT_EQ(fedavg(ps, sizes), a);
}

TEST(FedAvg, EqualSizesGiveMean) {
  const ModelParams a = random_params(10, 2), b = random_params(10, 3);
  const std::vector<ModelParams> ps{a, b};
  const std::vector<std::size_t> sizes{5, 5};
  const ModelParams m = fedavg(ps, sizes);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(m.values[i], (a.values[i] + b.values[i]) / 2, 1e-12);
}

TEST(FedAvg, WeightedMean) {
  const ModelParams a = random_params(10, 4), b = random_params(10, 5);
  const std::vector<ModelParams> ps{a, b};
  const std::vector<std::size_t> sizes{1, 3};
  const ModelParams m = fedavg(ps, sizes);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(m.values[i], (a.values[i] + 3 * b.values[i]) / 4, 1e-12);
}

TEST(FedAvg, PropertiesAgainstScalarOracle) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> kd(1, 8), sd(1, 1000);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = kd(rng), n = 1 + trial % 17;
    std::vector<ModelParams> ps;
    std::vector<std::size_t> sizes;
    for (std::size_t j = 0; j < k; ++j) {
      ps.push_back(random_params(n, 1000 * trial + j));
      sizes.push_back(sd(rng));
    }
    const ModelParams m = fedavg(ps, sizes);
    const double total = std::accumulate(sizes.begin(), sizes.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      long double want = 0;
      for (std::size_t j = 0; j < k; ++j) want += static_cast<long double>(sizes[j]) * ps[j].values[i];
      EXPECT_NEAR(m.values[i], static_cast<double>(want / total), 1e-12);
    }
    // Equal vectors are a fixed point for any sizes.
    const std::vector<ModelParams> same(k, ps[0]);
    EXPECT_EQ(fedavg(same, sizes), ps[0]);
    // Consistent permutation of (params, size) pairs.
    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<ModelParams> pp;
    std::vector<std::size_t> sp;
    for (std::size_t j : perm) {
      pp.push_back(ps[j]);
      sp.push_back(sizes[j]);
    }
    const ModelParams mp = fedavg(pp, sp);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(mp.values[i], m.values[i], 1e-12);
  }
}

TEST(FedAvg, Errors) {
  const std::vector<ModelParams> ps{random_params(3, 1), random_params(4, 2)};
  const std::vector<std::size_t> sizes{1, 1};
  EXPECT_THROW((void)fedavg(ps, sizes), FusionError);
  const std::vector<ModelParams> ok{random_params(3, 1), random_params(3, 2)};
  const std::vector<std::size_t> zero{1, 0};
  EXPECT_THROW((void)fedavg(ok, zero), FusionError);
  EXPECT_THROW((void)fedavg({}, {}), FusionError);
}

TEST(RunRound, SingleClientEqualsLocalTraining) {
  const ExperimentConfig c = blob_config(7);
  const TrainTest tt = load_data(c.data, 7);
  const ModelSpec spec = resolve_model(c.model, tt.train);
  const ModelParams theta = initial_params(spec, 7);
  auto clients = clients_from({tt.train}, c.train, 7);
  const RoundOutcome out = run_round(spec, theta, clients, c.train, 0);
  OptimizerState opt = c.train.optimizer;
  const auto local = local_adv_train(spec, theta, tt.train, c.train, opt, c.train.local_epochs, 0, client_seed(7, 0));
  EXPECT_EQ(out.params, local.params);
  EXPECT_EQ(out.record.client_losses.size(), 1u);
}

TEST(RunRound, IdenticalClientsFuseToTheirCommonResult) {
  const ExperimentConfig c = blob_config(8);
  const TrainTest tt = load_data(c.data, 8);
  const ModelSpec spec = resolve_model(c.model, tt.train);
  const ModelParams theta = initial_params(spec, 8);
  std::vector<ClientState> clients;
  for (std::size_t k = 0; k < 3; ++k) clients.push_back({k, tt.train, c.train.optimizer, 1234});
  const RoundOutcome out = run_round(spec, theta, clients, c.train, 0);
  OptimizerState opt = c.train.optimizer;
  EXPECT_EQ(out.params, local_adv_train(spec, theta, tt.train, c.train, opt, 1, 0, 1234).params);
}

TEST(RunRound, TwoClientsMatchHandMean) {
  ExperimentConfig c = blob_config(9);
  const TrainTest tt = load_data(c.data, 9);
  const ModelSpec spec = resolve_model(c.model, tt.train);
  const ModelParams theta = initial_params(spec, 9);
  const auto parts = partition_iid(tt.train, 2, 1);
  ASSERT_EQ(parts[0].size(), parts[1].size());
  auto clients = clients_from(parts, c.train, 9);
  const RoundOutcome out = run_round(spec, theta, clients, c.train, 0);
  std::vector<ModelParams> locals;
  for (std::size_t k = 0; k < 2; ++k) {
    OptimizerState opt = c.train.optimizer;
    locals.push_back(local_adv_train(spec, theta, parts[k], c.train, opt, 1, 0, client_seed(9, k)).params);
  }
  for (std::size_t i = 0; i < theta.size(); ++i) {
    EXPECT_NEAR(out.params.values[i], (locals[0].values[i] + locals[1].values[i]) / 2, 1e-12);
  }
  EXPECT_EQ(out.record.client_sizes, (std::vector<std::size_t>{parts[0].size(), parts[1].size()}));
}

TEST(RunRound, ThreadedMatchesSerial) {
  const ExperimentConfig c = blob_config(10);
  const TrainTest tt = load_data(c.data, 10);
  const ModelSpec spec = resolve_model(c.model, tt.train);
  const ModelParams theta = initial_params(spec, 10);
  const auto parts = partition_iid(tt.train, 3, 2);
  auto a = clients_from(parts, c.train, 10);
  auto b = clients_from(parts, c.train, 10);
  EXPECT_EQ(run_round(spec, theta, a, c.train, 0, 1).params, run_round(spec, theta, b, c.train, 0, 3).params);
}

TEST(RunRound, ClientFailureCarriesId) {
  const ExperimentConfig c = blob_config(11);
  const TrainTest tt = load_data(c.data, 11);
  const ModelSpec spec = resolve_model(c.model, tt.train);
  auto parts = partition_iid(tt.train, 2, 3);
  parts[1].inputs[0] = std::nan("");
  auto clients = clients_from(parts, c.train, 11);
  try {
    (void)run_round(spec, initial_params(spec, 11), clients, c.train, 0);
    FAIL() << "expected ClientError";
  } catch (const ClientError& e) {
    EXPECT_EQ(e.client_id(), 1u);
  }
}

TEST(Experiment, OneRoundOneClientIsOneCentralizedEpoch) {
  ExperimentConfig c = blob_config(12);
  const TrainTest tt = load_data(c.data, 12);
  const auto res = run_experiment(c, tt);
  EXPECT_EQ(res.records.size(), 1u);
  EXPECT_EQ(res.final_params, train_centralized(res.spec, res.initial, tt.train, c.train, 1, 12));
}

TEST(Experiment, CentralizedEquivalenceOverRounds) {
  ExperimentConfig c = blob_config(13);
  c.rounds = 3;
  c.train.local_epochs = 2;
  c.train.optimizer.milestones = {3, 5};
  const TrainTest tt = load_data(c.data, 13);
  const auto res = run_experiment(c, tt);
  EXPECT_EQ(res.final_params, train_centralized(res.spec, res.initial, tt.train, c.train, 6, 13));
}

TEST(Experiment, DeterministicRecords) {
  ExperimentConfig c = blob_config(14);
  c.partition.clients = 3;
  c.rounds = 2;
  c.eval_every = 1;
  const TrainTest tt = load_data(c.data, 14);
  const auto a = run_experiment(c, tt);
  const auto b = run_experiment(c, tt);
  EXPECT_EQ(a.records, b.records);
  EXPECT_EQ(a.final_params, b.final_params);
  EXPECT_EQ(a.report, b.report);
  ASSERT_EQ(a.records.size(), 2u);
  for (const auto& r : a.records) {
    EXPECT_EQ(r.client_losses.size(), 3u);
    ASSERT_TRUE(r.natural_accuracy.has_value());
    EXPECT_GE(*r.natural_accuracy, 0.0);
    EXPECT_LE(*r.natural_accuracy, 1.0);
  }
}

TEST(Experiment, RecordJsonRoundTrip) {
  RoundRecord r;
  r.round = 4;
  r.client_losses = {0.5, 0.25};
  r.client_sizes = {10, 12};
  r.natural_accuracy = 0.75;
  r.robust_accuracy = {{"PGD", 0.5}};
  r.duration_seconds = 3.0;
  const nlohmann::json j = r;
  EXPECT_FALSE(j.contains("duration_seconds"));
  EXPECT_EQ(j.get<RoundRecord>(), r);
}

TEST(Experiment, IidBeatsOneClassOnBlobs) {
  std::vector<double> gaps;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    double acc[2];
    for (int one = 0; one < 2; ++one) {
      ExperimentConfig c;
      c.data.classes = 4;
      c.data.dim = 16;
      c.model.hidden = {32};
      c.partition.clients = 4;
      c.partition.scheme = one ? PartitionScheme::one_class : PartitionScheme::iid;
      c.rounds = 10;
      c.train.local_epochs = 5;
      c.train.batch_size = 8;
      c.train.optimizer.base_lr = 0.1;
      c.train.optimizer.milestones = {};
      c.train.augment.adv_ratio = 0;
      c.seed = seed;
      acc[one] = run_experiment(c, load_data(c.data, seed)).report.natural;
    }
    gaps.push_back(acc[0] - acc[1]);
  }
  std::sort(gaps.begin(), gaps.end());
  EXPECT_GE(gaps[1], 0.15);
}

TEST(Experiment, SharingAppendsToEveryClient) {
  ExperimentConfig c = blob_config(15);
  c.partition.clients = 3;
  c.partition.scheme = PartitionScheme::one_class;
  c.partition.sharing = {true, 10, 4, SharingMode::append, 1};
  const TrainTest tt = load_data(c.data, 15);
  const ClientSetup s = setup_clients(tt.train, c);
  ASSERT_TRUE(s.sharing.has_value());
  EXPECT_EQ(s.sharing->shared.size(), 12u);
  for (const auto& cl : s.clients) {
    EXPECT_EQ(cl.data.size(), 30u + 12u);
    EXPECT_EQ(cl.data.class_counts().size(), 3u);
    for (std::size_t n : cl.data.class_counts()) EXPECT_GE(n, 4u);
  }
  c.partition.sharing.mode = SharingMode::warmup;
  const ClientSetup w = setup_clients(tt.train, c);
  for (const auto& cl : w.clients) EXPECT_EQ(cl.data.size(), 30u);
  EXPECT_NO_THROW((void)run_experiment(c, tt));
}

TEST(Experiment, ConfigValidation) {
  ExperimentConfig c = blob_config(16);
  c.rounds = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = blob_config(16);
  c.train.local_epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = blob_config(16);
  c.partition.scheme = PartitionScheme::one_class;
  c.partition.clients = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = blob_config(16);
  c.partition.sharing = {true, 5, 6, SharingMode::append, 1};
  EXPECT_THROW(c.validate(), ConfigError);
  c = blob_config(16);
  c.train.label_smoothing = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}
