#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedadv/attacks.hpp"
#include "fedadv/errors.hpp"
#include "fedadv/model.hpp"
#include "fedadv/rng.hpp"
#include "fedadv/tensor.hpp"

namespace fedadv {

enum class Provenance : std::uint8_t { natural, adversarial, noisy, flipped, cropped };

inline const char* to_string(Provenance p) noexcept {
  switch (p) {
    case Provenance::natural: return "natural";
    case Provenance::adversarial: return "adversarial";
    case Provenance::noisy: return "noisy";
    case Provenance::flipped: return "flipped";
    case Provenance::cropped: return "cropped";
  }
  return "?";
}

inline Provenance parse_provenance(const std::string& s) {
  for (auto p : {Provenance::natural, Provenance::adversarial, Provenance::noisy,
                 Provenance::flipped, Provenance::cropped}) {
    if (s == to_string(p)) return p;
  }
  throw ValidationError("unknown provenance tag '" + s + "'");
}

using IndexList = std::vector<std::size_t>;

struct Dataset {
  Tensor inputs; // [M, d], values in [0,1]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::vector<Provenance> provenance; // one tag per example
  InputShape image;                   // {1, 1, d} for flat feature vectors

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return image.volume(); }
  bool image_shaped() const noexcept { return image.height > 1 && image.width > 1; }

  void validate(bool allow_empty = false) const {
    if (!allow_empty && labels.empty()) throw ValidationError("dataset is empty");
    if (inputs.rows() != labels.size() || provenance.size() != labels.size()) {
      throw ValidationError("dataset: inputs, labels and provenance disagree on size");
    }
    if (!labels.empty() && inputs.cols() != image.volume()) {
      throw ValidationError("dataset: input width does not match image shape");
    }
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
        throw ValidationError("dataset: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(num_classes) + ")");
      }
    }
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.inputs = inputs.gather_rows(indices);
    if (indices.empty()) out.inputs = Tensor({0, dim()});
    out.num_classes = num_classes;
    out.image = image;
    out.labels.reserve(indices.size());
    out.provenance.reserve(indices.size());
    for (std::size_t i : indices) {
      out.labels.push_back(labels[i]);
      out.provenance.push_back(provenance[i]);
    }
    return out;
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(num_classes, 0);
    for (int y : labels) ++c[static_cast<std::size_t>(y)];
    return c;
  }

  std::vector<IndexList> indices_by_class() const {
    std::vector<IndexList> out(num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) out[static_cast<std::size_t>(labels[i])].push_back(i);
    return out;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline Dataset make_dataset(Tensor inputs, std::vector<int> labels, std::size_t num_classes,
                            InputShape image, Provenance tag = Provenance::natural) {
  Dataset ds;
  ds.inputs = std::move(inputs);
  ds.labels = std::move(labels);
  ds.num_classes = num_classes;
  ds.image = image;
  ds.provenance.assign(ds.labels.size(), tag);
  return ds;
}

inline Dataset concat(std::span<const Dataset* const> parts) {
  if (parts.empty()) throw ValidationError("concat: no datasets");
  Dataset out;
  out.num_classes = parts.front()->num_classes;
  out.image = parts.front()->image;
  std::vector<const Tensor*> tensors;
  for (const Dataset* p : parts) {
    if (p->num_classes != out.num_classes || p->image != out.image) {
      throw ValidationError("concat: datasets differ in classes or geometry");
    }
    if (p->size() == 0) continue;
    tensors.push_back(&p->inputs);
    out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
    out.provenance.insert(out.provenance.end(), p->provenance.begin(), p->provenance.end());
  }
  out.inputs = tensors.empty() ? Tensor({0, out.dim()}) : concat_rows(tensors);
  return out;
}

inline Dataset concat(const Dataset& a, const Dataset& b) {
  const Dataset* parts[] = {&a, &b};
  return concat(parts);
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches: 1 label byte + 3072 pixel bytes (R, G, B planes).

inline constexpr std::size_t kCifarPixels = 3072;
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;
inline constexpr std::size_t kCifarBatchRecords = 10000;

inline Dataset load_cifar10_batch(const std::filesystem::path& file,
                                  std::size_t expected_records = kCifarBatchRecords) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IngestionError("cannot open CIFAR-10 batch " + file.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  const std::size_t expected = expected_records * kCifarRecord;
  if (bytes.size() != expected) {
    throw IngestionError(file.string() + ": expected " + std::to_string(expected) +
                         " bytes, got " + std::to_string(bytes.size()) +
                         " (data ends at byte offset " + std::to_string(bytes.size()) + ")");
  }
  Tensor inputs({expected_records, kCifarPixels});
  std::vector<int> labels(expected_records);
  for (std::size_t r = 0; r < expected_records; ++r) {
    const std::size_t off = r * kCifarRecord;
    if (bytes[off] > 9) {
      throw IngestionError(file.string() + ": label " + std::to_string(bytes[off]) +
                           " at byte offset " + std::to_string(off) + " (labels are 0-9)");
    }
    labels[r] = bytes[off];
    for (std::size_t p = 0; p < kCifarPixels; ++p) {
      inputs(r, p) = static_cast<Real>(bytes[off + 1 + p]) / Real{255};
    }
  }
  return make_dataset(std::move(inputs), std::move(labels), 10, {3, 32, 32});
}

struct TrainTest {
  Dataset train;
  Dataset test;
};

inline TrainTest load_cifar10(const std::filesystem::path& dir) {
  std::vector<Dataset> batches;
  for (int i = 1; i <= 5; ++i) {
    batches.push_back(load_cifar10_batch(dir / ("data_batch_" + std::to_string(i) + ".bin")));
  }
  std::vector<const Dataset*> ptrs;
  for (const auto& b : batches) ptrs.push_back(&b);
  return {concat(ptrs), load_cifar10_batch(dir / "test_batch.bin")};
}

// Average-pools square blocks of `factor` pixels (e.g. 32x32 -> 8x8 with factor 4).
inline Dataset downsample(const Dataset& ds, std::size_t factor) {
  if (!ds.image_shaped() || factor == 0 || ds.image.height % factor || ds.image.width % factor) {
    throw ValidationError("downsample: image extents must be divisible by the factor");
  }
  const InputShape out_shape{ds.image.channels, ds.image.height / factor, ds.image.width / factor};
  Tensor out({ds.size(), out_shape.volume()});
  const Real inv = Real{1} / static_cast<Real>(factor * factor);
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (std::size_t c = 0; c < out_shape.channels; ++c) {
      for (std::size_t y = 0; y < out_shape.height; ++y) {
        for (std::size_t x = 0; x < out_shape.width; ++x) {
          Real acc = 0;
          for (std::size_t dy = 0; dy < factor; ++dy) {
            for (std::size_t dx = 0; dx < factor; ++dx) {
              acc += ds.inputs(r, (c * ds.image.height + y * factor + dy) * ds.image.width +
                                      x * factor + dx);
            }
          }
          out(r, (c * out_shape.height + y) * out_shape.width + x) = acc * inv;
        }
      }
    }
  }
  Dataset res = ds;
  res.inputs = std::move(out);
  res.image = out_shape;
  return res;
}

// ---------------------------------------------------------------------------
// Synthetic data.

// Balanced Gaussian clusters with centers drawn uniformly from [0.2, 0.8]^d.
inline Dataset synth_blobs(std::size_t classes, std::size_t dim, std::size_t per_class, Real spread,
                           std::uint64_t seed) {
  if (classes < 2 || dim < 2) throw ConfigError("synth_blobs: need N >= 2 and d >= 2");
  if (!(spread >= 0)) throw ConfigError("synth_blobs: spread must be >= 0");
  Rng rng(seed);
  std::uniform_real_distribution<double> center_dist(0.2, 0.8);
  std::vector<std::vector<Real>> centers(classes, std::vector<Real>(dim));
  for (auto& c : centers) {
    for (Real& v : c) v = static_cast<Real>(center_dist(rng));
  }
  std::normal_distribution<double> noise(0.0, static_cast<double>(spread));
  Tensor inputs({classes * per_class, dim});
  std::vector<int> labels(classes * per_class);
  std::size_t r = 0;
  for (std::size_t k = 0; k < classes; ++k) {
    for (std::size_t i = 0; i < per_class; ++i, ++r) {
      labels[r] = static_cast<int>(k);
      for (std::size_t j = 0; j < dim; ++j) {
        const Real jitter = spread > 0 ? static_cast<Real>(noise(rng)) : Real{0};
        inputs(r, j) = clamp01(centers[k][j] + jitter);
      }
    }
  }
  return make_dataset(std::move(inputs), std::move(labels), classes, {1, 1, dim});
}

// Small grayscale image set standing in for downsampled natural images. Each
// class is a smooth shape (position- and contrast-jittered) seen through random
// clutter bumps and pixel noise, overlaid with a faint fixed class texture whose
// amplitude is below typical L-inf attack budgets. Both cues predict the label;
// only the shape survives an 8/255 perturbation.
struct ImageSynthSpec {
  std::size_t classes = 4;
  std::size_t side = 8;
  std::size_t per_class = 400;
  Real shape_contrast = static_cast<Real>(0.2);
  Real clutter_contrast = static_cast<Real>(0.3);
  std::size_t clutter_bumps = 2;
  Real pixel_noise = static_cast<Real>(0.03);
  Real texture_amplitude = static_cast<Real>(0.025);
  int max_shift = 1;
  std::uint64_t seed = 0;
};

namespace detail {

inline void add_bump(std::vector<Real>& img, std::size_t side, double cy, double cx, double width,
                     double amplitude) {
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      img[y * side + x] += static_cast<Real>(amplitude * std::exp(-(dx * dx + dy * dy) / (2 * width * width)));
    }
  }
}

} // namespace detail

inline Dataset synth_images(const ImageSynthSpec& s) {
  if (s.classes < 2 || s.side < 4) throw ConfigError("synth_images: need >= 2 classes and side >= 4");
  const std::size_t side = s.side, d = side * side;
  const double span = static_cast<double>(side - 3);
  Rng rng(s.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  // Shape templates: one bright and one dark random bump per class.
  std::vector<std::vector<Real>> shapes(s.classes, std::vector<Real>(d, 0));
  for (auto& shape : shapes) {
    for (int bump = 0; bump < 2; ++bump) {
      detail::add_bump(shape, side, 1.0 + unit(rng) * span, 1.0 + unit(rng) * span,
                       0.9 + unit(rng) * 1.1, bump == 0 ? 1.0 : -1.0);
    }
  }
  // Fixed +-1 textures, one per class.
  std::vector<std::vector<Real>> textures(s.classes, std::vector<Real>(d));
  for (auto& t : textures) {
    for (Real& v : t) v = unit(rng) < 0.5 ? Real{-1} : Real{1};
  }
  std::normal_distribution<double> noise(0.0, static_cast<double>(s.pixel_noise));
  std::uniform_int_distribution<int> shift(-s.max_shift, s.max_shift);
  std::uniform_real_distribution<double> contrast(0.6, 1.4);
  Tensor inputs({s.classes * s.per_class, d});
  std::vector<int> labels(s.classes * s.per_class);
  std::vector<Real> img(d);
  std::size_t r = 0;
  for (std::size_t k = 0; k < s.classes; ++k) {
    for (std::size_t i = 0; i < s.per_class; ++i, ++r) {
      labels[r] = static_cast<int>(k);
      const int sy = shift(rng), sx = shift(rng);
      const Real gain = s.shape_contrast * static_cast<Real>(contrast(rng));
      for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
          const auto yy = std::clamp<long>(static_cast<long>(y) - sy, 0, static_cast<long>(side) - 1);
          const auto xx = std::clamp<long>(static_cast<long>(x) - sx, 0, static_cast<long>(side) - 1);
          img[y * side + x] = gain * shapes[k][static_cast<std::size_t>(yy) * side + static_cast<std::size_t>(xx)];
        }
      }
      for (std::size_t c = 0; c < s.clutter_bumps; ++c) {
        const double amp = static_cast<double>(s.clutter_contrast) * (unit(rng) * 2.0 - 1.0);
        detail::add_bump(img, side, unit(rng) * static_cast<double>(side - 1),
                         unit(rng) * static_cast<double>(side - 1), 0.9 + unit(rng) * 1.1, amp);
      }
      for (std::size_t j = 0; j < d; ++j) {
        const Real v = Real{0.5} + img[j] + s.texture_amplitude * textures[k][j] +
                       static_cast<Real>(noise(rng));
        inputs(r, j) = clamp01(v);
      }
    }
  }
  return make_dataset(std::move(inputs), std::move(labels), s.classes, {1, side, side});
}

// ---------------------------------------------------------------------------
// Partitioning. Each partitioner returns, per client, indices into the source.

inline std::vector<Dataset> materialize(const Dataset& ds, const std::vector<IndexList>& parts) {
  std::vector<Dataset> out;
  out.reserve(parts.size());
  for (const auto& p : parts) out.push_back(ds.subset(p));
  return out;
}

// Shuffles each class, concatenates the classes and deals round-robin, so every
// client's per-class count is within one of proportional.
inline std::vector<IndexList> partition_iid_indices(const Dataset& ds, std::size_t clients,
                                                    std::uint64_t seed) {
  if (clients == 0) throw ConfigError("partition: K must be >= 1");
  if (clients > ds.size()) {
    throw ConfigError("partition: K=" + std::to_string(clients) + " exceeds dataset size " +
                      std::to_string(ds.size()));
  }
  Rng rng(seed);
  auto by_class = ds.indices_by_class();
  std::vector<IndexList> parts(clients);
  std::size_t next = 0;
  for (auto& cls : by_class) {
    std::shuffle(cls.begin(), cls.end(), rng);
    for (std::size_t i : cls) parts[next++ % clients].push_back(i);
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return parts;
}

inline std::vector<IndexList> partition_one_class_indices(const Dataset& ds, std::size_t clients,
                                                          std::uint64_t seed) {
  if (clients != ds.num_classes) {
    throw ConfigError("one_class partition requires K == N (K=" + std::to_string(clients) +
                      ", N=" + std::to_string(ds.num_classes) + ")");
  }
  Rng rng(seed);
  std::vector<std::size_t> owner(clients);
  std::iota(owner.begin(), owner.end(), 0);
  std::shuffle(owner.begin(), owner.end(), rng);
  std::vector<IndexList> parts(clients);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    parts[owner[static_cast<std::size_t>(ds.labels[i])]].push_back(i);
  }
  return parts;
}

// Class pairs for the two-class scheme: a sequence of 2K class slots built from
// fresh random permutations; client k takes slots (2k, 2k+1). When N divides 2K
// every class fills exactly 2K/N slots.
inline std::vector<std::array<std::size_t, 2>> two_class_assignment(std::size_t classes,
                                                                    std::size_t clients,
                                                                    Rng& rng) {
  if (2 * clients < classes) {
    throw ConfigError("two_class partition infeasible: 2K=" + std::to_string(2 * clients) +
                      " < N=" + std::to_string(classes));
  }
  std::vector<std::size_t> slots;
  while (slots.size() < 2 * clients) {
    std::vector<std::size_t> perm(classes);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    // A pair straddling two permutations must not repeat a class.
    if (slots.size() % 2 == 1 && perm.front() == slots.back()) std::swap(perm.front(), perm.back());
    slots.insert(slots.end(), perm.begin(), perm.end());
  }
  slots.resize(2 * clients);
  std::vector<std::array<std::size_t, 2>> pairs(clients);
  for (std::size_t k = 0; k < clients; ++k) pairs[k] = {slots[2 * k], slots[2 * k + 1]};
  return pairs;
}

// skew = 0 splits each class evenly (+-1) among its holders; skew in (0,1)
// gives holder j a share proportional to (1 - skew)^j.
inline std::vector<IndexList> partition_two_class_indices(const Dataset& ds, std::size_t clients,
                                                          std::uint64_t seed, Real skew = 0) {
  if (!(skew >= 0 && skew < 1)) throw ConfigError("two_class skew must be in [0,1)");
  Rng rng(seed);
  const auto pairs = two_class_assignment(ds.num_classes, clients, rng);
  std::vector<IndexList> holders(ds.num_classes);
  for (std::size_t k = 0; k < clients; ++k) {
    for (std::size_t c : pairs[k]) holders[c].push_back(k);
  }
  auto by_class = ds.indices_by_class();
  std::vector<IndexList> parts(clients);
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    auto& idx = by_class[c];
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto& h = holders[c];
    if (h.empty()) continue; // cannot happen when 2K >= N
    if (skew == 0) {
      for (std::size_t i = 0; i < idx.size(); ++i) parts[h[i % h.size()]].push_back(idx[i]);
      continue;
    }
    IndexList order = h; // which holder gets the largest share is random too
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<double> weights(h.size());
    double total = 0;
    for (std::size_t j = 0; j < h.size(); ++j) total += weights[j] = std::pow(1.0 - skew, j);
    std::size_t start = 0;
    for (std::size_t j = 0; j < h.size(); ++j) {
      std::size_t count = j + 1 == h.size()
                              ? idx.size() - start
                              : static_cast<std::size_t>(std::round(idx.size() * weights[j] / total));
      count = std::max<std::size_t>(std::min(count, idx.size() - start), idx.size() > start ? 1 : 0);
      for (std::size_t i = 0; i < count; ++i) parts[order[j]].push_back(idx[start + i]);
      start += count;
    }
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return parts;
}

inline std::vector<Dataset> partition_iid(const Dataset& ds, std::size_t clients, std::uint64_t seed) {
  return materialize(ds, partition_iid_indices(ds, clients, seed));
}

inline std::vector<Dataset> partition_one_class(const Dataset& ds, std::size_t clients,
                                                std::uint64_t seed) {
  return materialize(ds, partition_one_class_indices(ds, clients, seed));
}

inline std::vector<Dataset> partition_two_class(const Dataset& ds, std::size_t clients,
                                                std::uint64_t seed, Real skew = 0) {
  return materialize(ds, partition_two_class_indices(ds, clients, seed, skew));
}

struct SharedSplit {
  Dataset shared;
  Dataset remainder;
  IndexList shared_indices;
  IndexList reserve_indices;
  IndexList remainder_indices;
};

// Reserves `reserve_per_class` examples of every class, samples
// `sample_per_class` of them into the shared set and drops the rest of the
// reserve. The remainder is everything outside the reserve.
inline SharedSplit build_shared_subset(const Dataset& ds, std::size_t reserve_per_class,
                                       std::size_t sample_per_class, std::uint64_t seed) {
  if (sample_per_class > reserve_per_class) {
    throw ConfigError("sharing: sample_per_class exceeds reserve_per_class");
  }
  auto by_class = ds.indices_by_class();
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].size() < reserve_per_class) {
      throw ConfigError("sharing: class " + std::to_string(c) + " has " +
                        std::to_string(by_class[c].size()) + " examples, reserve needs " +
                        std::to_string(reserve_per_class));
    }
  }
  Rng rng(seed);
  SharedSplit out;
  std::vector<std::uint8_t> reserved(ds.size(), 0);
  for (auto& cls : by_class) {
    std::shuffle(cls.begin(), cls.end(), rng);
    for (std::size_t i = 0; i < reserve_per_class; ++i) {
      reserved[cls[i]] = 1;
      out.reserve_indices.push_back(cls[i]);
      if (i < sample_per_class) out.shared_indices.push_back(cls[i]);
    }
  }
  std::sort(out.reserve_indices.begin(), out.reserve_indices.end());
  std::sort(out.shared_indices.begin(), out.shared_indices.end());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!reserved[i]) out.remainder_indices.push_back(i);
  }
  out.shared = ds.subset(out.shared_indices);
  out.remainder = ds.subset(out.remainder_indices);
  return out;
}

// ---------------------------------------------------------------------------
// Soft labels: 1 - alpha (N-1)/N on the true class, alpha/N elsewhere.

inline Tensor soft_labels(std::span<const int> labels, Real alpha, std::size_t classes) {
  if (!(alpha >= 0 && alpha < 1)) throw ConfigError("soft labels: alpha must be in [0,1)");
  if (classes < 2) throw ConfigError("soft labels: need at least two classes");
  const Real off = alpha / static_cast<Real>(classes);
  const Real on = 1 - alpha * static_cast<Real>(classes - 1) / static_cast<Real>(classes);
  Tensor t({labels.size(), classes}, off);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw ValidationError("soft labels: label out of range");
    }
    t(r, static_cast<std::size_t>(labels[r])) = on;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Augmentation.

struct AugmentConfig {
  Real adv_ratio = 1;
  Real noise_ratio = 0;
  Real noise_mu = 0;
  Real noise_sigma = static_cast<Real>(0.1);
  bool flip = false;
  std::size_t crop_pad = 0;

  void validate() const {
    if (!(adv_ratio >= 0)) throw ConfigError("augment.adv_ratio must be >= 0");
    if (!(noise_ratio >= 0)) throw ConfigError("augment.noise_ratio must be >= 0");
    if (!(noise_sigma >= 0)) throw ConfigError("augment.noise_sigma must be >= 0");
  }
};

namespace detail {

// ceil(ratio * m) indices: whole shuffled passes, then a shuffled prefix.
inline IndexList sample_indices(std::size_t m, Real ratio, Rng& rng) {
  const auto count = static_cast<std::size_t>(std::ceil(static_cast<double>(ratio) * static_cast<double>(m) - 1e-9));
  IndexList out;
  out.reserve(count);
  IndexList perm(m);
  while (out.size() < count) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const std::size_t take = std::min(count - out.size(), m);
    out.insert(out.end(), perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(take));
  }
  return out;
}

// Horizontal flip with probability 1/2, then a random crop of the original size
// from the edge-replicated, `pad`-padded image.
inline Provenance flip_crop(std::span<Real> img, const InputShape& shape, bool flip,
                            std::size_t pad, Rng& rng) {
  Provenance tag = Provenance::natural;
  const std::size_t h = shape.height, w = shape.width;
  if (flip && std::uniform_int_distribution<int>(0, 1)(rng) == 1) {
    for (std::size_t c = 0; c < shape.channels; ++c) {
      for (std::size_t y = 0; y < h; ++y) {
        Real* row = img.data() + (c * h + y) * w;
        std::reverse(row, row + w);
      }
    }
    tag = Provenance::flipped;
  }
  if (pad > 0) {
    std::uniform_int_distribution<long> off(0, static_cast<long>(2 * pad));
    const long oy = off(rng) - static_cast<long>(pad);
    const long ox = off(rng) - static_cast<long>(pad);
    if (oy != 0 || ox != 0) {
      std::vector<Real> src(img.begin(), img.end());
      for (std::size_t c = 0; c < shape.channels; ++c) {
        for (std::size_t y = 0; y < h; ++y) {
          const auto sy = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(y) + oy, 0, static_cast<long>(h) - 1));
          for (std::size_t x = 0; x < w; ++x) {
            const auto sx = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(x) + ox, 0, static_cast<long>(w) - 1));
            img[(c * h + y) * w + x] = src[(c * h + sy) * w + sx];
          }
        }
      }
      tag = Provenance::cropped;
    }
  }
  return tag;
}

} // namespace detail

// Natural examples (flip/crop applied to image-shaped data), then
// ceil(adv_ratio * M) adversarial examples (PGD unless configured otherwise)
// crafted against `model`, then
// ceil(noise_ratio * M) Gaussian-noise copies. Labels follow their sources.
template <DifferentiableClassifier M>
Dataset augment(const Dataset& ds, const M* model, const AttackConfig& pgd_cfg,
                const AugmentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.adv_ratio > 0 && model == nullptr) {
    throw ConfigError("augment: adv_ratio > 0 requires a model");
  }
  Dataset natural = ds;
  if (ds.image_shaped() && (cfg.flip || cfg.crop_pad > 0)) {
    Rng rng(derive_seed(seed, {1}));
    for (std::size_t r = 0; r < natural.size(); ++r) {
      const Provenance tag = detail::flip_crop(natural.inputs.row(r), natural.image, cfg.flip,
                                               cfg.crop_pad, rng);
      if (tag != Provenance::natural) natural.provenance[r] = tag;
    }
  }
  const std::size_t m = natural.size();
  std::vector<Dataset> pieces;
  pieces.push_back(natural);
  if (cfg.adv_ratio > 0 && m > 0) {
    Rng rng(derive_seed(seed, {2}));
    const IndexList pick = detail::sample_indices(m, cfg.adv_ratio, rng);
    Dataset src = natural.subset(pick);
    AttackConfig c = pgd_cfg;
    c.seed = derive_seed(seed, {3});
    const AdvBatch adv = run_attack(*model, src.inputs, src.labels, c);
    src.inputs = adv.perturbed;
    src.provenance.assign(src.size(), Provenance::adversarial);
    pieces.push_back(std::move(src));
  }
  if (cfg.noise_ratio > 0 && m > 0) {
    Rng rng(derive_seed(seed, {4}));
    const IndexList pick = detail::sample_indices(m, cfg.noise_ratio, rng);
    Dataset src = natural.subset(pick);
    src.inputs = gaussian_noise(src.inputs, cfg.noise_mu, cfg.noise_sigma, derive_seed(seed, {5}));
    src.provenance.assign(src.size(), Provenance::noisy);
    pieces.push_back(std::move(src));
  }
  if (pieces.size() == 1) return natural;
  std::vector<const Dataset*> ptrs;
  for (const auto& p : pieces) ptrs.push_back(&p);
  return concat(ptrs);
}

// ---------------------------------------------------------------------------
// Persistence: <prefix>.bin holds little-endian float64 inputs row-major;
// <prefix>.json carries shape, labels, provenance and geometry.

inline constexpr int kDatasetSchemaVersion = 1;

namespace detail {

inline void write_f64_le(std::ofstream& out, std::span<const Real> values) {
  std::vector<unsigned char> buf(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = static_cast<double>(values[i]);
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int b = 0; b < 8; ++b) buf[i * 8 + static_cast<std::size_t>(b)] = static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline std::vector<Real> read_f64_le(const std::filesystem::path& file, std::size_t count) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() != count * 8) {
    throw IngestionError(file.string() + ": expected " + std::to_string(count * 8) + " bytes, got " +
                         std::to_string(buf.size()));
  }
  std::vector<Real> values(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[i * 8 + static_cast<std::size_t>(b)]) << (8 * b);
    double v;
    std::memcpy(&v, &bits, 8);
    values[i] = static_cast<Real>(v);
  }
  return values;
}

inline void write_text(const std::filesystem::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file.string());
  out << text;
  if (!out) throw IoError("write failed: " + file.string());
}

inline std::string read_text(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  return {(std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()};
}

} // namespace detail

inline void save_dataset(const Dataset& ds, const std::filesystem::path& prefix) {
  ds.validate(true);
  nlohmann::json meta;
  meta["schema_version"] = kDatasetSchemaVersion;
  meta["format"] = "fedadv.dataset";
  meta["dtype"] = "float64-le";
  meta["shape"] = {ds.size(), ds.dim()};
  meta["image"] = {ds.image.channels, ds.image.height, ds.image.width};
  meta["num_classes"] = ds.num_classes;
  meta["labels"] = ds.labels;
  std::vector<std::string> tags;
  for (auto p : ds.provenance) tags.emplace_back(to_string(p));
  meta["provenance"] = tags;
  {
    std::ofstream out(prefix.string() + ".bin", std::ios::binary);
    if (!out) throw IoError("cannot write " + prefix.string() + ".bin");
    detail::write_f64_le(out, ds.inputs.values());
  }
  detail::write_text(prefix.string() + ".json", meta.dump(1) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& prefix) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(detail::read_text(prefix.string() + ".json"));
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(prefix.string() + ".json: " + e.what());
  }
  if (meta.value("schema_version", 0) != kDatasetSchemaVersion) {
    throw IngestionError(prefix.string() + ".json: unsupported schema version");
  }
  const auto shape = meta.at("shape").get<std::vector<std::size_t>>();
  const auto image = meta.at("image").get<std::vector<std::size_t>>();
  Dataset ds;
  ds.image = {image.at(0), image.at(1), image.at(2)};
  ds.num_classes = meta.at("num_classes").get<std::size_t>();
  ds.labels = meta.at("labels").get<std::vector<int>>();
  for (const auto& t : meta.at("provenance")) ds.provenance.push_back(parse_provenance(t.get<std::string>()));
  ds.inputs = Tensor({shape.at(0), shape.at(1)},
                     detail::read_f64_le(prefix.string() + ".bin", shape.at(0) * shape.at(1)));
  ds.validate(true);
  return ds;
}

} // namespace fedadv
