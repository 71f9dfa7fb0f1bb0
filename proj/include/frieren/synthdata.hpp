#pragma once

// Procedural multi-domain segmentation data and the non-IID client partitioners.

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "frieren/errors.hpp"
#include "frieren/rng.hpp"
#include "frieren/tensor.hpp"

namespace frieren {

/// Per-channel affine shift plus pixel noise: x = gain * (signature + bias) + N(0, noise_sigma).
struct DomainSpec {
  int id = 0;
  std::string name;
  std::vector<double> gain;
  std::vector<double> bias;
  double noise_sigma = 0.0;
};

inline DomainSpec identity_domain(std::size_t channels, int id = 0, std::string name = "identity") {
  return {id, std::move(name), std::vector<double>(channels, 1.0), std::vector<double>(channels, 0.0), 0.0};
}

struct LabeledImage {
  NdArray pixels;           // [H x W x d_in]
  std::vector<int> labels;  // H*W class indices; empty when stripped
  int domain = 0;
  std::uint64_t uid = 0;    // unique within a benchmark, used for disjointness checks

  [[nodiscard]] bool labeled() const noexcept { return !labels.empty(); }
  [[nodiscard]] std::size_t height() const { return pixels.dim(0); }
  [[nodiscard]] std::size_t width() const { return pixels.dim(1); }
};

struct ClientDataset {
  int client_id = 0;
  std::vector<LabeledImage> images;
  std::vector<int> domains;  // sorted distinct tags

  [[nodiscard]] std::size_t size() const noexcept { return images.size(); }
};

/// Fixed C x d_in table of class appearance vectors, unit norm.
inline NdArray class_signatures(std::size_t classes, std::size_t channels) {
  NdArray s({classes, channels});
  for (std::size_t c = 0; c < classes; ++c) {
    auto r = s.row(c);
    for (std::size_t k = 0; k < channels; ++k) r[k] = hashed_normal(derive_seed({0x5161ULL, c, k}));
    const double n = std::max(l2_norm(r), kNormEpsilon);
    for (auto& x : r) x /= n;
  }
  return s;
}

/**
 * Voronoi label map: two sites per class at random positions, each pixel
 * takes the class of its nearest site (ties toward the lower site index).
 */
inline std::vector<int> gen_label_map(std::uint64_t seed, std::size_t H, std::size_t W, std::size_t C) {
  if (H == 0 || W == 0 || C == 0) throw ShapeError("gen_label_map: sizes must be positive");
  std::vector<int> out(H * W, 0);
  if (C == 1) return out;
  Rng rng(derive_seed({seed, static_cast<std::uint64_t>(Stream::kLabels)}));
  const std::size_t sites = 2 * C;
  std::vector<double> sy(sites), sx(sites);
  std::vector<int> cls(sites);
  for (std::size_t s = 0; s < sites; ++s) {
    sy[s] = rng.uniform(0.0, static_cast<double>(H));
    sx[s] = rng.uniform(0.0, static_cast<double>(W));
    cls[s] = static_cast<int>(s % C);
  }
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double best = 1e300;
      int label = 0;
      for (std::size_t s = 0; s < sites; ++s) {
        const double dy = static_cast<double>(y) + 0.5 - sy[s], dx = static_cast<double>(x) + 0.5 - sx[s];
        const double d2 = dy * dy + dx * dx;
        if (d2 < best) {
          best = d2;
          label = cls[s];
        }
      }
      out[y * W + x] = label;
    }
  return out;
}

/// Renders a label map under a domain. `signatures` is the C x d_in appearance table.
inline LabeledImage render(std::span<const int> labels, std::size_t H, std::size_t W, const DomainSpec& domain,
                           const NdArray& signatures, std::uint64_t seed) {
  const std::size_t ch = signatures.dim(1);
  if (labels.size() != H * W) throw ShapeError("render: label map size mismatch");
  if (domain.gain.size() != ch || domain.bias.size() != ch) throw ShapeError("render: domain channel count mismatch");
  for (double g : domain.gain)
    if (!(g > 0.0)) throw ShapeError("render: domain gains must be positive");
  Rng rng(derive_seed({seed, static_cast<std::uint64_t>(Stream::kRender)}));
  LabeledImage img;
  img.pixels = NdArray({H, W, ch});
  img.labels.assign(labels.begin(), labels.end());
  img.domain = domain.id;
  for (std::size_t i = 0; i < H * W; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= signatures.dim(0))
      throw ShapeError("render: label out of range");
    auto sig = signatures.row(static_cast<std::size_t>(labels[i]));
    for (std::size_t k = 0; k < ch; ++k)
      img.pixels[i * ch + k] = domain.gain[k] * (sig[k] + domain.bias[k]) + rng.normal(domain.noise_sigma);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Partitioners

namespace detail {

inline std::map<int, std::vector<std::size_t>> indices_by_domain(const std::vector<LabeledImage>& pool, Rng& rng) {
  std::map<int, std::vector<std::size_t>> by;
  for (std::size_t i = 0; i < pool.size(); ++i) by[pool[i].domain].push_back(i);
  for (auto& [_, v] : by) std::shuffle(v.begin(), v.end(), rng.engine());
  return by;
}

inline void finalize_domains(ClientDataset& c) {
  std::set<int> tags;
  for (const auto& im : c.images) tags.insert(im.domain);
  c.domains.assign(tags.begin(), tags.end());
}

}  // namespace detail

/// Single-domain clients with sizes drawn uniformly in [min_imgs, max_imgs].
inline std::vector<ClientDataset> partition_city_style(const std::vector<LabeledImage>& pool, std::size_t n_clients,
                                                       std::size_t min_imgs, std::size_t max_imgs,
                                                       std::uint64_t seed) {
  if (min_imgs == 0 || min_imgs > max_imgs) throw ConfigError("partition_city_style: need 1 <= min_imgs <= max_imgs");
  Rng rng(derive_seed({seed, static_cast<std::uint64_t>(Stream::kPartition), 1}));
  auto by = detail::indices_by_domain(pool, rng);
  std::map<int, std::size_t> cursor;
  std::vector<ClientDataset> clients;
  clients.reserve(n_clients);
  for (std::size_t c = 0; c < n_clients; ++c) {
    const auto size = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(min_imgs),
                                                           static_cast<std::int64_t>(max_imgs)));
    std::vector<int> candidates;
    for (const auto& [tag, idx] : by)
      if (idx.size() - cursor[tag] >= size) candidates.push_back(tag);
    if (candidates.empty())
      throw ConfigError("partition_city_style: pool too small for client " + std::to_string(c));
    const int tag = candidates[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(candidates.size()) - 1))];
    ClientDataset cd;
    cd.client_id = static_cast<int>(c);
    for (std::size_t j = 0; j < size; ++j) cd.images.push_back(pool[by[tag][cursor[tag]++]]);
    detail::finalize_domains(cd);
    clients.push_back(std::move(cd));
  }
  return clients;
}

/**
 * Multi-condition clients: each picks 2 to 4 distinct condition tags, then
 * every condition's images are dealt round-robin to the clients holding it.
 */
inline std::vector<ClientDataset> partition_weather_style(const std::vector<LabeledImage>& pool, std::size_t n_clients,
                                                          std::size_t conditions, std::uint64_t seed) {
  Rng rng(derive_seed({seed, static_cast<std::uint64_t>(Stream::kPartition), 2}));
  auto by = detail::indices_by_domain(pool, rng);
  if (by.size() != conditions)
    throw ConfigError("partition_weather_style: pool holds " + std::to_string(by.size()) + " conditions, expected " +
                      std::to_string(conditions));
  if (conditions < 2) throw ConfigError("partition_weather_style: need at least 2 conditions");
  std::vector<int> tags;
  for (const auto& [t, _] : by) tags.push_back(t);

  const auto max_k = static_cast<std::int64_t>(std::min<std::size_t>(4, conditions));
  std::vector<std::vector<int>> chosen(n_clients);
  for (auto& ch : chosen) {
    const auto k = static_cast<std::size_t>(rng.integer(2, max_k));
    std::vector<int> t = tags;
    std::shuffle(t.begin(), t.end(), rng.engine());
    ch.assign(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(ch.begin(), ch.end());
  }

  std::vector<ClientDataset> clients(n_clients);
  for (std::size_t c = 0; c < n_clients; ++c) clients[c].client_id = static_cast<int>(c);
  for (int tag : tags) {
    std::vector<std::size_t> holders;
    for (std::size_t c = 0; c < n_clients; ++c)
      if (std::binary_search(chosen[c].begin(), chosen[c].end(), tag)) holders.push_back(c);
    const auto& idx = by[tag];
    if (!holders.empty() && idx.size() < holders.size())
      throw ConfigError("partition_weather_style: condition " + std::to_string(tag) + " has fewer images than clients");
    for (std::size_t j = 0; j < idx.size() && !holders.empty(); ++j)
      clients[holders[j % holders.size()]].images.push_back(pool[idx[j]]);
  }
  for (auto& c : clients) detail::finalize_domains(c);
  return clients;
}

// ---------------------------------------------------------------------------
// Benchmarks

enum class Scenario { kSyn2Real, kClear2Adverse };

inline const char* to_string(Scenario s) { return s == Scenario::kSyn2Real ? "syn2real" : "clear2adverse"; }

struct BenchmarkSizes {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 6;
  std::size_t classes = 5;
  std::size_t source_images = 256;
  std::size_t eval_images = 64;
  std::size_t clients = 0;              // 0 selects the scenario default (144 or 28)
  std::size_t images_per_condition = 64;  // clear2adverse target pool per weather condition
  std::size_t cities = 18;              // syn2real target domains
  std::size_t city_min_images = 10;
  std::size_t city_max_images = 45;
  double noise_sigma = 0.1;
  double shift_strength = 0.7;          // scales every domain's gain deviation and bias
};

/// Thrown when code reachable from federation touches discarded source data.
class SourceAccessError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Labeled server-side source set. Once discarded, every access throws.
class SourceData {
 public:
  SourceData() = default;
  explicit SourceData(std::vector<LabeledImage> images) : images_(std::make_shared<std::vector<LabeledImage>>(std::move(images))) {}

  [[nodiscard]] const std::vector<LabeledImage>& images() const {
    if (!images_) throw SourceAccessError("source data accessed after it was discarded");
    return *images_;
  }
  void discard() noexcept { images_.reset(); }
  [[nodiscard]] bool available() const noexcept { return static_cast<bool>(images_); }

 private:
  std::shared_ptr<std::vector<LabeledImage>> images_;
};

struct Benchmark {
  Scenario scenario = Scenario::kClear2Adverse;
  BenchmarkSizes sizes;
  DomainSpec source_domain;
  std::vector<DomainSpec> client_domains;
  DomainSpec eval_domain;
  SourceData source;
  std::vector<ClientDataset> clients;
  std::vector<LabeledImage> eval;

  [[nodiscard]] std::vector<LabeledImage> target_pool() const {
    std::vector<LabeledImage> all;
    for (const auto& c : clients) all.insert(all.end(), c.images.begin(), c.images.end());
    return all;
  }
};

namespace detail {

inline DomainSpec jittered_domain(int id, std::string name, std::size_t ch, double gain, double gain_jit, double bias,
                                  double bias_jit, double sigma, double strength = 1.0) {
  DomainSpec d{id, std::move(name), std::vector<double>(ch), std::vector<double>(ch), sigma};
  for (std::size_t k = 0; k < ch; ++k) {
    const auto key = derive_seed({0xD0E1ULL, static_cast<std::uint64_t>(id), k});
    const double g = gain + gain_jit * (2.0 * (static_cast<double>(mix64(key) >> 11) * 0x1.0p-53) - 1.0);
    d.gain[k] = std::max(0.05, 1.0 + strength * (g - 1.0));
    d.bias[k] = strength * (bias + bias_jit * hashed_normal(key ^ 0xB1A5ULL));
  }
  return d;
}

/// Per-channel interpolation (1 - t) a + t b of two domains.
inline DomainSpec blend_domains(int id, std::string name, const DomainSpec& a, const DomainSpec& b, double t,
                                double sigma) {
  DomainSpec d{id, std::move(name), a.gain, a.bias, sigma};
  for (std::size_t k = 0; k < d.gain.size(); ++k) {
    d.gain[k] = (1.0 - t) * a.gain[k] + t * b.gain[k];
    d.bias[k] = (1.0 - t) * a.bias[k] + t * b.bias[k];
  }
  return d;
}

inline std::vector<LabeledImage> render_set(const DomainSpec& dom, std::size_t count, const BenchmarkSizes& sz,
                                            const NdArray& sig, std::uint64_t seed, std::uint64_t& uid) {
  std::vector<LabeledImage> out;
  out.reserve(count);
  for (std::size_t j = 0; j < count; ++j) {
    const auto key = derive_seed({seed, static_cast<std::uint64_t>(dom.id), j});
    auto labels = gen_label_map(key, sz.height, sz.width, sz.classes);
    auto img = render(labels, sz.height, sz.width, dom, sig, key);
    img.uid = uid++;
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace detail

/// Domain tables for a scenario. Fixed per scenario; only images and partitions depend on the seed.
inline void scenario_domains(Scenario sc, const BenchmarkSizes& sz, DomainSpec& source, std::vector<DomainSpec>& clients,
                             DomainSpec& eval) {
  const std::size_t ch = sz.channels;
  const double s = sz.noise_sigma;
  const double k = sz.shift_strength;
  clients.clear();
  if (sc == Scenario::kClear2Adverse) {
    source = detail::jittered_domain(0, "clear", ch, 1.0, 0.0, 0.0, 0.0, s, k);
    clients.push_back(detail::jittered_domain(1, "fog", ch, 0.55, 0.1, 0.45, 0.15, s, k));
    clients.push_back(detail::jittered_domain(2, "night", ch, 0.4, 0.15, -0.1, 0.2, s, k));
    clients.push_back(detail::jittered_domain(3, "rain", ch, 0.8, 0.2, 0.1, 0.2, 2.0 * s, k));
    clients.push_back(detail::jittered_domain(4, "snow", ch, 0.85, 0.15, 0.5, 0.25, s, k));
    eval = detail::blend_domains(5, "dusk", clients[0], clients[1], 0.5, 1.5 * s);
  } else {
    source = detail::jittered_domain(0, "synthetic", ch, 1.25, 0.2, -0.15, 0.15, 0.5 * s, k);
    for (std::size_t c = 0; c < sz.cities; ++c)
      clients.push_back(detail::jittered_domain(static_cast<int>(1 + c), "city" + std::to_string(c), ch, 0.8, 0.2, 0.1,
                                                0.15, s, k));
    eval = detail::jittered_domain(static_cast<int>(1 + sz.cities), "city-heldout", ch, 0.8, 0.2, 0.1, 0.15, s, k);
  }
}

/**
 * Builds the labeled source set, the partitioned client datasets (labels
 * still attached; strip with apply_label_mode) and an eval set rendered
 * from a domain no client holds.
 */
inline Benchmark make_benchmark(std::uint64_t seed, Scenario scenario, BenchmarkSizes sz = {}) {
  Benchmark b;
  b.scenario = scenario;
  if (sz.clients == 0) sz.clients = scenario == Scenario::kSyn2Real ? 144 : 28;
  b.sizes = sz;
  scenario_domains(scenario, sz, b.source_domain, b.client_domains, b.eval_domain);
  const NdArray sig = class_signatures(sz.classes, sz.channels);
  std::uint64_t uid = 0;
  b.source = SourceData(detail::render_set(b.source_domain, sz.source_images, sz, sig, derive_seed({seed, 11}), uid));
  std::vector<LabeledImage> pool;
  if (scenario == Scenario::kClear2Adverse) {
    for (const auto& d : b.client_domains) {
      auto part = detail::render_set(d, sz.images_per_condition, sz, sig, derive_seed({seed, 12}), uid);
      pool.insert(pool.end(), part.begin(), part.end());
    }
    b.clients = partition_weather_style(pool, sz.clients, b.client_domains.size(), seed);
  } else {
    const std::size_t per_city = (sz.clients + sz.cities - 1) / sz.cities * sz.city_max_images;
    for (const auto& d : b.client_domains) {
      auto part = detail::render_set(d, per_city, sz, sig, derive_seed({seed, 12}), uid);
      pool.insert(pool.end(), part.begin(), part.end());
    }
    b.clients = partition_city_style(pool, sz.clients, sz.city_min_images, sz.city_max_images, seed);
  }
  b.eval = detail::render_set(b.eval_domain, sz.eval_images, sz, sig, derive_seed({seed, 13}), uid);
  return b;
}

enum class LabelMode { kUnsup, kSemisup, kSup };

inline const char* to_string(LabelMode m) {
  switch (m) {
    case LabelMode::kUnsup: return "unsup";
    case LabelMode::kSemisup: return "semisup";
    case LabelMode::kSup: return "sup";
  }
  return "?";
}

/// Strips client labels per mode; semisup keeps a seeded `labeled_fraction` of each client's images.
inline void apply_label_mode(std::vector<ClientDataset>& clients, LabelMode mode, double labeled_fraction,
                             std::uint64_t seed) {
  for (auto& c : clients) {
    if (mode == LabelMode::kSup) {
      for (const auto& im : c.images)
        if (!im.labeled()) throw ConfigError("sup mode requires labels on every client image");
      continue;
    }
    std::vector<std::uint8_t> keep(c.size(), 0);
    if (mode == LabelMode::kSemisup) {
      Rng rng(derive_seed({seed, static_cast<std::uint64_t>(Stream::kSemisupSplit), static_cast<std::uint64_t>(c.client_id)}));
      std::vector<std::size_t> idx(c.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng.engine());
      const auto k = static_cast<std::size_t>(std::ceil(labeled_fraction * static_cast<double>(c.size()) - 1e-9));
      for (std::size_t j = 0; j < std::min(k, c.size()); ++j) keep[idx[j]] = 1;
    }
    for (std::size_t j = 0; j < c.size(); ++j)
      if (!keep[j]) c.images[j].labels.clear();
  }
}

}  // namespace frieren
