#pragma once

// Run artifacts: the named-array container used for checkpoints and dataset
// dumps, the flat key=value run configuration, and the metrics CSV.

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "frieren/errors.hpp"
#include "frieren/fed.hpp"
#include "frieren/model.hpp"
#include "frieren/synthdata.hpp"
#include "frieren/tensor.hpp"

namespace frieren {

// ---------------------------------------------------------------------------
// Named-array container

inline constexpr std::array<char, 4> kContainerMagic{'F', 'R', 'Z', 'N'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedArray {
  std::string name;
  NdArray array;
};

using ArrayBundle = std::vector<NamedArray>;

namespace detail {

template <typename U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> b;
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b.data(), b.size());
}

template <typename U>
U get_le(std::istream& is, const char* what) {
  std::array<unsigned char, sizeof(U)> b;
  if (!is.read(reinterpret_cast<char*>(b.data()), b.size())) throw IoError(std::string("container: truncated ") + what);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_bundle(std::ostream& os, const ArrayBundle& bundle) {
  os.write(kContainerMagic.data(), kContainerMagic.size());
  detail::put_le<std::uint32_t>(os, kContainerVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(bundle.size()));
  for (const auto& [name, a] : bundle) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(a.rank()));
    for (std::size_t d : a.shape()) detail::put_le<std::uint64_t>(os, d);
    for (double x : a.data()) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(x));
  }
  if (!os) throw IoError("container: write failed");
}

inline ArrayBundle read_bundle(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kContainerMagic) throw IoError("container: bad magic");
  const auto version = detail::get_le<std::uint32_t>(is, "version");
  if (version != kContainerVersion)
    throw IoError("container: unsupported format version " + std::to_string(version) + " (expected " +
                  std::to_string(kContainerVersion) + ")");
  const auto count = detail::get_le<std::uint32_t>(is, "array count");
  ArrayBundle out;
  out.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = detail::get_le<std::uint32_t>(is, "name length");
    std::string name(len, '\0');
    if (len > 0 && !is.read(name.data(), len)) throw IoError("container: truncated name");
    const auto rank = detail::get_le<std::uint32_t>(is, "rank");
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_le<std::uint64_t>(is, "extent");
    NdArray a(shape);
    for (auto& x : a.data()) x = std::bit_cast<double>(detail::get_le<std::uint64_t>(is, "payload"));
    out.push_back({std::move(name), std::move(a)});
  }
  return out;
}

inline void save_bundle(const std::string& path, const ArrayBundle& bundle) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_bundle(os, bundle);
}

inline ArrayBundle load_bundle(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "' for reading");
  try {
    return read_bundle(is);
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

inline const NdArray& find_array(const ArrayBundle& bundle, std::string_view name) {
  for (const auto& a : bundle)
    if (a.name == name) return a.array;
  throw IoError("container: missing array '" + std::string(name) + "'");
}

inline ArrayBundle to_bundle(const ParamSet& p) {
  ArrayBundle b;
  p.visit([&](std::string_view name, const NdArray& a, bool) { b.push_back({std::string(name), a}); });
  return b;
}

inline ParamSet params_from_bundle(const ArrayBundle& bundle) {
  ParamSet p;
  p.visit([&](std::string_view name, NdArray& a, bool) { a = find_array(bundle, name); });
  const auto d = p.dims();
  if (p.W1.shape() != Shape{d.hidden, d.in_channels} || p.b1.shape() != Shape{d.hidden} ||
      p.W2.shape() != Shape{d.embed, d.hidden} || p.b2.shape() != Shape{d.embed} ||
      p.T.shape() != Shape{d.classes, d.embed} || p.scale.shape() != Shape{1})
    throw IoError("checkpoint: inconsistent parameter shapes");
  return p;
}

inline void save_checkpoint(const std::string& path, const ParamSet& p) { save_bundle(path, to_bundle(p)); }
inline ParamSet load_checkpoint(const std::string& path) { return params_from_bundle(load_bundle(path)); }

namespace detail {

inline void dump_images(ArrayBundle& out, const std::string& prefix, const std::vector<LabeledImage>& images) {
  out.push_back({prefix + "/count", NdArray({1}, static_cast<double>(images.size()))});
  if (images.empty()) return;
  const std::size_t n = images.size(), H = images[0].height(), W = images[0].width(), ch = images[0].pixels.dim(2);
  NdArray px({n, H, W, ch}), lab({n, H * W}), meta({n, 3});
  for (std::size_t j = 0; j < n; ++j) {
    const auto& im = images[j];
    std::copy(im.pixels.data().begin(), im.pixels.data().end(), px.data().begin() + static_cast<std::ptrdiff_t>(j * H * W * ch));
    for (std::size_t i = 0; i < H * W; ++i) lab[j * H * W + i] = im.labeled() ? im.labels[i] : -1.0;
    meta[j * 3 + 0] = im.domain;
    meta[j * 3 + 1] = static_cast<double>(im.uid);
    meta[j * 3 + 2] = im.labeled() ? 1.0 : 0.0;
  }
  out.push_back({prefix + "/pixels", std::move(px)});
  out.push_back({prefix + "/labels", std::move(lab)});
  out.push_back({prefix + "/meta", std::move(meta)});
}

inline std::vector<LabeledImage> undump_images(const ArrayBundle& in, const std::string& prefix) {
  const auto n = static_cast<std::size_t>(find_array(in, prefix + "/count")[0]);
  std::vector<LabeledImage> out;
  if (n == 0) return out;
  const NdArray& px = find_array(in, prefix + "/pixels");
  const NdArray& lab = find_array(in, prefix + "/labels");
  const NdArray& meta = find_array(in, prefix + "/meta");
  if (px.rank() != 4 || px.dim(0) != n || meta.dim(0) != n || lab.dim(0) != n)
    throw IoError("dataset: inconsistent arrays under '" + prefix + "'");
  const std::size_t H = px.dim(1), W = px.dim(2), ch = px.dim(3);
  for (std::size_t j = 0; j < n; ++j) {
    LabeledImage im;
    im.pixels = NdArray({H, W, ch});
    std::copy_n(px.data().begin() + static_cast<std::ptrdiff_t>(j * H * W * ch), H * W * ch, im.pixels.data().begin());
    if (meta[j * 3 + 2] != 0.0) {
      im.labels.resize(H * W);
      for (std::size_t i = 0; i < H * W; ++i) im.labels[i] = static_cast<int>(lab[j * H * W + i]);
    }
    im.domain = static_cast<int>(meta[j * 3 + 0]);
    im.uid = static_cast<std::uint64_t>(meta[j * 3 + 1]);
    out.push_back(std::move(im));
  }
  return out;
}

}  // namespace detail

/// Client datasets and the eval split as named arrays. Source data is never dumped.
inline ArrayBundle dataset_bundle(const std::vector<ClientDataset>& clients, const std::vector<LabeledImage>& eval) {
  ArrayBundle b;
  if (clients.empty()) throw IoError("dataset: nothing to dump");
  NdArray ids({clients.size()});
  for (std::size_t k = 0; k < clients.size(); ++k) ids[k] = clients[k].client_id;
  b.push_back({"clients", std::move(ids)});
  for (const auto& c : clients) detail::dump_images(b, "client" + std::to_string(c.client_id), c.images);
  detail::dump_images(b, "eval", eval);
  return b;
}

struct DatasetDump {
  std::vector<ClientDataset> clients;
  std::vector<LabeledImage> eval;
};

inline DatasetDump dataset_from_bundle(const ArrayBundle& b) {
  DatasetDump d;
  const NdArray& ids = find_array(b, "clients");
  for (double id : ids.data()) {
    ClientDataset c;
    c.client_id = static_cast<int>(id);
    c.images = detail::undump_images(b, "client" + std::to_string(c.client_id));
    for (const auto& im : c.images) c.domains.push_back(im.domain);
    std::sort(c.domains.begin(), c.domains.end());
    c.domains.erase(std::unique(c.domains.begin(), c.domains.end()), c.domains.end());
    d.clients.push_back(std::move(c));
  }
  d.eval = detail::undump_images(b, "eval");
  return d;
}

// ---------------------------------------------------------------------------
// Flat key=value configuration

/// Parsed key=value lines with source positions for diagnostics.
class KeyValueFile {
 public:
  struct Entry {
    std::string value;
    std::size_t line = 0;
    bool used = false;
  };

  static KeyValueFile parse(std::istream& is, std::string origin) {
    KeyValueFile f;
    f.origin_ = std::move(origin);
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(is, raw)) {
      ++lineno;
      if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
      const std::string line = trim(raw);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(f.where(lineno) + "expected key=value, got '" + line + "'");
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError(f.where(lineno) + "empty key");
      if (value.empty()) throw ConfigError(f.where(lineno) + "key '" + key + "' has an empty value");
      for (char c : key)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_'))
          throw ConfigError(f.where(lineno) + "invalid character in key '" + key + "'");
      if (auto it = f.entries_.find(key); it != f.entries_.end())
        throw ConfigError(f.where(lineno) + "duplicate key '" + key + "' (first set on line " +
                          std::to_string(it->second.line) + ")");
      f.entries_.emplace(std::move(key), Entry{std::move(value), lineno, false});
    }
    return f;
  }

  static KeyValueFile load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config '" + path + "'");
    return parse(is, path);
  }

  [[nodiscard]] bool has(const std::string& key) const { return entries_.contains(key); }
  [[nodiscard]] const std::string& origin() const noexcept { return origin_; }

  /// Typed lookup of a key that must be present.
  template <typename T>
  T require(const std::string& key) {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw ConfigError(origin_ + ": missing required key '" + key + "'");
    return convert<T>(key, it->second);
  }

  template <typename T>
  void optional(const std::string& key, T& target) {
    if (auto it = entries_.find(key); it != entries_.end()) target = convert<T>(key, it->second);
  }

  /// Fails on the first key never consumed, which catches misspellings.
  void reject_unused() const {
    for (const auto& [key, e] : entries_)
      if (!e.used) throw ConfigError(where(e.line) + "unknown key '" + key + "'");
  }

  [[nodiscard]] std::string where(std::size_t line) const { return origin_ + ":" + std::to_string(line) + ": "; }
  [[nodiscard]] std::size_t line_of(const std::string& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? 0 : it->second.line;
  }

 private:
  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
  }

  template <typename T>
  T convert(const std::string& key, Entry& e) {
    e.used = true;
    const std::string& v = e.value;
    auto fail = [&](const char* kind) -> ConfigError {
      return ConfigError(where(e.line) + "key '" + key + "': expected " + kind + ", got '" + v + "'");
    };
    if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (v == "true" || v == "1") return true;
      if (v == "false" || v == "0") return false;
      throw fail("true or false");
    } else if constexpr (std::is_floating_point_v<T>) {
      T out{};
      const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
      if (ec != std::errc{} || ptr != v.data() + v.size() || !std::isfinite(out)) throw fail("a finite number");
      return out;
    } else {
      T out{};
      const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
      if (ec != std::errc{} || ptr != v.data() + v.size()) throw fail(std::is_signed_v<T> ? "an integer" : "a non-negative integer");
      return out;
    }
  }

  std::string origin_;
  std::map<std::string, Entry> entries_;
};

/// Everything one experiment needs: benchmark, model, pretraining, federation and baselines.
struct RunConfig {
  Scenario scenario = Scenario::kClear2Adverse;
  std::uint64_t seed = 0;
  BenchmarkSizes data;
  ModelDims model;
  PretrainConfig pretrain = [] {
    PretrainConfig p;
    p.unlabeled_fraction = 0.5;
    return p;
  }();
  FedConfig fed;
  std::size_t cust_epochs = 40;
};

inline Scenario parse_scenario(const std::string& s) {
  if (s == "clear2adverse" || s == "weather") return Scenario::kClear2Adverse;
  if (s == "syn2real" || s == "city") return Scenario::kSyn2Real;
  throw ConfigError("unknown scenario '" + s + "' (expected clear2adverse or syn2real)");
}

inline Aggregator parse_aggregator(const std::string& s) {
  if (s == "fedavg") return Aggregator::kFedAvg;
  if (s == "fedswa") return Aggregator::kFedSwa;
  throw ConfigError("unknown aggregator '" + s + "' (expected fedavg or fedswa)");
}

inline LabelMode parse_label_mode(const std::string& s) {
  if (s == "unsup") return LabelMode::kUnsup;
  if (s == "semisup") return LabelMode::kSemisup;
  if (s == "sup") return LabelMode::kSup;
  throw ConfigError("unknown mode '" + s + "' (expected unsup, semisup or sup)");
}

namespace detail {

/// Parses an enumerated value, rethrowing with the key's line.
template <typename Parse>
auto parse_enum(KeyValueFile& kv, const std::string& key, Parse parse) {
  const auto line = kv.line_of(key);
  try {
    return parse(kv.require<std::string>(key));
  } catch (const ConfigError& e) {
    if (line == 0) throw;
    throw ConfigError(kv.where(line) + e.what());
  }
}

inline void check_range(const KeyValueFile& kv, const std::string& key, double v, double lo, double hi) {
  if (!(v >= lo && v <= hi)) {
    std::ostringstream os;
    os << (kv.line_of(key) ? kv.where(kv.line_of(key)) : kv.origin() + ": ") << "key '" << key << "' = " << v
       << " outside [" << lo << ", " << hi << "]";
    throw ConfigError(os.str());
  }
}

}  // namespace detail

inline RunConfig run_config_from(KeyValueFile& kv) {
  RunConfig rc;
  rc.scenario = detail::parse_enum(kv, "scenario", parse_scenario);
  rc.seed = kv.require<std::uint64_t>("seed");

  auto& d = rc.data;
  kv.optional("data.height", d.height);
  kv.optional("data.width", d.width);
  kv.optional("data.channels", d.channels);
  kv.optional("data.classes", d.classes);
  kv.optional("data.source_images", d.source_images);
  kv.optional("data.eval_images", d.eval_images);
  kv.optional("data.clients", d.clients);
  kv.optional("data.images_per_condition", d.images_per_condition);
  kv.optional("data.cities", d.cities);
  kv.optional("data.city_min_images", d.city_min_images);
  kv.optional("data.city_max_images", d.city_max_images);
  kv.optional("data.noise_sigma", d.noise_sigma);
  kv.optional("data.shift_strength", d.shift_strength);
  rc.model.in_channels = d.channels;
  rc.model.classes = d.classes;
  kv.optional("model.hidden", rc.model.hidden);
  kv.optional("model.embed", rc.model.embed);

  auto& aug = rc.fed.augment;
  kv.optional("augment.flip_prob", aug.flip_prob);
  kv.optional("augment.sigma_weak", aug.sigma_weak);
  kv.optional("augment.sigma_strong", aug.sigma_strong);
  kv.optional("augment.gain_lo", aug.gain_lo);
  kv.optional("augment.gain_hi", aug.gain_hi);
  kv.optional("augment.gray_prob", aug.gray_prob);
  kv.optional("augment.drop_prob", aug.drop_prob);
  kv.optional("augment.cutmix_prob", aug.cutmix_prob);
  kv.optional("augment.strong_labeled", aug.strong_labeled);

  auto& p = rc.pretrain;
  p.epochs = kv.require<std::size_t>("pretrain.epochs");
  p.schedule.base_lr = kv.require<double>("pretrain.lr");
  kv.optional("pretrain.batch_size", p.batch_size);
  kv.optional("pretrain.power", p.schedule.power);
  kv.optional("pretrain.unlabeled_fraction", p.unlabeled_fraction);
  kv.optional("pretrain.lambda_cons", p.lambda_cons);
  kv.optional("pretrain.tau", p.tau);
  kv.optional("pretrain.ema_momentum", p.ema_momentum);
  kv.optional("pretrain.ohem_keep", p.ohem_keep);
  p.augment = aug;
  p.seed = rc.seed;

  auto& f = rc.fed;
  f.rounds = kv.require<std::size_t>("fed.rounds");
  f.clients_per_round = kv.require<std::size_t>("fed.clients_per_round");
  f.schedule.base_lr = kv.require<double>("fed.lr");
  kv.optional("fed.local_epochs", f.local_epochs);
  kv.optional("fed.batch_size", f.batch_size);
  if (kv.has("fed.agg")) f.agg = detail::parse_enum(kv, "fed.agg", parse_aggregator);
  if (kv.has("fed.mode")) f.mode = detail::parse_enum(kv, "fed.mode", parse_label_mode);
  kv.optional("fed.swa_gamma", f.swa_gamma);
  if (kv.has("fed.swa_weighting"))
    f.swa_weighting = detail::parse_enum(kv, "fed.swa_weighting", [](const std::string& s) {
      if (s == "uniform") return SwaWeighting::kUniform;
      if (s == "size") return SwaWeighting::kSize;
      throw ConfigError("unknown weighting '" + s + "' (expected uniform or size)");
    });
  kv.optional("fed.swa_delta", f.swa_delta);
  if (kv.has("fed.schedule"))
    f.schedule.kind = detail::parse_enum(kv, "fed.schedule", [](const std::string& s) {
      if (s == "poly") return ScheduleKind::kPolynomial;
      if (s == "constant") return ScheduleKind::kConstant;
      throw ConfigError("unknown schedule '" + s + "' (expected poly or constant)");
    });
  kv.optional("fed.power", f.schedule.power);
  kv.optional("fed.lr_floor", f.schedule.floor);
  if (kv.has("fed.lr_progress"))
    f.lr_progress = detail::parse_enum(kv, "fed.lr_progress", [](const std::string& s) {
      if (s == "round") return LrProgress::kRound;
      if (s == "local") return LrProgress::kLocal;
      throw ConfigError("unknown lr_progress '" + s + "' (expected round or local)");
    });
  kv.optional("fed.lambda_sup", f.lambda_sup);
  kv.optional("fed.lambda_cons", f.lambda_cons);
  kv.optional("fed.lambda_t", f.lambda_t);
  kv.optional("fed.lambda_mclip", f.lambda_mclip);
  kv.optional("fed.tau", f.tau);
  kv.optional("fed.tau_t", f.tau_t);
  kv.optional("fed.tau_p", f.tau_p);
  kv.optional("fed.ohem_keep", f.ohem_keep);
  if (kv.has("fed.teacher"))
    f.teacher_mode = detail::parse_enum(kv, "fed.teacher", [](const std::string& s) {
      if (s == "frozen") return TeacherMode::kFrozen;
      if (s == "ema") return TeacherMode::kEma;
      throw ConfigError("unknown teacher '" + s + "' (expected frozen or ema)");
    });
  kv.optional("fed.ema_momentum", f.ema_momentum);
  kv.optional("fed.labeled_fraction", f.labeled_fraction);
  kv.optional("fed.eval_every", f.eval_every);
  kv.optional("fed.threads", f.threads);
  f.seed = rc.seed;
  kv.optional("cust.epochs", rc.cust_epochs);
  kv.reject_unused();

  using detail::check_range;
  check_range(kv, "data.noise_sigma", d.noise_sigma, 0.0, 10.0);
  check_range(kv, "data.shift_strength", d.shift_strength, 0.0, 2.0);
  check_range(kv, "data.classes", static_cast<double>(d.classes), 1.0, 1024.0);
  check_range(kv, "data.channels", static_cast<double>(d.channels), 1.0, 1024.0);
  check_range(kv, "data.height", static_cast<double>(d.height), 1.0, 4096.0);
  check_range(kv, "data.width", static_cast<double>(d.width), 1.0, 4096.0);
  check_range(kv, "model.hidden", static_cast<double>(rc.model.hidden), 1.0, 4096.0);
  check_range(kv, "model.embed", static_cast<double>(rc.model.embed), 1.0, 4096.0);
  check_range(kv, "augment.flip_prob", aug.flip_prob, 0.0, 1.0);
  check_range(kv, "augment.gray_prob", aug.gray_prob, 0.0, 1.0);
  check_range(kv, "augment.cutmix_prob", aug.cutmix_prob, 0.0, 1.0);
  check_range(kv, "augment.drop_prob", aug.drop_prob, 0.0, 0.99);
  check_range(kv, "augment.sigma_weak", aug.sigma_weak, 0.0, 10.0);
  check_range(kv, "augment.sigma_strong", aug.sigma_strong, 0.0, 10.0);
  check_range(kv, "augment.gain_lo", aug.gain_lo, 0.0, aug.gain_hi);
  check_range(kv, "pretrain.lr", p.schedule.base_lr, 1e-12, 10.0);
  check_range(kv, "pretrain.unlabeled_fraction", p.unlabeled_fraction, 0.0, 1.0);
  check_range(kv, "pretrain.ema_momentum", p.ema_momentum, 0.0, 1.0);
  check_range(kv, "pretrain.ohem_keep", p.ohem_keep, 1e-9, 1.0);
  check_range(kv, "fed.lr", f.schedule.base_lr, 1e-12, 10.0);
  check_range(kv, "fed.power", f.schedule.power, 0.5, 100.0);
  check_range(kv, "fed.lr_floor", f.schedule.floor, 0.0, 1.0);
  check_range(kv, "fed.swa_gamma", f.swa_gamma, 0.0, 1.0);
  check_range(kv, "fed.swa_delta", f.swa_delta, 0.0, 1.0);
  check_range(kv, "fed.ema_momentum", f.ema_momentum, 0.0, 1.0);
  check_range(kv, "fed.ohem_keep", f.ohem_keep, 1e-9, 1.0);
  check_range(kv, "fed.labeled_fraction", f.labeled_fraction, 0.0, 1.0);
  check_range(kv, "fed.tau", f.tau, 0.0, 2.0);
  check_range(kv, "fed.tau_t", f.tau_t, 0.0, 2.0);
  check_range(kv, "fed.tau_p", f.tau_p, 0.0, 2.0);
  check_range(kv, "fed.clients_per_round", static_cast<double>(f.clients_per_round), 1.0, 1e9);
  check_range(kv, "fed.local_epochs", static_cast<double>(f.local_epochs), 1.0, 1e9);
  check_range(kv, "fed.batch_size", static_cast<double>(f.batch_size), 1.0, 1e9);
  check_range(kv, "pretrain.batch_size", static_cast<double>(p.batch_size), 1.0, 1e9);
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  auto kv = KeyValueFile::load(path);
  return run_config_from(kv);
}

// ---------------------------------------------------------------------------
// Metrics CSV

/// Locale-independent, 17 significant digits.
inline std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 64> buf;
  const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v, std::chars_format::general, 17);
  return std::string(buf.data(), r.ptr);
}

inline std::string metrics_header(std::size_t classes) {
  std::string h = "round,mode,agg,lr,l_sup,l_cons,l_teacher,l_mclip,masked_frac,miou_eval";
  for (std::size_t c = 0; c < classes; ++c) h += ",iou_" + std::to_string(c);
  return h + ",clients";
}

inline std::string metrics_row(const RoundRecord& r, std::size_t classes) {
  const auto& L = r.losses;
  std::string s = std::to_string(r.round) + "," + to_string(r.mode) + "," + to_string(r.agg);
  for (double v : {r.lr, L.l_sup, L.l_cons_s1 + L.l_cons_s2, L.l_teacher, L.l_mclip_s1 + L.l_mclip_s2,
                   L.masked_pixel_fraction})
    s += "," + format_real(v);
  s += "," + (r.miou_eval ? format_real(*r.miou_eval) : std::string("nan"));
  for (std::size_t c = 0; c < classes; ++c)
    s += "," + (c < r.per_class_iou.size() ? format_real(r.per_class_iou[c]) : std::string("nan"));
  s += ",";
  for (std::size_t k = 0; k < r.clients.size(); ++k) s += (k ? ";" : "") + std::to_string(r.clients[k]);
  return s;
}

/// One row per evaluated round.
inline void write_metrics_csv(std::ostream& os, const std::vector<RoundRecord>& history, std::size_t classes) {
  os << metrics_header(classes) << '\n';
  for (const auto& r : history)
    if (r.miou_eval) os << metrics_row(r, classes) << '\n';
}

inline void write_metrics_csv(const std::string& path, const std::vector<RoundRecord>& history, std::size_t classes) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_metrics_csv(os, history, classes);
  if (!os) throw IoError("write to '" + path + "' failed");
}

inline void write_epoch_csv(const std::string& path, const std::vector<double>& epoch_loss) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << "epoch,loss\n";
  for (std::size_t e = 0; e < epoch_loss.size(); ++e) os << e << ',' << format_real(epoch_loss[e]) << '\n';
  if (!os) throw IoError("write to '" + path + "' failed");
}

}  // namespace frieren
