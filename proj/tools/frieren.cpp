// frieren: experiment runner for the federated source-free benchmark protocols.

#include <CLI11.hpp>

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "frieren/frieren.hpp"

namespace fs = std::filesystem;
using namespace frieren;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kDiverged = 3, kIo = 4 };

std::size_t threads_from_env(std::size_t fallback) {
  const char* v = std::getenv("FRIEREN_THREADS");
  if (!v || !*v) return fallback;
  std::size_t n = 0;
  const std::string s(v);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
  if (ec != std::errc{} || ptr != s.data() + s.size()) throw ConfigError("FRIEREN_THREADS must be a non-negative integer");
  return n;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir + "'");
}

void print_report(const IoUReport& r) {
  std::cout << "class,iou\n";
  for (std::size_t c = 0; c < r.per_class.size(); ++c) std::cout << c << ',' << format_real(r.per_class[c]) << '\n';
  std::cout << "mIoU," << format_real(r.mean) << '\n';
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs";
  std::string init;
  std::string agg;
  std::string mode;
  std::string data;
  std::string ckpt;
  std::string split = "eval";
  std::string scenario;
  std::string dump;
  std::size_t trials = 20;
  bool verbose = false;
};

RunConfig load(const Options& o) {
  RunConfig rc = load_run_config(o.config);
  if (o.seed) {
    rc.seed = *o.seed;
    rc.pretrain.seed = rc.fed.seed = *o.seed;
  }
  rc.fed.threads = threads_from_env(rc.fed.threads);
  return rc;
}

/// Client pool and eval split from a dataset dump, or regenerated from the config.
std::pair<std::vector<ClientDataset>, std::vector<LabeledImage>> target_data(const Options& o, const RunConfig& rc) {
  if (!o.data.empty()) {
    auto d = dataset_from_bundle(load_bundle(o.data));
    return {std::move(d.clients), std::move(d.eval)};
  }
  Benchmark b = build_benchmark(rc);
  b.source.discard();
  return {std::move(b.clients), std::move(b.eval)};
}

int cmd_pretrain(const Options& o) {
  const RunConfig rc = load(o);
  Benchmark bench = build_benchmark(rc);
  const auto res = pretrain_server(bench, rc, o.verbose ? &std::cerr : nullptr);
  ensure_dir(o.out);
  save_checkpoint((fs::path(o.out) / "pretrained.frzn").string(), res.params);
  write_epoch_csv((fs::path(o.out) / "pretrain_loss.csv").string(), res.epoch_loss);
  const auto rep = evaluate(res.params, bench.eval);
  std::cout << "source-only eval mIoU " << format_real(rep.mean) << '\n';
  return kOk;
}

int cmd_federate(const Options& o) {
  RunConfig rc = load(o);
  if (!o.agg.empty()) rc.fed.agg = parse_aggregator(o.agg);
  if (!o.mode.empty()) rc.fed.mode = parse_label_mode(o.mode);
  const ParamSet init = load_checkpoint(o.init);
  auto [clients, eval] = target_data(o, rc);
  apply_label_mode(clients, rc.fed.mode, rc.fed.labeled_fraction, rc.seed);
  const auto res = federate(rc, init, clients, eval, o.verbose ? &std::cerr : nullptr);
  ensure_dir(o.out);
  save_checkpoint((fs::path(o.out) / "final.frzn").string(), res.params);
  write_metrics_csv((fs::path(o.out) / "metrics.csv").string(), res.history, init.dims().classes);
  if (!res.history.empty() && res.history.back().miou_eval)
    std::cout << "final eval mIoU " << format_real(*res.history.back().miou_eval) << '\n';
  return kOk;
}

int cmd_cust(const Options& o) {
  const RunConfig rc = load(o);
  const ParamSet init = load_checkpoint(o.init);
  Benchmark bench = build_benchmark(rc);
  bench.source.discard();
  const ParamSet w = centralized_self_training(rc, init, bench);
  ensure_dir(o.out);
  save_checkpoint((fs::path(o.out) / "cust.frzn").string(), w);
  std::cout << "CUST eval mIoU " << format_real(evaluate(w, bench.eval).mean) << '\n';
  return kOk;
}

int cmd_evaluate(const Options& o) {
  const RunConfig rc = load(o);
  const ParamSet p = load_checkpoint(o.ckpt);
  std::vector<LabeledImage> images;
  if (o.split == "source") {
    images = build_benchmark(rc).source.images();
  } else {
    auto [clients, eval] = target_data(o, rc);
    if (o.split == "eval") {
      images = std::move(eval);
    } else if (o.split == "clients") {
      for (auto& c : clients) images.insert(images.end(), c.images.begin(), c.images.end());
    } else {
      throw ConfigError("unknown split '" + o.split + "' (expected eval, clients or source)");
    }
  }
  print_report(evaluate(p, images));
  return kOk;
}

int cmd_gradcheck(const Options& o) {
  GradcheckOptions opt;
  opt.trials = o.trials;
  bool ok = true;
  std::cout << "term,trials,checked,failures,max_rel_error\n";
  for (GradTerm t : kAllGradTerms) {
    const auto r = gradcheck(t, opt);
    std::cout << to_string(t) << ',' << r.trials << ',' << r.checked << ',' << r.failures << ','
              << format_real(r.max_rel_error) << '\n';
    ok = ok && r.passed();
  }
  return ok ? kOk : kFailure;
}

int cmd_partition(const Options& o) {
  RunConfig rc;
  if (!o.config.empty()) rc = load(o);
  if (!o.scenario.empty()) rc.scenario = parse_scenario(o.scenario);
  if (o.seed) rc.seed = *o.seed;
  Benchmark b = build_benchmark(rc);
  b.source.discard();
  std::cout << "client,size,domains\n";
  for (const auto& c : b.clients) {
    std::cout << c.client_id << ',' << c.size() << ',';
    for (std::size_t k = 0; k < c.domains.size(); ++k) std::cout << (k ? ";" : "") << b.client_domains.at(static_cast<std::size_t>(c.domains[k] - 1)).name;
    std::cout << '\n';
  }
  if (!o.dump.empty()) save_bundle(o.dump, dataset_bundle(b.clients, b.eval));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated source-free domain generalization on synthetic segmentation data"};
  app.require_subcommand(1);
  Options o;

  auto add_config = [&](CLI::App* s, bool required) {
    auto* opt = s->add_option("--config", o.config, "key=value run configuration");
    if (required) opt->required();
    s->add_option("--seed", o.seed, "override the configured seed");
    s->add_flag("-v,--verbose", o.verbose, "progress on stderr");
  };

  auto* pre = app.add_subcommand("pretrain", "server pretraining on the labeled source domain");
  add_config(pre, true);
  pre->add_option("--out", o.out, "output directory")->capture_default_str();

  auto* fed = app.add_subcommand("federate", "federated training from a pretrained checkpoint");
  add_config(fed, true);
  fed->add_option("--init", o.init, "initial checkpoint")->required();
  fed->add_option("--agg", o.agg, "fedavg | fedswa");
  fed->add_option("--mode", o.mode, "unsup | semisup | sup");
  fed->add_option("--data", o.data, "dataset dump from `partition --dump`");
  fed->add_option("--out", o.out, "output directory")->capture_default_str();

  auto* cu = app.add_subcommand("cust", "centralized self-training on the pooled target data");
  add_config(cu, true);
  cu->add_option("--init", o.init, "initial checkpoint")->required();
  cu->add_option("--out", o.out, "output directory")->capture_default_str();

  auto* ev = app.add_subcommand("evaluate", "per-class IoU and mIoU of a checkpoint");
  add_config(ev, true);
  ev->add_option("--ckpt", o.ckpt, "checkpoint")->required();
  ev->add_option("--split", o.split, "eval | clients | source")->capture_default_str();
  ev->add_option("--data", o.data, "dataset dump from `partition --dump`");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference certification of every loss term");
  gc->add_option("--trials", o.trials, "random configurations per term")->capture_default_str();

  auto* pa = app.add_subcommand("partition", "client size and domain table");
  add_config(pa, false);
  pa->add_option("--scenario", o.scenario, "clear2adverse | syn2real (aliases weather | city)");
  pa->add_option("--dump", o.dump, "write clients and eval split to a container file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*pre) return cmd_pretrain(o);
    if (*fed) return cmd_federate(o);
    if (*cu) return cmd_cust(o);
    if (*ev) return cmd_evaluate(o);
    if (*gc) return cmd_gradcheck(o);
    if (*pa) return cmd_partition(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
