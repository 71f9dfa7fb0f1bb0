#pragma once

// Benchmark protocols wired from a RunConfig: Source-Only, FFREEDG,
// Federated TSFT-F / TSFT-1/4 and CUST all start from the same pretrained
// checkpoint and the same client pool.

#include <iosfwd>
#include <vector>

#include "frieren/fed.hpp"
#include "frieren/io.hpp"
#include "frieren/model.hpp"
#include "frieren/synthdata.hpp"

namespace frieren {

inline Benchmark build_benchmark(const RunConfig& rc) { return make_benchmark(rc.seed, rc.scenario, rc.data); }

/// Server pretraining on the benchmark's source set, then the source set is discarded.
inline PretrainResult pretrain_server(Benchmark& bench, const RunConfig& rc, std::ostream* progress = nullptr) {
  const ParamSet init = init_params(rc.seed, rc.model);
  PretrainConfig pc = rc.pretrain;
  pc.seed = rc.seed;
  PretrainResult r = pretrain(bench.source.images(), init, pc, nullptr, progress);
  bench.source.discard();
  return r;
}

/// Client datasets with labels kept according to the label mode.
inline std::vector<ClientDataset> clients_for(const Benchmark& bench, LabelMode mode, const RunConfig& rc) {
  std::vector<ClientDataset> clients = bench.clients;
  apply_label_mode(clients, mode, rc.fed.labeled_fraction, rc.seed);
  return clients;
}

/// Federated run from `init`; the prior teacher is a frozen snapshot of `init`.
inline FederationResult federate(const RunConfig& rc, const ParamSet& init, const std::vector<ClientDataset>& clients,
                                 std::span<const LabeledImage> eval_set, std::ostream* progress = nullptr) {
  const PriorTeacher prior = make_prior_teacher(init, rc.fed.tau_p);
  return run_federation(rc.fed, init, clients, eval_set, &prior, progress);
}

/// Centralized self-training on the pooled, label-stripped client data.
inline ParamSet centralized_self_training(const RunConfig& rc, const ParamSet& init, const Benchmark& bench) {
  std::vector<LabeledImage> pool = bench.target_pool();
  for (auto& im : pool) im.labels.clear();
  FedConfig cfg = rc.fed;
  cfg.rounds = rc.cust_epochs;
  cfg.mode = LabelMode::kUnsup;
  const PriorTeacher prior = make_prior_teacher(init, cfg.tau_p);
  return cust(init, std::move(pool), cfg, &prior);
}

}  // namespace frieren
