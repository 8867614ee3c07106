#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fedmae/config.hpp"
#include "fedmae/data.hpp"
#include "fedmae/mae.hpp"
#include "fedmae/optim.hpp"

namespace fedmae {

enum class FedMode { Relay, FedAvg };

std::string to_string(FedMode mode);
FedMode parse_fed_mode(const std::string& text);

// Defaults are the full-scale protocol (200 rounds, 10 local epochs, 100
// clients, 5 per round); desk runs override them.
struct FedRunConfig {
  std::size_t clients = 100;          // K
  std::size_t rounds = 200;           // R
  std::size_t local_epochs = 10;      // E
  std::size_t clients_per_round = 5;  // C
  FedMode mode = FedMode::Relay;
  std::size_t lineages = 5;  // L, relay mode
  std::size_t batch_size = 32;
  double mask_ratio = 0.75;
  AdamWConfig optimizer;
  std::uint64_t seed = 0;
  bool weighted_average = false;
  std::size_t checkpoint_every = 0;  // 0 disables checkpoints
  std::string checkpoint_dir;
  bool parallel = false;
  std::size_t workers = 0;  // 0: one per unit of work
  std::size_t patch = 4;
  MaeDims model;

  void validate() const;
  static const std::set<std::string>& keys();
  // Reads every FedRunConfig key present in cfg. Keys outside keys() and
  // extra_keys are rejected.
  static FedRunConfig from_config(const KeyValueConfig& cfg,
                                  const std::set<std::string>& extra_keys = {});
};

struct Visit {
  std::size_t round = 0;
  std::size_t client = 0;
  double loss = 0.0;
};

struct LineageState {
  std::size_t id = 0;
  MaeModel model;
  AdamW optimizer;
  std::vector<Visit> visits;
};

struct MetricsRow {
  std::size_t round = 0;
  std::size_t unit_id = 0;  // lineage id, or 0 for the fedavg global model
  std::size_t client_id = 0;
  double loss = 0.0;
  double seconds = 0.0;
};

struct MetricsLog {
  std::vector<MetricsRow> rows;

  void append(MetricsRow row) { rows.push_back(row); }
  // Header: round,unit_id,client_id,loss,seconds
  void write_csv(const std::filesystem::path& path) const;
  // Mean loss over the rows of one round.
  double mean_loss(std::size_t round) const;
  // Equality ignoring the wall-clock column.
  bool same_results(const MetricsLog& other) const;
};

struct ServerState {
  FedMode mode = FedMode::Relay;
  std::vector<LineageState> lineages;  // relay
  MaeModel global;                     // fedavg
  std::size_t round = 0;
  MetricsLog metrics;
};

struct LocalTrainSpec {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double mask_ratio = 0.75;
};

// Uniform sample of C distinct clients, deterministic per (seed, round).
std::vector<std::size_t> select_clients(std::size_t round, const FedRunConfig& cfg,
                                        const RngStream& root);

// E passes over the shard in shuffled batch order, a fresh mask per batch.
// Returns the mean loss of the final epoch (NaN when E = 0).
double local_train(MaeModel& model, AdamW& opt, const PatchSequence& data,
                   const ClientShard& shard, const LocalTrainSpec& spec, const RngStream& rng);

// Unweighted mean by default; with weights, sum(w x) / sum(w).
MaeModel average_params(std::span<const MaeModel> models, std::span<const double> weights = {});

ServerState init_server(const FedRunConfig& cfg, const ImageGeometry& geometry);
void run_round_relay(ServerState& state, const PatchSequence& data,
                     std::span<const ClientShard> shards, const FedRunConfig& cfg,
                     std::size_t round);
void run_round_fedavg(ServerState& state, const PatchSequence& data,
                      std::span<const ClientShard> shards, const FedRunConfig& cfg,
                      std::size_t round);

// R rounds of the configured mode. Writes round_<r>/lineage_<i>.ckpt under
// cfg.checkpoint_dir every cfg.checkpoint_every rounds and after the last one.
ServerState run_pretraining(const FedRunConfig& cfg, const PatchSequence& data,
                            std::span<const ClientShard> shards);

// Trains a single relay lineage through all rounds without building the
// others. Matches lineage `id` of run_pretraining bit for bit.
LineageState run_lineage_isolated(const FedRunConfig& cfg, const PatchSequence& data,
                                  std::span<const ClientShard> shards, std::size_t id);

}  // namespace fedmae
