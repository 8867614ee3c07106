#include "fedmae/fed.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <thread>

#include "fedmae/checkpoint.hpp"
#include "fedmae/error.hpp"

namespace fedmae {

std::string to_string(FedMode mode) { return mode == FedMode::Relay ? "relay" : "fedavg"; }

FedMode parse_fed_mode(const std::string& text) {
  if (text == "relay") return FedMode::Relay;
  if (text == "fedavg") return FedMode::FedAvg;
  throw ValidationError("unknown federated mode '" + text + "' (expected relay or fedavg)");
}

void FedRunConfig::validate() const {
  require(clients >= 1, "config: clients must be >= 1");
  require(clients_per_round >= 1 && clients_per_round <= clients,
          "config: need 1 <= clients_per_round <= clients");
  if (mode == FedMode::Relay)
    require(lineages == clients_per_round,
            "config: relay mode pairs one lineage with each selected client, so lineages must "
            "equal clients_per_round");
  require(batch_size >= 1, "config: batch_size must be >= 1");
  require(mask_ratio >= 0.0 && mask_ratio < 1.0, "config: mask_ratio must be in [0, 1)");
  require(optimizer.lr >= 0.0 && optimizer.eps > 0.0, "config: bad optimizer settings");
  require(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 &&
              optimizer.beta2 < 1.0,
          "config: betas must be in [0, 1)");
  require(checkpoint_every == 0 || !checkpoint_dir.empty(),
          "config: checkpoint_every needs checkpoint_dir");
  model.validate();
}

const std::set<std::string>& FedRunConfig::keys() {
  static const std::set<std::string> k = {
      "clients", "rounds", "local_epochs", "clients_per_round", "mode", "lineages",
      "batch_size", "mask_ratio", "lr", "beta1", "beta2", "eps", "weight_decay", "seed",
      "weighted_average", "checkpoint_every", "checkpoint_dir", "parallel", "workers", "patch",
      "d_enc", "d_dec", "heads", "mlp_ratio"};
  return k;
}

FedRunConfig FedRunConfig::from_config(const KeyValueConfig& cfg,
                                       const std::set<std::string>& extra_keys) {
  std::set<std::string> allowed = keys();
  allowed.insert(extra_keys.begin(), extra_keys.end());
  cfg.reject_unknown(allowed);

  auto size = [&](const std::string& key, std::size_t fallback) {
    const auto v = cfg.get_int(key, static_cast<std::int64_t>(fallback));
    require(v >= 0, "config: " + key + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  FedRunConfig c;
  c.clients = size("clients", c.clients);
  c.rounds = size("rounds", c.rounds);
  c.local_epochs = size("local_epochs", c.local_epochs);
  c.clients_per_round = size("clients_per_round", c.clients_per_round);
  if (cfg.has("mode")) c.mode = parse_fed_mode(cfg.get("mode"));
  c.lineages = size("lineages", c.clients_per_round);
  c.batch_size = size("batch_size", c.batch_size);
  c.mask_ratio = cfg.get_double("mask_ratio", c.mask_ratio);
  c.optimizer.lr = cfg.get_double("lr", c.optimizer.lr);
  c.optimizer.beta1 = cfg.get_double("beta1", c.optimizer.beta1);
  c.optimizer.beta2 = cfg.get_double("beta2", c.optimizer.beta2);
  c.optimizer.eps = cfg.get_double("eps", c.optimizer.eps);
  c.optimizer.weight_decay = cfg.get_double("weight_decay", c.optimizer.weight_decay);
  c.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 0));
  c.weighted_average = cfg.get_bool("weighted_average", c.weighted_average);
  c.checkpoint_every = size("checkpoint_every", c.checkpoint_every);
  c.checkpoint_dir = cfg.get_string("checkpoint_dir", c.checkpoint_dir);
  c.parallel = cfg.get_bool("parallel", c.parallel);
  c.workers = size("workers", c.workers);
  c.patch = size("patch", c.patch);
  c.model.d_enc = size("d_enc", c.model.d_enc);
  c.model.d_dec = size("d_dec", c.model.d_dec);
  c.model.heads = size("heads", c.model.heads);
  c.model.mlp_ratio = size("mlp_ratio", c.model.mlp_ratio);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

void MetricsLog::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "round,unit_id,client_id,loss,seconds\n";
  out << std::setprecision(17);
  for (const auto& r : rows)
    out << r.round << ',' << r.unit_id << ',' << r.client_id << ',' << r.loss << ',' << r.seconds
        << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

double MetricsLog::mean_loss(std::size_t round) const {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& r : rows)
    if (r.round == round) {
      sum += r.loss;
      ++count;
    }
  return count ? sum / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
}

bool MetricsLog::same_results(const MetricsLog& other) const {
  if (rows.size() != other.rows.size()) return false;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& a = rows[i];
    const auto& b = other.rows[i];
    const bool same_loss = (a.loss == b.loss) || (std::isnan(a.loss) && std::isnan(b.loss));
    if (a.round != b.round || a.unit_id != b.unit_id || a.client_id != b.client_id || !same_loss)
      return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> select_clients(std::size_t round, const FedRunConfig& cfg,
                                        const RngStream& root) {
  require(cfg.clients_per_round <= cfg.clients, "select_clients: C > K");
  RngStream rng = root.derive("select", static_cast<std::int64_t>(round));
  std::vector<std::size_t> ids(cfg.clients);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  // Partial Fisher-Yates: the first C slots are a uniform C-subset in
  // uniformly random order.
  for (std::size_t i = 0; i < cfg.clients_per_round; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(cfg.clients - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(cfg.clients_per_round);
  return ids;
}

double local_train(MaeModel& model, AdamW& opt, const PatchSequence& data,
                   const ClientShard& shard, const LocalTrainSpec& spec, const RngStream& rng) {
  require(!shard.indices.empty(), "local_train: empty shard for client " + std::to_string(shard.client));
  require(spec.batch_size >= 1, "local_train: batch size must be >= 1");
  double last_epoch_loss = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t e = 0; e < spec.epochs; ++e) {
    const RngStream epoch_rng = rng.derive("epoch", static_cast<std::int64_t>(e));
    RngStream order_rng = epoch_rng.derive("order", 0);
    std::vector<std::size_t> order = shard.indices;
    order_rng.shuffle(order);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += spec.batch_size) {
      const std::size_t end = std::min(order.size(), start + spec.batch_size);
      const std::span<const std::size_t> ids(order.data() + start, end - start);
      const PatchSequence batch = data.subset(ids);
      sum += train_step(model, opt, batch, spec.mask_ratio,
                        epoch_rng.derive("batch", static_cast<std::int64_t>(batches)));
      ++batches;
    }
    last_epoch_loss = sum / static_cast<double>(batches);
  }
  return last_epoch_loss;
}

MaeModel average_params(std::span<const MaeModel> models, std::span<const double> weights) {
  require(!models.empty(), "average_params: no models");
  require(weights.empty() || weights.size() == models.size(),
          "average_params: weight count does not match model count");
  const MaeModel& first = models.front();
  for (const auto& m : models) {
    require(m.params.names() == first.params.names(), "average_params: parameter names differ");
    for (const auto& [name, p] : first.params)
      require(m.params.at(name).value.shape() == p.value.shape(),
              "average_params: shape mismatch for " + name);
  }
  long double total_weight = 0.0L;
  for (std::size_t j = 0; j < models.size(); ++j)
    total_weight += weights.empty() ? 1.0L : static_cast<long double>(weights[j]);
  require(total_weight > 0.0L, "average_params: weights must sum to a positive value");

  MaeModel out = first;
  for (auto& [name, p] : out.params) {
    p.grad.fill(0.0);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      // Extended-precision accumulation: k copies of x average back to x.
      long double acc = 0.0L;
      for (std::size_t j = 0; j < models.size(); ++j) {
        const long double w = weights.empty() ? 1.0L : static_cast<long double>(weights[j]);
        acc += w * static_cast<long double>(models[j].params.at(name).value[i]);
      }
      p.value[i] = static_cast<double>(acc / total_weight);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

// Runs task(i) for i in [0, count), serially or on worker threads. The first
// exception raised by any task is rethrown after all workers join.
void for_each_unit(std::size_t count, bool parallel, std::size_t workers,
                   const std::function<void(std::size_t)>& task) {
  if (!parallel || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) task(i);
    return;
  }
  const std::size_t nthreads = std::min(count, workers == 0 ? count : workers);
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  pool.reserve(nthreads);
  for (std::size_t t = 0; t < nthreads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          task(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

LocalTrainSpec local_spec(const FedRunConfig& cfg) {
  return {cfg.local_epochs, cfg.batch_size, cfg.mask_ratio};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const ClientShard& shard_for(std::span<const ClientShard> shards, std::size_t client) {
  require(client < shards.size(), "client id " + std::to_string(client) + " has no shard");
  return shards[client];
}

LineageState make_lineage(const FedRunConfig& cfg, const ImageGeometry& geometry, std::size_t id) {
  const RngStream root(cfg.seed);
  // Every lineage starts from the same server-initialized model.
  RngStream init_rng = root.derive("init", 0);
  LineageState lineage;
  lineage.id = id;
  lineage.model = init_mae(geometry, cfg.model, init_rng);
  lineage.optimizer = AdamW(lineage.model.params, cfg.optimizer);
  return lineage;
}

void train_lineage_round(LineageState& lineage, std::size_t client, const PatchSequence& data,
                         std::span<const ClientShard> shards, const FedRunConfig& cfg,
                         std::size_t round, MetricsRow& row) {
  const RngStream rng = RngStream(cfg.seed)
                            .derive("round", static_cast<std::int64_t>(round))
                            .derive("lineage", static_cast<std::int64_t>(lineage.id));
  const auto t0 = std::chrono::steady_clock::now();
  const double loss = local_train(lineage.model, lineage.optimizer, data, shard_for(shards, client),
                                  local_spec(cfg), rng);
  lineage.visits.push_back({round, client, loss});
  row = {round, lineage.id, client, loss, seconds_since(t0)};
}

void write_checkpoints(const ServerState& state, const FedRunConfig& cfg, std::size_t round) {
  const auto dir = std::filesystem::path(cfg.checkpoint_dir) / ("round_" + std::to_string(round));
  try {
    if (state.mode == FedMode::Relay) {
      for (const auto& l : state.lineages)
        save_mae(dir / ("lineage_" + std::to_string(l.id) + ".ckpt"), l.model);
    } else {
      save_mae(dir / "lineage_0.ckpt", state.global);
    }
  } catch (const std::exception& e) {
    throw IoError("round " + std::to_string(round) + ": checkpoint write failed: " + e.what());
  }
}

}  // namespace

ServerState init_server(const FedRunConfig& cfg, const ImageGeometry& geometry) {
  cfg.validate();
  ServerState state;
  state.mode = cfg.mode;
  if (cfg.mode == FedMode::Relay) {
    for (std::size_t i = 0; i < cfg.lineages; ++i) state.lineages.push_back(make_lineage(cfg, geometry, i));
  } else {
    state.global = make_lineage(cfg, geometry, 0).model;
  }
  return state;
}

void run_round_relay(ServerState& state, const PatchSequence& data,
                     std::span<const ClientShard> shards, const FedRunConfig& cfg,
                     std::size_t round) {
  require(state.mode == FedMode::Relay && cfg.mode == FedMode::Relay,
          "run_round_relay: server is not in relay mode");
  const auto selected = select_clients(round, cfg, RngStream(cfg.seed));
  require(selected.size() == state.lineages.size(), "relay: selected clients != lineages");
  std::vector<MetricsRow> rows(selected.size());
  for_each_unit(selected.size(), cfg.parallel, cfg.workers, [&](std::size_t i) {
    train_lineage_round(state.lineages[i], selected[i], data, shards, cfg, round, rows[i]);
  });
  for (auto& r : rows) state.metrics.append(r);
  state.round = round;
}

void run_round_fedavg(ServerState& state, const PatchSequence& data,
                      std::span<const ClientShard> shards, const FedRunConfig& cfg,
                      std::size_t round) {
  require(state.mode == FedMode::FedAvg && cfg.mode == FedMode::FedAvg,
          "run_round_fedavg: server is not in fedavg mode");
  const auto selected = select_clients(round, cfg, RngStream(cfg.seed));
  std::vector<MaeModel> results(selected.size(), state.global);
  std::vector<MetricsRow> rows(selected.size());
  for_each_unit(selected.size(), cfg.parallel, cfg.workers, [&](std::size_t j) {
    const std::size_t client = selected[j];
    // Moments do not survive averaging, so each round starts a fresh optimizer.
    AdamW opt(results[j].params, cfg.optimizer);
    const RngStream rng = RngStream(cfg.seed)
                              .derive("round", static_cast<std::int64_t>(round))
                              .derive("client", static_cast<std::int64_t>(client));
    const auto t0 = std::chrono::steady_clock::now();
    const double loss =
        local_train(results[j], opt, data, shard_for(shards, client), local_spec(cfg), rng);
    rows[j] = {round, 0, client, loss, seconds_since(t0)};
  });
  std::vector<double> weights;
  if (cfg.weighted_average)
    for (auto c : selected) weights.push_back(static_cast<double>(shard_for(shards, c).indices.size()));
  state.global = average_params(results, weights);
  for (auto& r : rows) state.metrics.append(r);
  state.round = round;
}

ServerState run_pretraining(const FedRunConfig& cfg, const PatchSequence& data,
                            std::span<const ClientShard> shards) {
  cfg.validate();
  require(shards.size() == cfg.clients, "run_pretraining: shard count must equal clients");
  ServerState state = init_server(cfg, data.geometry);
  for (std::size_t r = 1; r <= cfg.rounds; ++r) {
    if (cfg.mode == FedMode::Relay)
      run_round_relay(state, data, shards, cfg, r);
    else
      run_round_fedavg(state, data, shards, cfg, r);
    if (cfg.checkpoint_every > 0 && (r % cfg.checkpoint_every == 0 || r == cfg.rounds))
      write_checkpoints(state, cfg, r);
  }
  return state;
}

LineageState run_lineage_isolated(const FedRunConfig& cfg, const PatchSequence& data,
                                  std::span<const ClientShard> shards, std::size_t id) {
  cfg.validate();
  require(cfg.mode == FedMode::Relay, "run_lineage_isolated: relay mode only");
  require(id < cfg.lineages, "run_lineage_isolated: lineage id out of range");
  LineageState lineage = make_lineage(cfg, data.geometry, id);
  MetricsRow row;
  for (std::size_t r = 1; r <= cfg.rounds; ++r) {
    const auto selected = select_clients(r, cfg, RngStream(cfg.seed));
    train_lineage_round(lineage, selected[id], data, shards, cfg, r, row);
  }
  return lineage;
}

}  // namespace fedmae
