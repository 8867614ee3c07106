#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "fedmae/checkpoint.hpp"
#include "fedmae/error.hpp"
#include "fedmae/fed.hpp"
#include "helpers.hpp"

using namespace fedmae;

namespace {

FedRunConfig tiny_run(FedMode mode) {
  FedRunConfig c;
  c.clients = 6;
  c.rounds = 3;
  c.local_epochs = 1;
  c.clients_per_round = 3;
  c.lineages = 3;
  c.mode = mode;
  c.batch_size = 4;
  c.mask_ratio = 0.5;
  c.seed = 21;
  c.patch = 2;
  c.model = testing::tiny_dims();
  return c;
}

std::vector<ClientShard> even_shards(std::size_t clients, std::size_t per_client) {
  std::vector<ClientShard> shards(clients);
  for (std::size_t k = 0; k < clients; ++k) {
    shards[k].client = k;
    for (std::size_t i = 0; i < per_client; ++i) shards[k].indices.push_back(k * per_client + i);
  }
  return shards;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("client selection is distinct and deterministic") {
  FedRunConfig c = tiny_run(FedMode::Relay);
  c.clients = 20;
  c.clients_per_round = 5;
  c.lineages = 5;
  const RngStream root(3);
  std::set<std::vector<std::size_t>> seen;
  for (std::size_t r = 1; r <= 30; ++r) {
    const auto s = select_clients(r, c, root);
    CHECK(s.size() == 5);
    CHECK(std::set<std::size_t>(s.begin(), s.end()).size() == 5);
    for (auto k : s) CHECK(k < 20);
    CHECK(select_clients(r, c, RngStream(3)) == s);
    seen.insert(s);
  }
  CHECK(seen.size() > 20);
  c.clients_per_round = 21;
  CHECK_THROWS_AS(select_clients(1, c, root), ValidationError);
}

TEST_CASE("config validation and parsing") {
  FedRunConfig c = tiny_run(FedMode::Relay);
  CHECK_NOTHROW(c.validate());
  c.lineages = 2;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny_run(FedMode::FedAvg);
  c.lineages = 1;
  CHECK_NOTHROW(c.validate());
  c.mask_ratio = 1.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny_run(FedMode::Relay);
  c.checkpoint_every = 1;
  CHECK_THROWS_AS(c.validate(), ValidationError);

  const auto kv = KeyValueConfig::parse("clients=8\nclients_per_round=2\nlineages=2\nmode=fedavg\nlr=0.01\n");
  const FedRunConfig parsed = FedRunConfig::from_config(kv);
  CHECK(parsed.clients == 8);
  CHECK(parsed.mode == FedMode::FedAvg);
  CHECK(parsed.optimizer.lr == 0.01);
  CHECK_THROWS_AS(FedRunConfig::from_config(KeyValueConfig::parse("bogus=1\n")), ValidationError);
  CHECK_THROWS_AS(parse_fed_mode("gossip"), ValidationError);
}

TEST_CASE("local training with zero epochs leaves the model alone") {
  MaeModel m = init_mae(testing::tiny_geometry(), testing::tiny_dims(), RngStream(1));
  const MaeModel before = m;
  AdamW opt(m.params, AdamWConfig{});
  const auto data = testing::random_patches(testing::tiny_geometry(), 8, 2);
  const auto shards = even_shards(1, 8);
  const double loss = local_train(m, opt, data, shards[0], {0, 4, 0.5}, RngStream(3));
  CHECK(std::isnan(loss));
  CHECK(m.params == before.params);
  ClientShard empty;
  CHECK_THROWS_AS(local_train(m, opt, data, empty, {1, 4, 0.5}, RngStream(3)), ValidationError);
}

TEST_CASE("averaging k copies returns the model; weights follow sum(w x) / sum(w)") {
  const MaeModel a = init_mae(testing::tiny_geometry(), testing::tiny_dims(), RngStream(1));
  const MaeModel b = init_mae(testing::tiny_geometry(), testing::tiny_dims(), RngStream(2));
  const std::vector<MaeModel> copies(7, a);
  CHECK(average_params(copies).params == a.params);

  const std::vector<MaeModel> two = {a, b};
  const std::vector<double> w = {1.0, 3.0};
  const MaeModel avg = average_params(two, w);
  const MaeModel mean = average_params(two);
  for (const auto& [name, p] : avg.params)
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double x = a.params.value(name)[i], y = b.params.value(name)[i];
      REQUIRE(p.value[i] == doctest::Approx(0.25 * x + 0.75 * y).epsilon(1e-15));
      REQUIRE(mean.params.value(name)[i] == doctest::Approx(0.5 * (x + y)).epsilon(1e-15));
    }
  MaeDims other = testing::tiny_dims();
  other.d_enc = 4;
  const std::vector<MaeModel> bad = {a, init_mae(testing::tiny_geometry(), other, RngStream(1))};
  CHECK_THROWS_AS(average_params(bad), ValidationError);
}

TEST_CASE("fedavg round equals the mean of the client updates") {
  const FedRunConfig c = tiny_run(FedMode::FedAvg);
  const auto data = testing::random_patches(testing::tiny_geometry(), 24, 4);
  const auto shards = even_shards(6, 4);
  ServerState state = init_server(c, data.geometry);
  const MaeModel start = state.global;
  run_round_fedavg(state, data, shards, c, 1);

  std::vector<MaeModel> clients;
  for (auto k : select_clients(1, c, RngStream(c.seed))) {
    MaeModel m = start;
    AdamW opt(m.params, c.optimizer);
    local_train(m, opt, data, shards[k], {c.local_epochs, c.batch_size, c.mask_ratio},
                RngStream(c.seed).derive("round", 1).derive("client", static_cast<std::int64_t>(k)));
    clients.push_back(m);
  }
  CHECK(state.global.params == average_params(clients).params);
  CHECK(state.metrics.rows.size() == 3);
}

TEST_CASE("relay lineages train independently and reproducibly") {
  testing::TempDir dir("relay");
  FedRunConfig c = tiny_run(FedMode::Relay);
  const auto data = testing::random_patches(testing::tiny_geometry(), 24, 4);
  const auto shards = even_shards(6, 4);

  c.checkpoint_every = 1;
  c.checkpoint_dir = (dir.path / "a").string();
  const ServerState a = run_pretraining(c, data, shards);
  c.checkpoint_dir = (dir.path / "b").string();
  const ServerState b = run_pretraining(c, data, shards);
  for (std::size_t r = 1; r <= c.rounds; ++r)
    for (std::size_t i = 0; i < c.lineages; ++i) {
      const std::string rel = "round_" + std::to_string(r) + "/lineage_" + std::to_string(i) + ".ckpt";
      REQUIRE(std::filesystem::exists(dir.path / "a" / rel));
      CHECK(slurp(dir.path / "a" / rel) == slurp(dir.path / "b" / rel));
    }
  CHECK(a.metrics.same_results(b.metrics));

  c.checkpoint_every = 0;
  c.parallel = true;
  const ServerState par = run_pretraining(c, data, shards);
  CHECK(par.metrics.same_results(a.metrics));
  for (std::size_t i = 0; i < c.lineages; ++i) {
    CHECK(par.lineages[i].model.params == a.lineages[i].model.params);
    const LineageState alone = run_lineage_isolated(c, data, shards, i);
    CHECK(alone.model.params == a.lineages[i].model.params);
    CHECK(alone.visits.size() == c.rounds);
  }
  // Lineages share an init but see different clients.
  CHECK_FALSE(a.lineages[0].model.params == a.lineages[1].model.params);
  CHECK(a.metrics.rows.size() == c.rounds * c.lineages);
  CHECK(std::isfinite(a.metrics.mean_loss(c.rounds)));

  c.seed = 22;
  const ServerState other = run_pretraining(c, data, shards);
  CHECK_FALSE(other.lineages[0].model.params == a.lineages[0].model.params);
}

TEST_CASE("metrics csv header") {
  testing::TempDir dir("metrics");
  MetricsLog log;
  log.append({1, 0, 3, 0.5, 0.01});
  log.write_csv(dir.path / "m.csv");
  const std::string text = slurp(dir.path / "m.csv");
  CHECK(text.rfind("round,unit_id,client_id,loss,seconds\n1,0,3,", 0) == 0);
}
