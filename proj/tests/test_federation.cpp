#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "federation_props.hpp"

using namespace mcsad;
using namespace mcsad::testing;

namespace {

AggregationError::Kind aggregation_kind(const std::vector<ClientUpdate>& updates) {
  try {
    (void)aggregate(updates);
  } catch (const AggregationError& e) {
    return e.kind();
  }
  FAIL("expected AggregationError");
  return AggregationError::Kind::Empty;
}

ClientState fresh_client(const RoundConfig& cfg, const DomainDataset& shard, int id = 0, std::uint64_t seed = 7,
                         int heads = 2) {
  ClientState st(id, cfg.backbone, shard.train_indices.size(), seed);
  const auto init = Model<float>::initialized(cfg.backbone, 1).to_checkpoint();
  std::vector<int> ids;
  for (int i = 0; i < heads; ++i) ids.push_back(i);
  st.receive(bootstrap_broadcast(init, ids));
  return st;
}

}  // namespace

TEST_CASE("weighted average of two clients") {
  const std::vector<ClientUpdate> updates{vector_update(0, 1, {1, 2}), vector_update(1, 3, {3, 4})};
  const auto merged = aggregate(updates);
  CHECK(merged.find("w")->values == std::vector<float>{2.5f, 3.5f});
}

TEST_CASE("aggregation matches the oracle and ignores order") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto updates = random_updates(seed, 2 + seed % 4, 50);
    const auto oracle = aggregate_oracle(updates);
    const auto merged = aggregate(updates).find("w")->values;
    for (std::size_t k = 0; k < merged.size(); ++k) {
      CHECK(std::abs(static_cast<long double>(merged[k]) - oracle[k]) <= 1e-7L * std::max(1.0L, std::abs(oracle[k])));
    }
    std::reverse(updates.begin(), updates.end());
    CHECK(aggregate(updates).find("w")->values == merged);
  }
}

TEST_CASE("aggregation weights sum to one") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto updates = random_updates(seed, 5, 3);
    for (auto& u : updates) std::fill(u.checkpoint.params[0].values.begin(), u.checkpoint.params[0].values.end(), 1.0f);
    const auto merged = aggregate(updates);
    for (float v : merged.find("w")->values) CHECK(std::abs(v - 1.0) <= 1e-9);
  }
  const std::vector<ClientUpdate> same{vector_update(0, 2, {0.1f, -7.3f}), vector_update(1, 9, {0.1f, -7.3f})};
  CHECK(aggregate(same).find("w")->values == same[0].checkpoint.params[0].values);
  const std::vector<ClientUpdate> one{vector_update(4, 17, {1.25f, 3.0f})};
  CHECK(aggregate(one) == one[0].checkpoint);
}

TEST_CASE("aggregation errors") {
  CHECK(aggregation_kind({}) == AggregationError::Kind::Empty);
  CHECK(aggregation_kind({vector_update(0, 1, {1}, 1), vector_update(1, 1, {1}, 2)}) ==
        AggregationError::Kind::MixedRounds);
  CHECK(aggregation_kind({vector_update(0, 1, {1}), vector_update(1, 1, {1, 2})}) ==
        AggregationError::Kind::ShapeMismatch);
  const std::vector<ClientUpdate> empty_client{vector_update(0, 0, {1})};
  CHECK_THROWS_AS(aggregate(empty_client), ContractError);
}

TEST_CASE("message round trips") {
  auto u = vector_update(2, 123, {1.5f, -2.0f}, 7);
  u.metrics = RoundMetrics{0.5, 1.25, 2.0, 3.0, 1e-3, 0.75};
  const auto bytes = u.serialize();
  const auto back = ClientUpdate::deserialize(bytes);
  CHECK(back == u);
  CHECK(back.serialize() == bytes);

  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(ClientUpdate::deserialize(truncated), CheckpointError);
  auto magic = bytes;
  magic[1] = 'X';
  CHECK_THROWS_AS(ClientUpdate::deserialize(magic), CheckpointError);

  const auto init = Model<float>::initialized(tiny_round_config().backbone, 3).to_checkpoint();
  const std::vector<int> ids{0, 1, 2};
  const auto bundle = bootstrap_broadcast(init, ids);
  CHECK(bundle.round == 1);
  CHECK(bundle.heads.size() == 3);
  for (const auto& h : bundle.heads) {
    CHECK(h.head.params.size() == 2);
    CHECK(h.head == init.subset("head."));
  }
  const auto wire = bundle.serialize();
  CHECK(BroadcastBundle::deserialize(wire) == bundle);
  CHECK(BroadcastBundle::deserialize(wire).serialize() == wire);
  auto trailing = wire;
  trailing.push_back(1);
  CHECK_THROWS_AS(BroadcastBundle::deserialize(trailing), CheckpointError);
}

TEST_CASE("broadcast carries each client's own head") {
  const auto cfg = tiny_round_config();
  auto a = Model<float>::initialized(cfg.backbone, 1).to_checkpoint();
  auto b = Model<float>::initialized(cfg.backbone, 2).to_checkpoint();
  std::vector<ClientUpdate> updates{{0, 3, 10, a, {}}, {1, 3, 30, b, {}}};
  const auto merged = aggregate(updates);
  const auto bundle = make_broadcast(merged, updates);
  CHECK(bundle.round == 4);
  CHECK(bundle.global == merged);
  REQUIRE(bundle.heads.size() == 2);
  CHECK(bundle.heads[0].client_id == 0);
  CHECK(bundle.heads[0].head == a.subset("head."));
  CHECK(bundle.heads[1].head == b.subset("head."));
  CHECK_FALSE(bundle.heads[0].head == merged.subset("head."));

  updates[1].checkpoint = updates[1].checkpoint.subset("block");
  CHECK_THROWS_AS(make_broadcast(merged, updates), FormatError);
}

TEST_CASE("cosine learning rate") {
  RoundConfig cfg;
  cfg.rounds = 10;
  cfg.local_epochs = 2;
  cfg.lr_initial = 0.1f;
  cfg.lr_final = 0.01f;
  CHECK(cfg.learning_rate(0) == doctest::Approx(0.1));
  CHECK(cfg.learning_rate(19) == doctest::Approx(0.01));
  CHECK(cfg.learning_rate(19) <= cfg.learning_rate(10));
  for (int e = 1; e < 20; ++e) CHECK(cfg.learning_rate(e) <= cfg.learning_rate(e - 1));
  cfg.rounds = 0;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
}

TEST_CASE("zero learning rate leaves the model unchanged") {
  const auto domains = tiny_domains();
  auto cfg = tiny_round_config(1);
  cfg.lr_initial = cfg.lr_final = 0.0f;
  auto st = fresh_client(cfg, domains[0]);
  const auto before = st.model.to_checkpoint();
  const auto u = local_train_round(st, domains[0], cfg, 1);
  CHECK(u.checkpoint == before);
  CHECK(u.metrics.loss_cdrm > 0.0);

  const auto sources = sources_of(domains, 3);
  const auto result = run_federation(sources, cfg, 11);
  CHECK(result.global.to_checkpoint() == Model<float>::initialized(cfg.backbone, Rng::derive(11, {0})).to_checkpoint());
}

TEST_CASE("reported losses replay from the batch stream") {
  const auto domains = tiny_domains();
  auto cfg = tiny_round_config(1);
  cfg.lr_initial = cfg.lr_final = 0.0f;
  cfg.augmenter = Augmenter::None;
  cfg.supcon = false;
  cfg.cdrm = false;
  auto st = fresh_client(cfg, domains[1], 0, 21);
  const auto u = local_train_round(st, domains[1], cfg, 1);

  auto it = batch_iter(domains[1], domains[1].train_indices, 8, Rng::derive(21, {13}), 0);
  Batch batch;
  double total = 0.0;
  int n = 0;
  while (it.next(batch)) {
    total += cross_entropy(st.model.forward(batch.images), std::span<const int>(batch.labels)).item();
    ++n;
  }
  CHECK(u.metrics.loss_task == doctest::Approx(total / n).epsilon(1e-6));
  CHECK(u.metrics.loss_total == doctest::Approx(u.metrics.loss_task).epsilon(1e-12));
  CHECK(u.metrics.loss_supcon == 0.0);
}

TEST_CASE("identical shards and seeds give identical updates") {
  const auto domains = tiny_domains();
  auto cfg = tiny_round_config(1);
  cfg.augmenter = Augmenter::None;
  cfg.supcon = false;
  cfg.cdrm = false;
  auto a = fresh_client(cfg, domains[2], 0, 5);
  auto b = fresh_client(cfg, domains[2], 1, 5);
  const std::vector<ClientUpdate> updates{local_train_round(a, domains[2], cfg, 1),
                                          local_train_round(b, domains[2], cfg, 1)};
  CHECK(updates[0].checkpoint == updates[1].checkpoint);
  CHECK(aggregate(updates) == updates[0].checkpoint);
}

TEST_CASE("client protocol errors") {
  const auto domains = tiny_domains();
  const auto cfg = tiny_round_config(2);
  CHECK_THROWS_AS(ClientState(0, cfg.backbone, 0, 1), ContractError);

  ClientState bare(0, cfg.backbone, domains[0].train_indices.size(), 1);
  CHECK_THROWS_AS(local_train_round(bare, domains[0], cfg, 1), ProtocolError);

  auto st = fresh_client(cfg, domains[0], 0, 1, 1);
  CHECK_THROWS_AS(local_train_round(st, domains[0], cfg, 3), ProtocolError);
  auto exclusive = cfg;
  exclusive.csa.exclude_self = true;
  CHECK_THROWS_AS(local_train_round(st, domains[0], exclusive, 1), ProtocolError);

  auto other = cfg.backbone;
  other.block_channels = {3, 4, 8};
  other.embedding_dim = 8;
  const auto wrong = Model<float>::initialized(other, 1).to_checkpoint();
  auto bundle = bootstrap_broadcast(Model<float>::initialized(cfg.backbone, 1).to_checkpoint(), std::vector<int>{0});
  bundle.heads[0].head = wrong.subset("head.");
  CHECK_THROWS_AS(st.receive(bundle), ProtocolError);
}

TEST_CASE("heads consumed in round t are the round t-1 uploads") {
  const auto domains = tiny_domains();
  const auto sources = sources_of(domains, 0);
  const auto trace = trace_head_protocol(sources, tiny_round_config(3), 4);
  CHECK(trace.checks == 3 * 3 * 3);
  CHECK(trace.violations == 0);
}

TEST_CASE("federation is deterministic and thread-count independent") {
  const auto domains = tiny_domains();
  const auto sources = sources_of(domains, 2);
  auto cfg = tiny_round_config(2);
  const auto a = run_federation(sources, cfg, 9);
  const auto b = run_federation(sources, cfg, 9);
  CHECK(a.log == b.log);
  CHECK(a.global.to_checkpoint() == b.global.to_checkpoint());
  REQUIRE(a.log.size() == 2 * 3);

  cfg.parallel_clients = true;
  const auto c = run_federation(sources, cfg, 9);
  CHECK(c.log == a.log);
  CHECK(c.global.to_checkpoint() == a.global.to_checkpoint());

  const auto d = run_federation(sources, tiny_round_config(2), 10);
  CHECK_FALSE(d.log == a.log);
}

TEST_CASE("metrics csv") {
  std::vector<MetricsRow> rows{{1, 0, {1.0, 0.0, 0.0, 1.0, 0.1, 0.5}, 0.25},
                               {2, 0, {0.5, 2.0, 1.0, 3.0, 0.05, 0.5}, 0.5},
                               {2, 1, {1.5, 4.0, 3.0, 5.0, 0.05, 0.5}, 1.0}};
  std::ostringstream out;
  write_metrics_csv(out, rows);
  std::istringstream in(out.str());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 5);
  CHECK(lines[0] == "round,client_id,loss_task,loss_supcon,loss_cdrm,loss_total,lr,source_val_acc");
  CHECK(lines[1] == "1,0,1,0,0,1,0.1,0.25");
  CHECK(lines[4] == "final,all,1,3,2,4,0.05,0.75");
}
