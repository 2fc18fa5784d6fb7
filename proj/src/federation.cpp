#include "mcsad/federation.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <iomanip>
#include <map>
#include <numbers>
#include <ostream>

#include "mcsad/bytes.hpp"
#include "mcsad/evaluate.hpp"

namespace mcsad {

std::string to_string(Augmenter a) {
  switch (a) {
    case Augmenter::None: return "none";
    case Augmenter::Csa: return "csa";
    case Augmenter::Dsu: return "dsu";
    case Augmenter::AdvStyle: return "advstyle";
    case Augmenter::MixStyle: return "mixstyle";
  }
  return "none";
}

Augmenter parse_augmenter(const std::string& s) {
  for (Augmenter a : {Augmenter::None, Augmenter::Csa, Augmenter::Dsu, Augmenter::AdvStyle, Augmenter::MixStyle}) {
    if (to_string(a) == s) return a;
  }
  throw ContractError("unknown augmenter '" + s + "'");
}

void RoundConfig::validate() const {
  backbone.validate();
  if (rounds < 1 || local_epochs < 1) throw ContractError("need at least one round and one local epoch");
  if (batch_size < 1) throw ContractError("batch size must be positive");
  if (lr_initial < 0.0f || lr_final < 0.0f) throw ContractError("learning rates must be non-negative");
  if (momentum < 0.0f || weight_decay < 0.0f) throw ContractError("momentum and weight decay must be non-negative");
  if (augmenter == Augmenter::MixStyle && !(mixstyle_alpha > 0.0)) throw ContractError("MixStyle alpha must be positive");
  csa.validate();
  weights.validate(/*allow_zero_weights=*/true);
}

float RoundConfig::learning_rate(int global_epoch) const {
  const int total = rounds * local_epochs;
  if (total <= 1) return lr_initial;
  const double t = static_cast<double>(global_epoch) / static_cast<double>(total - 1);
  return static_cast<float>(lr_final + (lr_initial - lr_final) * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

// ---------------------------------------------------------------------------
// Messages

namespace {

constexpr std::string_view kUpdateMagic = "MCSU";
constexpr std::string_view kBundleMagic = "MCSB";
constexpr std::uint16_t kMessageVersion = 1;

void expect_header(ByteReader& r, std::string_view magic, std::size_t total) {
  if (total < magic.size() || r.string(magic.size()) != magic) {
    throw CheckpointError(CheckpointError::Kind::BadMagic, "message magic mismatch, expected " + std::string(magic));
  }
  const auto version = r.u16();
  if (version != kMessageVersion) {
    throw CheckpointError(CheckpointError::Kind::VersionMismatch, "message version " + std::to_string(version));
  }
}

void put_checkpoint(ByteWriter& w, const Checkpoint& c) {
  const auto bytes = c.serialize();
  w.u32(static_cast<std::uint32_t>(bytes.size()));
  w.raw(bytes);
}

Checkpoint get_checkpoint(ByteReader& r) {
  const auto n = r.u32();
  return Checkpoint::deserialize(r.raw(n));
}

void expect_end(const ByteReader& r) {
  if (r.remaining() != 0) {
    throw CheckpointError(CheckpointError::Kind::Truncated, std::to_string(r.remaining()) + " trailing message bytes");
  }
}

}  // namespace

std::vector<std::uint8_t> ClientUpdate::serialize() const {
  ByteWriter w;
  w.raw(kUpdateMagic);
  w.u16(kMessageVersion);
  w.u32(static_cast<std::uint32_t>(round));
  w.u32(static_cast<std::uint32_t>(client_id));
  w.u64(num_samples);
  for (double v : {metrics.loss_task, metrics.loss_supcon, metrics.loss_cdrm, metrics.loss_total, metrics.lr,
                   metrics.local_accuracy}) {
    w.f64(v);
  }
  put_checkpoint(w, checkpoint);
  return w.take();
}

ClientUpdate ClientUpdate::deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  expect_header(r, kUpdateMagic, bytes.size());
  ClientUpdate u;
  u.round = static_cast<int>(r.u32());
  u.client_id = static_cast<int>(r.u32());
  u.num_samples = r.u64();
  u.metrics.loss_task = r.f64();
  u.metrics.loss_supcon = r.f64();
  u.metrics.loss_cdrm = r.f64();
  u.metrics.loss_total = r.f64();
  u.metrics.lr = r.f64();
  u.metrics.local_accuracy = r.f64();
  u.checkpoint = get_checkpoint(r);
  expect_end(r);
  return u;
}

std::vector<std::uint8_t> BroadcastBundle::serialize() const {
  ByteWriter w;
  w.raw(kBundleMagic);
  w.u16(kMessageVersion);
  w.u32(static_cast<std::uint32_t>(round));
  put_checkpoint(w, global);
  w.u32(static_cast<std::uint32_t>(heads.size()));
  for (const auto& h : heads) {
    w.u32(static_cast<std::uint32_t>(h.client_id));
    put_checkpoint(w, h.head);
  }
  return w.take();
}

BroadcastBundle BroadcastBundle::deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  expect_header(r, kBundleMagic, bytes.size());
  BroadcastBundle b;
  b.round = static_cast<int>(r.u32());
  b.global = get_checkpoint(r);
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    TaggedHead h;
    h.client_id = static_cast<int>(r.u32());
    h.head = get_checkpoint(r);
    b.heads.push_back(std::move(h));
  }
  expect_end(r);
  return b;
}

// ---------------------------------------------------------------------------
// Client

ClientState::ClientState(int id, const BackboneConfig& cfg, std::uint64_t samples, std::uint64_t client_seed)
    : client_id(id), model(cfg), num_samples(samples), seed(client_seed) {
  if (samples == 0) throw ContractError("client " + std::to_string(id) + " has no training samples");
}

void ClientState::receive(const BroadcastBundle& bundle) {
  model.load(bundle.global);
  momentum.clear();
  head_owners.clear();
  heads.clear();
  for (const auto& h : bundle.heads) {
    auto head = Head<float>::from_checkpoint(h.head);
    if (head.embedding_dim() != model.config().embedding_dim || head.num_classes() != model.config().num_classes) {
      throw ProtocolError("head from client " + std::to_string(h.client_id) + " does not fit the backbone");
    }
    head_owners.push_back(h.client_id);
    heads.push_back(std::move(head));
  }
}

namespace {

void sgd_step(Model<float>& model, std::vector<std::vector<float>>& momentum, const RoundConfig& cfg, float lr) {
  auto& params = model.parameters();
  if (momentum.size() != params.size()) {
    momentum.clear();
    for (const auto& p : params) momentum.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].mutable_data();
    auto grad = params[i].grad();
    auto& buf = momentum[i];
    const bool has_grad = grad.size() == values.size();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const float g = (has_grad ? grad[k] : 0.0f) + cfg.weight_decay * values[k];
      buf[k] = cfg.momentum * buf[k] + g;
      values[k] -= lr * buf[k];
    }
  }
}

}  // namespace

ClientUpdate local_train_round(ClientState& state, const DomainDataset& shard, const RoundConfig& cfg, int round) {
  cfg.validate();
  if (round < 1 || round > cfg.rounds) throw ProtocolError("round " + std::to_string(round) + " outside 1..T");
  const bool uses_heads = cfg.augmenter == Augmenter::Csa || cfg.cdrm;
  std::vector<Head<float>> discriminators;
  for (std::size_t j = 0; j < state.heads.size(); ++j) {
    if (cfg.csa.exclude_self && state.head_owners[j] == state.client_id) continue;
    discriminators.push_back(state.heads[j]);
  }
  if (uses_heads && state.heads.empty()) {
    throw ProtocolError("client " + std::to_string(state.client_id) + " has no previous-round heads in round " +
                        std::to_string(round));
  }
  if (cfg.augmenter == Augmenter::Csa && discriminators.empty()) {
    throw ProtocolError("client " + std::to_string(state.client_id) + " has no discriminator heads after exclusion");
  }

  Model<float>& model = state.model;
  Rng rng(Rng::derive(state.seed, {static_cast<std::uint64_t>(round), 11}));
  RoundMetrics metrics;
  std::size_t batches = 0, seen = 0, correct = 0;

  for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    const int global_epoch = (round - 1) * cfg.local_epochs + epoch;
    const float lr = cfg.learning_rate(global_epoch);
    metrics.lr = lr;
    auto it = batch_iter(shard, shard.train_indices, static_cast<std::size_t>(cfg.batch_size),
                         Rng::derive(state.seed, {13}), static_cast<std::uint64_t>(global_epoch));
    Batch batch;
    while (it.next(batch)) {
      const std::span<const int> labels = batch.labels;
      const int split = cfg.csa.split_ids[rng.index(cfg.csa.split_ids.size())];

      auto feature = model.forward_to_split(batch.images, split);
      auto z = model.embed_from_split(feature, split);
      auto logits = head_only_forward(model.head(), z);
      Tensorf z_aug = z, logits_aug = logits;
      Tensorf task;
      if (cfg.augmenter == Augmenter::None) {
        task = cross_entropy(logits, labels);
      } else {
        SplitForward<float> rest = [&](const Tensorf& f) { return model.embed_from_split(f, split); };
        AugmentResult<float> aug;
        switch (cfg.augmenter) {
          case Augmenter::Csa: aug = csa_augment<float>(feature, labels, rest, discriminators, cfg.csa); break;
          case Augmenter::AdvStyle:
            aug = advstyle_augment<float>(feature, labels, rest, model.head(), cfg.csa.eta, cfg.csa.epsilon);
            break;
          case Augmenter::Dsu: aug = dsu_augment<float>(feature, rng, cfg.csa.epsilon); break;
          case Augmenter::MixStyle:
            if (feature.dim(0) < 2) {
              aug = AugmentResult<float>{feature, compute_stats(feature).detached()};
            } else {
              aug = mixstyle_augment<float>(feature, rng, cfg.mixstyle_alpha, cfg.csa.epsilon);
            }
            break;
          case Augmenter::None: break;
        }
        z_aug = model.embed_from_split(aug.feature, split);
        logits_aug = head_only_forward(model.head(), z_aug);
        task = task_loss(logits, logits_aug, labels);
      }

      LossComponents<float> parts{task, std::nullopt, std::nullopt};
      if (cfg.supcon) {
        std::vector<int> doubled(labels.begin(), labels.end());
        doubled.insert(doubled.end(), labels.begin(), labels.end());
        parts.supcon = supcon_loss(concat(z, z_aug), std::span<const int>(doubled), cfg.weights.tau_supcon).loss;
      }
      if (cfg.cdrm) {
        auto ensemble = ensemble_class_relations<float>(z, state.heads, labels, cfg.weights.tau_cdrm);
        auto [current, current_aug] = current_class_relations(logits, logits_aug, labels, cfg.weights.tau_cdrm);
        parts.cdrm = cdrm_loss(ensemble, current, current_aug, cfg.cdrm_mode);
      }
      LocalLoss<float> loss;
      try {
        loss = local_loss(parts, cfg.weights);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " in batch " + std::to_string(batches) + " of client " +
                           std::to_string(state.client_id));
      }

      model.zero_grad();
      loss.total.backward();
      {
        NoGradGuard no_grad;
        sgd_step(model, state.momentum, cfg, lr);
      }

      metrics.loss_task += loss.task;
      metrics.loss_supcon += loss.supcon;
      metrics.loss_cdrm += loss.cdrm;
      metrics.loss_total += loss.total_value;
      const auto pred = argmax_rows(logits);
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
      seen += pred.size();
      ++batches;
    }
  }
  if (batches > 0) {
    const auto n = static_cast<double>(batches);
    metrics.loss_task /= n;
    metrics.loss_supcon /= n;
    metrics.loss_cdrm /= n;
    metrics.loss_total /= n;
    metrics.local_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
  }
  return ClientUpdate{state.client_id, round, state.num_samples, model.to_checkpoint(), metrics};
}

// ---------------------------------------------------------------------------
// Server

Checkpoint aggregate(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw AggregationError(AggregationError::Kind::Empty, "no client updates to aggregate");
  std::vector<const ClientUpdate*> ordered;
  for (const auto& u : updates) ordered.push_back(&u);
  std::sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) { return a->client_id < b->client_id; });

  const Checkpoint& first = ordered.front()->checkpoint;
  double total = 0.0;
  for (const auto* u : ordered) {
    if (u->round != ordered.front()->round) {
      throw AggregationError(AggregationError::Kind::MixedRounds, "updates from rounds " +
                                                                      std::to_string(ordered.front()->round) + " and " +
                                                                      std::to_string(u->round));
    }
    if (u->num_samples == 0) throw ContractError("client " + std::to_string(u->client_id) + " reported zero samples");
    const auto& c = u->checkpoint;
    bool compatible = c.params.size() == first.params.size();
    for (std::size_t i = 0; compatible && i < c.params.size(); ++i) {
      compatible = c.params[i].name == first.params[i].name && c.params[i].shape == first.params[i].shape;
    }
    if (!compatible) {
      throw AggregationError(AggregationError::Kind::ShapeMismatch,
                             "client " + std::to_string(u->client_id) + " uploaded an incompatible checkpoint");
    }
    total += static_cast<double>(u->num_samples);
  }

  Checkpoint out;
  for (std::size_t i = 0; i < first.params.size(); ++i) {
    std::vector<double> acc(first.params[i].values.size(), 0.0);
    for (const auto* u : ordered) {
      const double w = static_cast<double>(u->num_samples) / total;
      const auto& v = u->checkpoint.params[i].values;
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += w * static_cast<double>(v[k]);
    }
    NamedTensor p{first.params[i].name, first.params[i].shape, std::vector<float>(acc.size())};
    for (std::size_t k = 0; k < acc.size(); ++k) p.values[k] = static_cast<float>(acc[k]);
    out.params.push_back(std::move(p));
  }
  return out;
}

BroadcastBundle make_broadcast(const Checkpoint& global, std::span<const ClientUpdate> updates) {
  BroadcastBundle bundle;
  bundle.global = global;
  bundle.round = updates.empty() ? 1 : updates.front().round + 1;
  std::vector<const ClientUpdate*> ordered;
  for (const auto& u : updates) ordered.push_back(&u);
  std::sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) { return a->client_id < b->client_id; });
  for (const auto* u : ordered) {
    auto head = u->checkpoint.subset("head.");
    if (!head.find("head.weight") || !head.find("head.bias")) {
      throw FormatError("update from client " + std::to_string(u->client_id) + " carries no head slice");
    }
    bundle.heads.push_back(TaggedHead{u->client_id, std::move(head)});
  }
  return bundle;
}

BroadcastBundle bootstrap_broadcast(const Checkpoint& initial, std::span<const int> client_ids) {
  BroadcastBundle bundle;
  bundle.round = 1;
  bundle.global = initial;
  for (int id : client_ids) bundle.heads.push_back(TaggedHead{id, initial.subset("head.")});
  return bundle;
}

FederationResult run_federation(std::span<const DomainDataset* const> sources, const RoundConfig& cfg,
                                std::uint64_t seed, const FederationObserver& observer) {
  cfg.validate();
  if (sources.size() < 2) throw ContractError("federation needs at least two source domains");

  Model<float> global = Model<float>::initialized(cfg.backbone, Rng::derive(seed, {0}));
  std::vector<ClientState> clients;
  std::vector<int> ids;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const int id = static_cast<int>(i);
    clients.emplace_back(id, cfg.backbone, sources[i]->train_indices.size(),
                         Rng::derive(seed, {static_cast<std::uint64_t>(id) + 1, 5}));
    ids.push_back(id);
  }

  std::vector<std::uint8_t> wire = bootstrap_broadcast(global.to_checkpoint(), ids).serialize();
  FederationResult result{std::move(global), {}};

  for (int round = 1; round <= cfg.rounds; ++round) {
    const BroadcastBundle received = BroadcastBundle::deserialize(wire);
    if (received.round != round) throw ProtocolError("bundle for round " + std::to_string(received.round) +
                                                     " arrived in round " + std::to_string(round));

    auto train_client = [&](std::size_t i) -> std::vector<std::uint8_t> {
      try {
        ClientState& client = clients[i];
        client.receive(received);
        if (observer.on_heads_consumed) observer.on_heads_consumed(round, client.client_id, client.head_owners, client.heads);
        return local_train_round(client, *sources[i], cfg, round).serialize();
      } catch (const Error& e) {
        throw ProtocolError("round " + std::to_string(round) + ", client " + std::to_string(i) + ": " + e.what());
      }
    };

    std::vector<std::vector<std::uint8_t>> uploads(clients.size());
    if (cfg.parallel_clients) {
      std::vector<std::future<std::vector<std::uint8_t>>> jobs;
      for (std::size_t i = 0; i < clients.size(); ++i) jobs.push_back(std::async(std::launch::async, train_client, i));
      for (std::size_t i = 0; i < jobs.size(); ++i) uploads[i] = jobs[i].get();
    } else {
      for (std::size_t i = 0; i < clients.size(); ++i) uploads[i] = train_client(i);
    }

    std::vector<ClientUpdate> updates;
    for (const auto& bytes : uploads) {
      updates.push_back(ClientUpdate::deserialize(bytes));
      if (observer.on_upload) observer.on_upload(updates.back());
    }
    const Checkpoint merged = aggregate(updates);
    result.global.load(merged);

    for (std::size_t i = 0; i < clients.size(); ++i) {
      const double acc = sources[i]->test_indices.empty()
                             ? 0.0
                             : evaluate(result.global, *sources[i], sources[i]->test_indices);
      result.log.push_back(MetricsRow{round, updates[i].client_id, updates[i].metrics, acc});
    }

    BroadcastBundle next = make_broadcast(merged, updates);
    if (observer.on_broadcast) observer.on_broadcast(next);
    wire = next.serialize();
  }
  return result;
}

void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows) {
  out << "round,client_id,loss_task,loss_supcon,loss_cdrm,loss_total,lr,source_val_acc\n";
  out << std::setprecision(9);
  int last_round = 0;
  for (const auto& r : rows) {
    out << r.round << ',' << r.client_id << ',' << r.metrics.loss_task << ',' << r.metrics.loss_supcon << ','
        << r.metrics.loss_cdrm << ',' << r.metrics.loss_total << ',' << r.metrics.lr << ',' << r.source_val_acc << '\n';
    last_round = std::max(last_round, r.round);
  }
  RoundMetrics mean;
  double acc = 0.0;
  int n = 0;
  for (const auto& r : rows) {
    if (r.round != last_round) continue;
    mean.loss_task += r.metrics.loss_task;
    mean.loss_supcon += r.metrics.loss_supcon;
    mean.loss_cdrm += r.metrics.loss_cdrm;
    mean.loss_total += r.metrics.loss_total;
    mean.lr = r.metrics.lr;
    acc += r.source_val_acc;
    ++n;
  }
  if (n > 0) {
    out << "final,all," << mean.loss_task / n << ',' << mean.loss_supcon / n << ',' << mean.loss_cdrm / n << ','
        << mean.loss_total / n << ',' << mean.lr << ',' << acc / n << '\n';
  }
}

}  // namespace mcsad
