#pragma once

// Federated round protocol. Each round t = 1..T:
//   1. every client loads the broadcast global model and trains locally,
//      using the previous round's heads for style augmentation and
//      relation distillation;
//   2. clients upload a ClientUpdate (serialized checkpoint + sample count);
//   3. the server averages parameters weighted by sample count;
//   4. the server broadcasts the global model plus every client's own
//      uploaded head, to be consumed in round t + 1.
// Round 1 consumes a bootstrap bundle carrying n copies of the initial head.
//
// Message formats (little-endian), wrapping the checkpoint format:
//   ClientUpdate:    "MCSU" u16 version, u32 round, u32 client_id,
//                    u64 num_samples, f64 metrics[6], u32 length, checkpoint
//   BroadcastBundle: "MCSB" u16 version, u32 round, u32 length, checkpoint,
//                    u32 head count, then per head u32 client_id,
//                    u32 length, head-only checkpoint

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mcsad/checkpoint.hpp"
#include "mcsad/data.hpp"
#include "mcsad/losses.hpp"
#include "mcsad/model.hpp"
#include "mcsad/style.hpp"

namespace mcsad {

enum class Augmenter { None, Csa, Dsu, AdvStyle, MixStyle };

std::string to_string(Augmenter a);
Augmenter parse_augmenter(const std::string& s);

struct RoundConfig {
  BackboneConfig backbone;
  int rounds = 40;
  int local_epochs = 1;
  int batch_size = 16;
  float lr_initial = 1e-3f;
  float lr_final = 1e-4f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  CsaConfig csa;
  LossWeights weights;
  CdrmMode cdrm_mode = CdrmMode::CrossEntropy;
  Augmenter augmenter = Augmenter::Csa;
  bool supcon = true;
  bool cdrm = true;
  double mixstyle_alpha = 0.1;
  /// Train clients of a round on separate threads. Aggregation order is
  /// canonical, so results match the sequential mode bit for bit.
  bool parallel_clients = false;

  void validate() const;

  /// Cosine decay from lr_initial to lr_final over all T·E local epochs.
  float learning_rate(int global_epoch) const;

  bool operator==(const RoundConfig&) const = default;
};

struct RoundMetrics {
  double loss_task = 0.0;
  double loss_supcon = 0.0;
  double loss_cdrm = 0.0;
  double loss_total = 0.0;
  double lr = 0.0;
  double local_accuracy = 0.0;

  bool operator==(const RoundMetrics&) const = default;
};

struct ClientUpdate {
  int client_id = 0;
  int round = 0;
  std::uint64_t num_samples = 0;
  Checkpoint checkpoint;
  RoundMetrics metrics;

  std::vector<std::uint8_t> serialize() const;
  static ClientUpdate deserialize(std::span<const std::uint8_t> bytes);
  bool operator==(const ClientUpdate&) const = default;
};

struct TaggedHead {
  int client_id = 0;
  Checkpoint head;  // head.weight and head.bias only

  bool operator==(const TaggedHead&) const = default;
};

struct BroadcastBundle {
  int round = 0;  // the round that consumes this bundle
  Checkpoint global;
  std::vector<TaggedHead> heads;

  std::vector<std::uint8_t> serialize() const;
  static BroadcastBundle deserialize(std::span<const std::uint8_t> bytes);
  bool operator==(const BroadcastBundle&) const = default;
};

struct ClientState {
  int client_id = 0;
  Model<float> model;
  std::uint64_t num_samples = 0;
  std::vector<std::vector<float>> momentum;
  std::uint64_t seed = 0;
  std::vector<int> head_owners;
  std::vector<Head<float>> heads;  // frozen previous-round heads

  ClientState(int id, const BackboneConfig& cfg, std::uint64_t samples, std::uint64_t seed);

  /// Replaces the local model with the broadcast global model and the
  /// previous-round heads; momentum buffers are reset.
  void receive(const BroadcastBundle& bundle);
};

/// One round of local training over the shard's train split.
ClientUpdate local_train_round(ClientState& state, const DomainDataset& shard, const RoundConfig& cfg, int round);

/// Σ_i (N_i / N_total)·θ_i, accumulated in double in ascending client-id order.
Checkpoint aggregate(std::span<const ClientUpdate> updates);

/// Global model plus each client's own uploaded head, for round + 1.
BroadcastBundle make_broadcast(const Checkpoint& global, std::span<const ClientUpdate> updates);

/// Bootstrap bundle: the initial model and n copies of its head.
BroadcastBundle bootstrap_broadcast(const Checkpoint& initial, std::span<const int> client_ids);

struct MetricsRow {
  int round = 0;
  int client_id = 0;
  RoundMetrics metrics;
  double source_val_acc = 0.0;

  bool operator==(const MetricsRow&) const = default;
};

struct FederationObserver {
  std::function<void(const ClientUpdate&)> on_upload;
  std::function<void(int round, int client_id, std::span<const int> owners, std::span<const Head<float>> heads)>
      on_heads_consumed;
  std::function<void(const BroadcastBundle&)> on_broadcast;
};

struct FederationResult {
  Model<float> global;
  std::vector<MetricsRow> log;
};

FederationResult run_federation(std::span<const DomainDataset* const> sources, const RoundConfig& cfg,
                                std::uint64_t seed, const FederationObserver& observer = {});

/// CSV with columns round, client_id, loss_task, loss_supcon, loss_cdrm,
/// loss_total, lr, source_val_acc, plus a closing "final,all,..." row of
/// last-round means.
void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows);

}  // namespace mcsad
