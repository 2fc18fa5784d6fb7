#pragma once

// Training objectives: cross-entropy task loss over the original and the
// style-augmented path, supervised contrastive alignment, and cross-domain
// relation matching against a frozen ensemble of classifier heads.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcsad/model.hpp"
#include "mcsad/ops.hpp"

namespace mcsad {

struct LossWeights {
  float lambda_con = 1.0f;
  float lambda_cdrm = 4.0f;
  float tau_supcon = 0.07f;
  float tau_cdrm = 2.0f;

  /// Temperatures must be positive. Weights must be positive unless
  /// `allow_zero_weights` (ablation cells switch terms off with 0).
  void validate(bool allow_zero_weights = false) const {
    if (!(tau_supcon > 0.0f) || !(tau_cdrm > 0.0f)) throw ContractError("loss temperatures must be positive");
    const bool ok = allow_zero_weights ? (lambda_con >= 0.0f && lambda_cdrm >= 0.0f)
                                       : (lambda_con > 0.0f && lambda_cdrm > 0.0f);
    if (!ok) throw ContractError("loss weights must be positive");
  }

  bool operator==(const LossWeights&) const = default;
};

enum class Reduction { Mean, Sum };

/// −log softmax(logits)[label], averaged (or summed) over the batch.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels,
                             Reduction reduction = Reduction::Mean) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy expects [B×K] logits, got " + shape_string(logits.shape()));
  auto picked = pick(log_softmax(logits), labels);
  return reduction == Reduction::Mean ? -mean(picked) : -sum(picked);
}

/// ½·[CE(original logits) + CE(augmented logits)].
template <typename Scalar>
Tensor<Scalar> task_loss(const Tensor<Scalar>& logits_original, const Tensor<Scalar>& logits_augmented,
                         std::span<const int> labels) {
  return (cross_entropy(logits_original, labels) + cross_entropy(logits_augmented, labels)) * Scalar(0.5);
}

template <typename Scalar>
Tensor<Scalar> task_loss(const Model<Scalar>& model, const Tensor<Scalar>& x, const Tensor<Scalar>& augmented,
                         int split, std::span<const int> labels) {
  const auto& cfg = model.config();
  if (split < 1 || split > 3 || augmented.rank() != 4 ||
      augmented.dim(1) != cfg.block_channels[static_cast<std::size_t>(split - 1)] ||
      augmented.dim(2) != (cfg.image_size >> split)) {
    throw ContractError("augmented feature " + shape_string(augmented.shape()) + " was not produced at split " +
                        std::to_string(split));
  }
  return task_loss(model.forward(x), model.forward_from_split(augmented, split), labels);
}

template <typename Scalar>
struct SupConResult {
  Tensor<Scalar> loss;
  bool all_anchors_skipped = false;
  int anchors_used = 0;
};

/// Supervised contrastive loss summed over anchors.
///
/// Rows of `embeddings` are L2-normalized first. For anchor j the positives
/// P(j) are all other rows with the same label and the contrast set A(j) is
/// every row except j. Anchors without positives are skipped.
template <typename Scalar>
SupConResult<Scalar> supcon_loss(const Tensor<Scalar>& embeddings, std::span<const int> labels, Scalar tau) {
  if (embeddings.rank() != 2 || embeddings.dim(0) != static_cast<Index>(labels.size())) {
    throw ShapeError("supcon_loss got embeddings " + shape_string(embeddings.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  if (labels.size() < 2) throw ContractError("supcon_loss needs at least two samples");
  if (!(tau > Scalar(0))) throw ContractError("supcon temperature must be positive");

  const Index n = embeddings.dim(0);
  std::vector<Scalar> weights(static_cast<std::size_t>(n * n), Scalar(0));
  std::vector<Scalar> mask(static_cast<std::size_t>(n * n), Scalar(0));
  int used = 0;
  for (Index j = 0; j < n; ++j) {
    mask[static_cast<std::size_t>(j * n + j)] = Scalar(-1e9);
    Index positives = 0;
    for (Index p = 0; p < n; ++p) positives += (p != j && labels[p] == labels[j]);
    if (positives == 0) continue;
    ++used;
    for (Index p = 0; p < n; ++p) {
      if (p != j && labels[p] == labels[j]) weights[static_cast<std::size_t>(j * n + p)] = Scalar(1) / Scalar(positives);
    }
  }
  if (used == 0) return {Tensor<Scalar>::scalar(Scalar(0)), true, 0};

  auto z = l2_normalize_rows(embeddings);
  auto logits = matmul(z, transpose(z)) / tau + Tensor<Scalar>({n, n}, std::move(mask));
  auto log_prob = log_softmax(logits);
  auto loss = -sum(log_prob * Tensor<Scalar>({n, n}, std::move(weights)));
  return {loss, false, used};
}

enum class RelationSource { Ensemble, CurrentOriginal, CurrentAugmented };

/// Per-class tempered logit averages; row r describes class `classes[r]`.
template <typename Scalar>
struct ClassRelationTable {
  std::vector<int> classes;
  Tensor<Scalar> scaled_logits;  // [R × K], class-mean logits / τ
  RelationSource source = RelationSource::Ensemble;

  Tensor<Scalar> probs() const { return softmax(scaled_logits); }
  Tensor<Scalar> log_probs() const { return log_softmax(scaled_logits); }
};

namespace detail {

/// Sorted distinct labels and the [R × B] class-averaging matrix.
template <typename Scalar>
std::pair<std::vector<int>, Tensor<Scalar>> class_average_matrix(std::span<const int> labels) {
  if (labels.empty()) throw ContractError("class relations need a non-empty batch");
  std::vector<int> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  const Index rows = static_cast<Index>(classes.size());
  const Index batch = static_cast<Index>(labels.size());
  std::vector<Scalar> m(static_cast<std::size_t>(rows * batch), Scalar(0));
  for (Index r = 0; r < rows; ++r) {
    const auto count = std::count(labels.begin(), labels.end(), classes[static_cast<std::size_t>(r)]);
    for (Index i = 0; i < batch; ++i) {
      if (labels[i] == classes[static_cast<std::size_t>(r)]) m[static_cast<std::size_t>(r * batch + i)] = Scalar(1) / Scalar(count);
    }
  }
  return {std::move(classes), Tensor<Scalar>({rows, batch}, std::move(m))};
}

}  // namespace detail

/// Ensemble relation targets: for each class present, the mean over heads and
/// class members of head_j(embedding), divided by τ. The result is detached.
template <typename Scalar>
ClassRelationTable<Scalar> ensemble_class_relations(const Tensor<Scalar>& embeddings,
                                                    std::span<const Head<Scalar>> heads,
                                                    std::span<const int> labels, Scalar tau) {
  if (heads.empty()) throw ContractError("ensemble_class_relations needs at least one head");
  if (embeddings.rank() != 2 || embeddings.dim(0) != static_cast<Index>(labels.size())) {
    throw ShapeError("embeddings " + shape_string(embeddings.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  NoGradGuard no_grad;
  auto [classes, averaging] = detail::class_average_matrix<Scalar>(labels);
  const auto z = embeddings.detach();
  Tensor<Scalar> total = head_only_forward(heads[0], z);
  for (std::size_t j = 1; j < heads.size(); ++j) total = total + head_only_forward(heads[j], z);
  const Scalar scale = Scalar(1) / (tau * static_cast<Scalar>(heads.size()));
  auto scaled = matmul(averaging, total) * scale;
  return {std::move(classes), scaled.detach(), RelationSource::Ensemble};
}

/// Current-model relations on the original and augmented paths. Gradients
/// flow back into both logit tensors.
template <typename Scalar>
std::pair<ClassRelationTable<Scalar>, ClassRelationTable<Scalar>> current_class_relations(
    const Tensor<Scalar>& logits_original, const Tensor<Scalar>& logits_augmented, std::span<const int> labels,
    Scalar tau) {
  if (logits_original.shape() != logits_augmented.shape() || logits_original.rank() != 2 ||
      logits_original.dim(0) != static_cast<Index>(labels.size())) {
    throw ShapeError("current_class_relations got logits " + shape_string(logits_original.shape()) + " and " +
                     shape_string(logits_augmented.shape()) + " for " + std::to_string(labels.size()) + " labels");
  }
  auto [classes, averaging] = detail::class_average_matrix<Scalar>(labels);
  const Scalar inv_tau = Scalar(1) / tau;
  ClassRelationTable<Scalar> original{classes, matmul(averaging, logits_original) * inv_tau,
                                      RelationSource::CurrentOriginal};
  ClassRelationTable<Scalar> augmented{std::move(classes), matmul(averaging, logits_augmented) * inv_tau,
                                       RelationSource::CurrentAugmented};
  return {std::move(original), std::move(augmented)};
}

/// Σ_k H(p^k) over the rows of a table.
template <typename Scalar>
Scalar relation_entropy(const ClassRelationTable<Scalar>& table) {
  NoGradGuard no_grad;
  const auto p = table.probs();
  const auto lp = table.log_probs();
  Scalar h(0);
  for (Index i = 0; i < p.numel(); ++i) h -= p[i] * lp[i];
  return h;
}

enum class CdrmMode {
  CrossEntropy,  // −Σ p_ens log p_cur − Σ p_ens log p̂_cur
  KL,            // the same minus the constant 2·Σ_k H(p_ens^k)
};

template <typename Scalar>
Tensor<Scalar> cdrm_loss(const ClassRelationTable<Scalar>& ensemble, const ClassRelationTable<Scalar>& current,
                         const ClassRelationTable<Scalar>& current_augmented,
                         CdrmMode mode = CdrmMode::CrossEntropy) {
  if (ensemble.classes != current.classes || ensemble.classes != current_augmented.classes) {
    throw ContractError("cdrm_loss tables cover different class rows");
  }
  if (ensemble.scaled_logits.shape() != current.scaled_logits.shape() ||
      ensemble.scaled_logits.shape() != current_augmented.scaled_logits.shape()) {
    throw ShapeError("cdrm_loss tables have different class counts");
  }
  const auto target = ensemble.probs().detach();
  auto loss = -sum(target * current.log_probs()) - sum(target * current_augmented.log_probs());
  if (mode == CdrmMode::KL) loss = loss - Tensor<Scalar>::scalar(Scalar(2) * relation_entropy(ensemble));
  return loss;
}

template <typename Scalar>
struct LossComponents {
  Tensor<Scalar> task;
  std::optional<Tensor<Scalar>> supcon;
  std::optional<Tensor<Scalar>> cdrm;
};

template <typename Scalar>
struct LocalLoss {
  Tensor<Scalar> total;
  double task = 0.0;
  double supcon = 0.0;
  double cdrm = 0.0;
  double total_value = 0.0;
};

/// L_task + λ_con·L_con + λ_cdrm·L_cdrm; absent terms contribute nothing.
template <typename Scalar>
LocalLoss<Scalar> local_loss(const LossComponents<Scalar>& parts, const LossWeights& weights) {
  auto finite = [](const Tensor<Scalar>& t, const char* name) {
    if (!std::isfinite(static_cast<double>(t.item()))) throw NumericError(std::string("non-finite ") + name + " loss");
    return static_cast<double>(t.item());
  };
  LocalLoss<Scalar> out;
  out.task = finite(parts.task, "task");
  out.total = parts.task;
  if (parts.supcon) {
    out.supcon = finite(*parts.supcon, "supcon");
    out.total = out.total + *parts.supcon * static_cast<Scalar>(weights.lambda_con);
  }
  if (parts.cdrm) {
    out.cdrm = finite(*parts.cdrm, "cdrm");
    out.total = out.total + *parts.cdrm * static_cast<Scalar>(weights.lambda_cdrm);
  }
  out.total_value = finite(out.total, "total");
  return out;
}

}  // namespace mcsad
