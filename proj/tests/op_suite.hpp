#pragma once

// Differentiable operations paired with random-input generators, shared by
// the unit tests and the acceptance runner. Each case reduces its output to a
// scalar with a fixed random projection before checking.

#include <memory>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "mcsad/losses.hpp"
#include "mcsad/style.hpp"

namespace mcsad::testing {

struct OpCase {
  std::string name;
  std::function<std::vector<Tensord>(Rng&)> inputs;
  LossFn loss;
};

inline std::vector<OpCase> op_cases() {
  auto uni = [](Shape s, double lo = -1.0, double hi = 1.0) {
    return [s, lo, hi](Rng& rng) { return std::vector<Tensord>{random_tensor(rng, s, lo, hi)}; };
  };
  auto two = [](Shape a, Shape b, double lo = -1.0, double hi = 1.0) {
    return [a, b, lo, hi](Rng& rng) {
      return std::vector<Tensord>{random_tensor(rng, a, lo, hi), random_tensor(rng, b, lo, hi)};
    };
  };
  auto proj = [](std::uint64_t seed, auto fn) {
    return [seed, fn](const std::vector<Tensord>& in) { return project(fn(in), seed); };
  };
  static const std::vector<int> labels6{0, 1, 0, 2, 1, 0};

  std::vector<OpCase> cases;
  cases.push_back({"add_broadcast", two({3, 4}, {4}), proj(1, [](auto& in) { return in[0] + in[1]; })});
  cases.push_back({"sub_broadcast", two({2, 3, 1}, {3, 4}), proj(2, [](auto& in) { return in[0] - in[1]; })});
  cases.push_back({"mul_broadcast", two({2, 1, 4}, {3, 1}), proj(3, [](auto& in) { return in[0] * in[1]; })});
  cases.push_back({"div", [](Rng& rng) {
                     return std::vector<Tensord>{random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4}, 0.5, 2.0)};
                   },
                   proj(4, [](auto& in) { return in[0] / in[1]; })});
  cases.push_back({"pow_tensor", [](Rng& rng) {
                     return std::vector<Tensord>{random_tensor(rng, {5}, 0.5, 2.0), random_tensor(rng, {5}, -1.0, 2.0)};
                   },
                   proj(5, [](auto& in) { return pow(in[0], in[1]); })});
  cases.push_back({"pow_cube", uni({6}), proj(6, [](auto& in) { return pow(in[0], 3.0); })});
  cases.push_back({"exp", uni({2, 3}), proj(7, [](auto& in) { return exp(in[0]); })});
  cases.push_back({"log", uni({2, 3}, 0.2, 3.0), proj(8, [](auto& in) { return log(in[0]); })});
  cases.push_back({"relu", uni({10}), proj(9, [](auto& in) { return relu(in[0]); })});
  cases.push_back({"sqrt", uni({6}, 0.2, 3.0), proj(10, [](auto& in) { return sqrt(in[0]); })});
  cases.push_back({"square_neg", uni({6}), proj(11, [](auto& in) { return -square(in[0]); })});
  cases.push_back({"clamp_min", uni({10}), proj(12, [](auto& in) { return clamp_min(in[0], 0.1); })});
  cases.push_back({"scalar_arith", uni({4}),
                   proj(13, [](auto& in) { return (2.0 * in[0] + 1.0) / 3.0 - in[0] * 0.5; })});
  cases.push_back({"reshape_transpose", uni({2, 6}),
                   proj(14, [](auto& in) { return transpose(reshape(in[0], {4, 3})); })});
  cases.push_back({"concat", two({2, 3}, {3, 3}), proj(15, [](auto& in) { return concat(in[0], in[1]); })});
  cases.push_back({"select_rows", uni({4, 3}),
                   proj(16, [](auto& in) { return select_rows(in[0], {3, 0, 3, 1}); })});
  cases.push_back({"matmul", two({3, 4}, {4, 2}), proj(17, [](auto& in) { return matmul(in[0], in[1]); })});
  cases.push_back({"linear", [](Rng& rng) {
                     return std::vector<Tensord>{random_tensor(rng, {3, 4}), random_tensor(rng, {2, 4}),
                                                 random_tensor(rng, {2})};
                   },
                   proj(18, [](auto& in) { return linear(in[0], in[1], in[2]); })});
  cases.push_back({"conv2d_pad1_bias", [](Rng& rng) {
                     return std::vector<Tensord>{random_tensor(rng, {2, 2, 5, 5}), random_tensor(rng, {3, 2, 3, 3}),
                                                 random_tensor(rng, {3})};
                   },
                   proj(19, [](auto& in) { return conv2d(in[0], in[1], std::optional<Tensord>(in[2]), 1, 1); })});
  cases.push_back({"conv2d_stride2", two({1, 2, 6, 6}, {2, 2, 2, 2}),
                   proj(20, [](auto& in) { return conv2d(in[0], in[1], std::optional<Tensord>{}, 2, 0); })});
  cases.push_back({"avg_pool2d", uni({2, 2, 4, 4}), proj(21, [](auto& in) { return avg_pool2d(in[0], 2); })});
  cases.push_back({"reduce_sum_axes", uni({2, 3, 4}),
                   proj(22, [](auto& in) { return reduce(ReduceOp::Sum, in[0], {0, 2}); })});
  cases.push_back({"reduce_mean_keepdim", uni({2, 3, 4}),
                   proj(23, [](auto& in) { return reduce(ReduceOp::Mean, in[0], {-1}, true); })});
  cases.push_back({"reduce_max", uni({3, 5}), proj(24, [](auto& in) { return reduce(ReduceOp::Max, in[0], {1}); })});
  cases.push_back({"log_softmax", uni({3, 5}, -3.0, 3.0), proj(25, [](auto& in) { return log_softmax(in[0]); })});
  cases.push_back({"softmax", uni({3, 5}, -3.0, 3.0), proj(26, [](auto& in) { return softmax(in[0]); })});
  cases.push_back({"pick", uni({3, 4}), proj(27, [](auto& in) {
                     static const std::vector<int> idx{2, 0, 3};
                     return pick(in[0], std::span<const int>(idx));
                   })});
  cases.push_back({"l2_normalize_rows", uni({3, 4}), proj(28, [](auto& in) { return l2_normalize_rows(in[0]); })});
  cases.push_back({"compute_stats", uni({2, 3, 3, 3}), proj(29, [](auto& in) {
                     auto s = compute_stats(in[0]);
                     return concat(s.mu, s.sigma);
                   })});
  cases.push_back({"style_transfer", [](Rng& rng) {
                     return std::vector<Tensord>{random_tensor(rng, {2, 2, 3, 3}), random_tensor(rng, {2, 2}),
                                                 random_tensor(rng, {2, 2}, 0.5, 2.0)};
                   },
                   proj(30, [](auto& in) {
                     return style_transfer(in[0], compute_stats(in[0]), ChannelStats<double>{in[1], in[2]});
                   })});
  cases.push_back({"cross_entropy", uni({6, 3}, -2.0, 2.0),
                   [](auto& in) { return cross_entropy(in[0], std::span<const int>(labels6)); }});
  cases.push_back({"supcon", uni({6, 4}),
                   [](auto& in) { return supcon_loss(in[0], std::span<const int>(labels6), 0.5).loss; }});
  cases.push_back({"cdrm", [](Rng& rng) {
                     return std::vector<Tensord>{random_tensor(rng, {6, 3}, -2.0, 2.0),
                                                 random_tensor(rng, {6, 3}, -2.0, 2.0)};
                   },
                   [](auto& in) {
                     const std::span<const int> labels(labels6);
                     Rng fixed(31);  // the target table is a constant
                     ClassRelationTable<double> ens{{0, 1, 2}, random_tensor(fixed, {3, 3}, -2.0, 2.0),
                                                    RelationSource::Ensemble};
                     auto [cur, aug] = current_class_relations(in[0], in[1], labels, 1.5);
                     return cdrm_loss(ens, cur, aug);
                   }});
  return cases;
}

/// End-to-end local objective of a tiny double-precision model, as a function
/// of all model parameters. The stop-gradient quantities (CSA statistics and
/// the ensemble relation table) are computed once at the starting parameters
/// and held fixed, matching what backward sees.
struct LocalObjective {
  std::shared_ptr<Model<double>> model;
  LossFn loss;
};

inline LocalObjective local_objective(std::uint64_t seed, CdrmMode mode = CdrmMode::CrossEntropy) {
  Rng rng(seed);
  BackboneConfig cfg;
  cfg.block_channels = {2, 3, 4};
  cfg.embedding_dim = 4;
  cfg.image_size = 8;
  cfg.num_classes = 3;
  auto model = std::make_shared<Model<double>>(Model<double>::initialized(cfg, seed));
  for (auto& p : model->parameters()) {
    for (double& v : p.mutable_data()) v += rng.uniform(-0.1, 0.1);  // non-zero biases too
  }
  const auto x = random_tensor(rng, {4, 3, 8, 8}, 0.0, 1.0);
  const std::vector<int> labels{0, 1, 0, 2};
  const int split = 1 + static_cast<int>(rng.index(3));
  std::vector<Head<double>> heads;
  for (int j = 0; j < 2; ++j) {
    heads.push_back(Head<double>{random_tensor(rng, {3, 4}), random_tensor(rng, {3})}.frozen());
  }
  LossWeights w;
  w.tau_supcon = 0.5f;  // keeps the contrastive curvature moderate for the difference quotient

  CsaConfig csa;
  csa.eta = 0.5f;
  ChannelStats<double> learned;
  ClassRelationTable<double> ensemble;
  {
    const auto f = model->forward_to_split(x, split);
    SplitForward<double> rest = [m = model.get(), split](const Tensord& g) { return m->embed_from_split(g, split); };
    learned = csa_augment<double>(f, labels, rest, heads, csa).learned;
    ensemble = ensemble_class_relations<double>(model->embed_from_split(f, split), heads, labels, w.tau_cdrm);
  }

  LossFn loss = [m = model.get(), x, labels, split, learned, ensemble, w, mode](const std::vector<Tensord>&) {
    const std::span<const int> lab(labels);
    auto f = m->forward_to_split(x, split);
    auto f_hat = style_transfer(f, compute_stats(f), learned);
    auto z = m->embed_from_split(f, split);
    auto z_aug = m->embed_from_split(f_hat, split);
    auto logits = head_only_forward(m->head(), z);
    auto logits_aug = head_only_forward(m->head(), z_aug);
    std::vector<int> doubled(labels);
    doubled.insert(doubled.end(), labels.begin(), labels.end());
    auto [cur, aug] = current_class_relations(logits, logits_aug, lab, static_cast<double>(w.tau_cdrm));
    LossComponents<double> parts{task_loss(logits, logits_aug, lab),
                                 supcon_loss(concat(z, z_aug), std::span<const int>(doubled),
                                             static_cast<double>(w.tau_supcon)).loss,
                                 cdrm_loss(ensemble, cur, aug, mode)};
    return local_loss(parts, w).total;
  };
  return {model, loss};
}

}  // namespace mcsad::testing
