#pragma once

// Feature-statistic style manipulation.
//
// The style of a feature map f [B×C×H×W] is its per-sample, per-channel mean
// μ and standard deviation σ over space. Re-styling normalizes with (μ, σ)
// and re-scales with new statistics (μ̂, σ̂). Collaborative style
// augmentation picks (μ̂, σ̂) by gradient ascent on the cross-entropy of a set
// of frozen classifier heads.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mcsad/losses.hpp"
#include "mcsad/model.hpp"
#include "mcsad/ops.hpp"
#include "mcsad/random.hpp"

namespace mcsad {

inline constexpr float kStyleEpsilon = 1e-5f;

template <typename Scalar = float>
struct ChannelStats {
  Tensor<Scalar> mu;     // [B × C]
  Tensor<Scalar> sigma;  // [B × C], ≥ ε

  ChannelStats detached() const { return {mu.detach(), sigma.detach()}; }
};

struct CsaConfig {
  float eta = 1.0f;
  int steps = 1;
  std::vector<int> split_ids{1, 2};
  float epsilon = kStyleEpsilon;
  /// Drop the client's own previous-round head from the discriminator set.
  bool exclude_self = false;

  void validate() const {
    if (!(eta >= 0.0f)) throw ContractError("CSA step size must be non-negative");
    if (steps < 1) throw ContractError("CSA needs at least one ascent step");
    if (split_ids.empty()) throw ContractError("CSA needs at least one split id");
    for (int s : split_ids) {
      if (s < 1 || s > 3) throw ContractError("CSA split id " + std::to_string(s) + " outside {1,2,3}");
    }
    if (!(epsilon > 0.0f)) throw ContractError("CSA epsilon must be positive");
  }

  bool operator==(const CsaConfig&) const = default;
};

/// μ = spatial mean, σ = sqrt(spatial variance + ε²), floored at ε.
template <typename Scalar>
ChannelStats<Scalar> compute_stats(const Tensor<Scalar>& f, Scalar eps = Scalar(kStyleEpsilon)) {
  if (f.rank() != 4 || f.dim(2) * f.dim(3) < 1) {
    throw ShapeError("compute_stats expects a [B×C×H×W] feature map, got " + shape_string(f.shape()));
  }
  const Index b = f.dim(0), c = f.dim(1);
  auto mu = reduce(ReduceOp::Mean, f, {2, 3});
  auto centered = f - reshape(mu, {b, c, 1, 1});
  auto var = reduce(ReduceOp::Mean, square(centered), {2, 3});
  auto sigma = clamp_min(sqrt(var + eps * eps), eps);
  return {mu, sigma};
}

/// f̂ = σ̂·(f − μ)/σ + μ̂, broadcast over space.
template <typename Scalar>
Tensor<Scalar> style_transfer(const Tensor<Scalar>& f, const ChannelStats<Scalar>& stats,
                              const ChannelStats<Scalar>& target, Scalar eps = Scalar(kStyleEpsilon)) {
  if (f.rank() != 4) throw ShapeError("style_transfer expects a [B×C×H×W] feature map");
  const Shape bc{f.dim(0), f.dim(1)};
  for (const auto* t : {&stats.mu, &stats.sigma, &target.mu, &target.sigma}) {
    if (t->shape() != bc) {
      throw ShapeError("statistics " + shape_string(t->shape()) + " do not match feature " + shape_string(f.shape()));
    }
  }
  // Tolerate the last-ulp rounding of sqrt(ε²).
  const Scalar floor = eps * Scalar(0.999);
  for (const auto* s : {&stats.sigma, &target.sigma}) {
    for (Index i = 0; i < s->numel(); ++i) {
      if (!((*s)[i] >= floor)) throw ContractError("sigma below epsilon at index " + std::to_string(i));
    }
  }
  const Shape b11{f.dim(0), f.dim(1), 1, 1};
  auto normalized = (f - reshape(stats.mu, b11)) / reshape(stats.sigma, b11);
  return normalized * reshape(target.sigma, b11) + reshape(target.mu, b11);
}

/// Maps a split feature map to the pooled embedding (the rest of the backbone).
template <typename Scalar>
using SplitForward = std::function<Tensor<Scalar>(const Tensor<Scalar>&)>;

template <typename Scalar>
struct AugmentResult {
  Tensor<Scalar> feature;        // f̂, differentiable w.r.t. f
  ChannelStats<Scalar> learned;  // detached (μ̂, σ̂)
};

/// Gradient ascent on (μ̂, σ̂) against the head-averaged, batch-mean cross-entropy
/// of `heads` evaluated through `rest`. Starts at (μ, σ) of f; after each step σ̂
/// is floored at ε. Head and backbone parameters receive no gradient.
template <typename Scalar>
AugmentResult<Scalar> csa_augment(const Tensor<Scalar>& f, std::span<const int> labels, const SplitForward<Scalar>& rest,
                                  std::span<const Head<Scalar>> heads, const CsaConfig& cfg) {
  cfg.validate();
  if (heads.empty()) throw ContractError("collaborative style augmentation needs at least one head");
  const Scalar eps = static_cast<Scalar>(cfg.epsilon);
  const Scalar eta = static_cast<Scalar>(cfg.eta);
  const auto content = f.detach();
  ChannelStats<Scalar> base;
  {
    NoGradGuard no_grad;
    base = compute_stats(content, eps);
  }
  auto mu_hat = base.mu.clone().set_requires_grad(true);
  auto sigma_hat = base.sigma.clone().set_requires_grad(true);

  for (int step = 0; step < cfg.steps; ++step) {
    auto styled = style_transfer(content, base, ChannelStats<Scalar>{mu_hat, sigma_hat}, eps);
    auto embedding = rest(styled);
    for (std::size_t j = 0; j < heads.size(); ++j) {
      if (embedding.rank() != 2 || embedding.dim(1) != heads[j].embedding_dim()) {
        throw ShapeError("head " + std::to_string(j) + " expects width " + std::to_string(heads[j].embedding_dim()) +
                         ", embedding is " + shape_string(embedding.shape()));
      }
    }
    // Per-head gradients at the embedding, then one pass back to (μ̂, σ̂).
    auto probe = embedding.detach().set_requires_grad(true);
    std::vector<Scalar> seed(static_cast<std::size_t>(embedding.numel()), Scalar(0));
    const std::vector<Tensor<Scalar>> probe_target{probe};
    for (std::size_t j = 0; j < heads.size(); ++j) {
      probe.clear_grad();
      auto loss = cross_entropy(head_only_forward(heads[j], probe), labels, Reduction::Mean);
      backward_to<Scalar>(loss, probe_target);
      if (!all_finite(probe.grad())) {
        throw NumericError("non-finite style gradient from head " + std::to_string(j));
      }
      for (std::size_t i = 0; i < seed.size(); ++i) seed[i] += probe.grad()[i];
    }
    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(heads.size());
    for (Scalar& s : seed) s *= inv_n;

    mu_hat.clear_grad();
    sigma_hat.clear_grad();
    const std::vector<Tensor<Scalar>> stat_targets{mu_hat, sigma_hat};
    backward<Scalar>(embedding, seed, stat_targets);
    if (!mu_hat.has_grad() || !sigma_hat.has_grad()) {
      mu_hat.zero_grad();
      sigma_hat.zero_grad();
      continue;
    }
    if (!all_finite(mu_hat.grad()) || !all_finite(sigma_hat.grad())) {
      throw NumericError("non-finite style gradient at ascent step " + std::to_string(step));
    }
    auto mu = mu_hat.mutable_data();
    auto sigma = sigma_hat.mutable_data();
    for (std::size_t i = 0; i < mu.size(); ++i) {
      mu[i] += eta * mu_hat.grad()[i];
      sigma[i] = std::max(sigma[i] + eta * sigma_hat.grad()[i], eps);
    }
  }

  ChannelStats<Scalar> learned{mu_hat.detach(), sigma_hat.detach()};
  auto feature = style_transfer(f, compute_stats(f, eps), learned, eps);
  return {feature, learned};
}

/// Ascent against the current model's own head only.
template <typename Scalar>
AugmentResult<Scalar> advstyle_augment(const Tensor<Scalar>& f, std::span<const int> labels,
                                       const SplitForward<Scalar>& rest, const Head<Scalar>& own_head, float eta,
                                       float eps = kStyleEpsilon) {
  CsaConfig cfg;
  cfg.eta = eta;
  cfg.epsilon = eps;
  const Head<Scalar> heads[] = {own_head.frozen()};
  return csa_augment<Scalar>(f, labels, rest, heads, cfg);
}

/// Uncertainty-style perturbation with caller-supplied standard normal draws:
/// μ̂ = μ + n_μ·std_b(μ), σ̂ = σ + n_σ·std_b(σ), batch std per channel.
template <typename Scalar>
AugmentResult<Scalar> dsu_augment_with_noise(const Tensor<Scalar>& f, const Tensor<Scalar>& noise_mu,
                                             const Tensor<Scalar>& noise_sigma, Scalar eps = Scalar(kStyleEpsilon)) {
  ChannelStats<Scalar> stats = compute_stats(f, eps);
  ChannelStats<Scalar> base = stats.detached();
  if (noise_mu.shape() != base.mu.shape() || noise_sigma.shape() != base.mu.shape()) {
    throw ShapeError("DSU noise must have shape " + shape_string(base.mu.shape()));
  }
  const Index b = base.mu.dim(0), c = base.mu.dim(1);
  auto batch_std = [&](const Tensor<Scalar>& t) {
    std::vector<Scalar> out(static_cast<std::size_t>(c));
    for (Index j = 0; j < c; ++j) {
      Scalar m(0), v(0);
      for (Index i = 0; i < b; ++i) m += t[i * c + j];
      m /= static_cast<Scalar>(b);
      for (Index i = 0; i < b; ++i) v += (t[i * c + j] - m) * (t[i * c + j] - m);
      out[static_cast<std::size_t>(j)] = std::sqrt(v / static_cast<Scalar>(b) + eps);
    }
    return out;
  };
  const auto std_mu = batch_std(base.mu);
  const auto std_sigma = batch_std(base.sigma);
  std::vector<Scalar> mu(base.mu.data().begin(), base.mu.data().end());
  std::vector<Scalar> sigma(base.sigma.data().begin(), base.sigma.data().end());
  for (Index i = 0; i < b; ++i) {
    for (Index j = 0; j < c; ++j) {
      const auto k = static_cast<std::size_t>(i * c + j);
      mu[k] += noise_mu[i * c + j] * std_mu[static_cast<std::size_t>(j)];
      sigma[k] = std::max(sigma[k] + noise_sigma[i * c + j] * std_sigma[static_cast<std::size_t>(j)], eps);
    }
  }
  ChannelStats<Scalar> learned{Tensor<Scalar>({b, c}, std::move(mu)), Tensor<Scalar>({b, c}, std::move(sigma))};
  return {style_transfer(f, stats, learned, eps), learned};
}

template <typename Scalar>
AugmentResult<Scalar> dsu_augment(const Tensor<Scalar>& f, Rng& rng, Scalar eps = Scalar(kStyleEpsilon)) {
  const Shape bc{f.dim(0), f.dim(1)};
  std::vector<Scalar> nm(static_cast<std::size_t>(shape_numel(bc))), ns(nm.size());
  for (auto& v : nm) v = static_cast<Scalar>(rng.normal());
  for (auto& v : ns) v = static_cast<Scalar>(rng.normal());
  return dsu_augment_with_noise(f, Tensor<Scalar>(bc, std::move(nm)), Tensor<Scalar>(bc, std::move(ns)), eps);
}

/// Convex mix of each sample's statistics with those of sample perm[b]:
/// (μ̂, σ̂)_b = λ_b·(μ, σ)_b + (1 − λ_b)·(μ, σ)_perm[b].
template <typename Scalar>
AugmentResult<Scalar> mixstyle_augment_with(const Tensor<Scalar>& f, std::span<const Scalar> lambdas,
                                            std::span<const std::size_t> perm, Scalar eps = Scalar(kStyleEpsilon)) {
  if (f.rank() != 4 || f.dim(0) < 2) throw ContractError("MixStyle needs a batch of at least two samples");
  const Index b = f.dim(0), c = f.dim(1);
  if (static_cast<Index>(lambdas.size()) != b || static_cast<Index>(perm.size()) != b) {
    throw ShapeError("MixStyle weights and permutation must have one entry per sample");
  }
  ChannelStats<Scalar> stats = compute_stats(f, eps);
  ChannelStats<Scalar> base = stats.detached();
  std::vector<Scalar> mu(static_cast<std::size_t>(b * c)), sigma(mu.size());
  for (Index i = 0; i < b; ++i) {
    const Scalar lam = lambdas[static_cast<std::size_t>(i)];
    const Index other = static_cast<Index>(perm[static_cast<std::size_t>(i)]);
    for (Index j = 0; j < c; ++j) {
      const auto k = static_cast<std::size_t>(i * c + j);
      mu[k] = lam * base.mu[i * c + j] + (Scalar(1) - lam) * base.mu[other * c + j];
      sigma[k] = std::max(lam * base.sigma[i * c + j] + (Scalar(1) - lam) * base.sigma[other * c + j], eps);
    }
  }
  ChannelStats<Scalar> learned{Tensor<Scalar>({b, c}, std::move(mu)), Tensor<Scalar>({b, c}, std::move(sigma))};
  return {style_transfer(f, stats, learned, eps), learned};
}

template <typename Scalar>
AugmentResult<Scalar> mixstyle_augment(const Tensor<Scalar>& f, Rng& rng, double alpha,
                                       Scalar eps = Scalar(kStyleEpsilon)) {
  if (f.rank() != 4 || f.dim(0) < 2) throw ContractError("MixStyle needs a batch of at least two samples");
  const auto b = static_cast<std::size_t>(f.dim(0));
  std::vector<Scalar> lambdas(b);
  for (auto& l : lambdas) l = static_cast<Scalar>(rng.beta(alpha, alpha));
  const auto perm = rng.permutation(b);
  return mixstyle_augment_with<Scalar>(f, lambdas, perm, eps);
}

}  // namespace mcsad
