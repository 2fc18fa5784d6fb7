#pragma once

#include <algorithm>
#include <span>

#include "mcsad/data.hpp"
#include "mcsad/model.hpp"

namespace mcsad {

/// Index of the largest entry in each row; ties go to the lowest index.
template <typename Scalar>
std::vector<int> argmax_rows(const Tensor<Scalar>& logits) {
  const Index k = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(logits.dim(0)));
  for (Index r = 0; r < logits.dim(0); ++r) {
    int best = 0;
    for (Index j = 1; j < k; ++j) {
      if (logits[r * k + j] > logits[r * k + best]) best = static_cast<int>(j);
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

/// Top-1 accuracy of `model` on the listed samples, as a fraction.
template <typename Scalar>
double evaluate(const Model<Scalar>& model, const DomainDataset& data, std::span<const std::size_t> indices,
                std::size_t chunk = 256) {
  if (indices.empty()) throw ContractError("cannot evaluate on an empty split of '" + data.name + "'");
  NoGradGuard no_grad;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    const auto part = indices.subspan(start, std::min(chunk, indices.size() - start));
    auto images = data.gather(part);
    const auto logits = model.forward(cast<Scalar>(images));
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < part.size(); ++i) correct += pred[i] == data.labels[part[i]];
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

}  // namespace mcsad
