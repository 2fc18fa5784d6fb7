#pragma once

// Synthetic multi-domain image data. Every domain renders the same shape
// classes; domains differ only in a per-channel photometric style, so the
// label given the content is identical across domains while the pixel
// statistics shift.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mcsad/random.hpp"
#include "mcsad/tensor.hpp"

namespace mcsad {

inline constexpr int kImageChannels = 3;

/// Shape classes in label order.
inline constexpr std::array<const char*, 5> kShapeNames{"disk", "square", "cross", "triangle", "ring"};

/// pixel ← clamp(max(gain·pixel + bias, 0)^gamma + noise_std·N(0,1), 0, 1), per channel.
struct DomainStyle {
  std::string name;
  std::array<float, 3> gain{1.0f, 1.0f, 1.0f};
  std::array<float, 3> bias{0.0f, 0.0f, 0.0f};
  float gamma = 1.0f;
  float noise_std = 0.0f;

  static DomainStyle identity(std::string name = "identity") { return DomainStyle{std::move(name)}; }
  void validate() const;
  bool operator==(const DomainStyle&) const = default;
};

struct DomainDataset {
  std::string name;
  Tensorf images;  // [N × 3 × S × S], values in [0, 1]
  std::vector<int> labels;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
  std::uint64_t seed = 0;
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
  int image_size() const { return static_cast<int>(images.dim(2)); }
  std::vector<std::size_t> all_indices() const;

  /// Images at `indices` stacked into a new [n × 3 × S × S] tensor.
  Tensorf gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
};

DomainDataset generate_domain(const DomainStyle& style, int n, int num_classes, int image_size, std::uint64_t seed);

/// Per-image channel means averaged over the dataset, and the standard error
/// of that average, per channel.
struct ChannelMeanEstimate {
  std::array<double, 3> mean{};
  std::array<double, 3> std_error{};
};
ChannelMeanEstimate channel_mean_estimate(const DomainDataset& d);

/// Throws ContractError unless every pair of datasets differs in some channel
/// mean by more than `factor` times the larger standard error.
void check_style_separation(std::span<const DomainDataset> domains, double factor = 5.0);

struct DataPreset {
  std::string name = "default";
  std::vector<DomainStyle> styles;
  int samples_per_domain = 0;
  int num_classes = 5;
  int image_size = 16;
  std::uint64_t seed = 2024;
};

/// Named presets: "default" (four domains, desk scale) and "tiny" (tests).
DataPreset data_preset(const std::string& name);
std::vector<DomainDataset> generate_preset(const DataPreset& preset);

struct LeaveOneOut {
  std::vector<const DomainDataset*> sources;
  const DomainDataset* target = nullptr;
};
LeaveOneOut leave_one_out(std::span<const DomainDataset> domains, std::size_t target);

struct Batch {
  Tensorf images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

/// Seeded shuffled mini-batches over a subset of a dataset; the final short
/// batch is kept. The order is a pure function of (seed, epoch).
class BatchIterator {
 public:
  BatchIterator(const DomainDataset& data, std::vector<std::size_t> subset, std::size_t batch_size,
                std::uint64_t seed, std::uint64_t epoch);

  bool next(Batch& out);
  std::size_t num_batches() const;

 private:
  const DomainDataset* data_;
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::size_t cursor_ = 0;
};

BatchIterator batch_iter(const DomainDataset& data, std::vector<std::size_t> subset, std::size_t batch_size,
                         std::uint64_t seed, std::uint64_t epoch);

/// Splits indices 80/20 with a seeded shuffle.
void assign_split(DomainDataset& d, std::uint64_t seed);

/// Loads root/<domain>/<class>/<file> where files are binary PPM (P6, maxval
/// 255) or `.raw` interleaved 8-bit RGB sized by a "<width> <height>" line in
/// <domain>/dims.txt. Classes are labeled in sorted directory order.
DomainDataset ingest_folder(const std::filesystem::path& domain_dir, std::uint64_t split_seed = 0);

/// Writes one PPM per sample under root/<name>/<NN_class>/<index>.ppm. Values
/// are quantized to 8 bits.
void export_folder(const DomainDataset& d, const std::filesystem::path& root);

/// Rounds every pixel to the nearest multiple of 1/255.
void quantize_to_8bit(DomainDataset& d);

}  // namespace mcsad
