#include "mcsad/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace mcsad {

namespace fs = std::filesystem;

void DomainStyle::validate() const {
  for (float g : gain) {
    if (!(g > 0.0f)) throw ContractError("domain '" + name + "' needs positive channel gains");
  }
  if (!(gamma > 0.0f)) throw ContractError("domain '" + name + "' needs a positive contrast exponent");
  if (!(noise_std >= 0.0f)) throw ContractError("domain '" + name + "' has negative noise");
}

std::vector<std::size_t> DomainDataset::all_indices() const {
  std::vector<std::size_t> idx(size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

Tensorf DomainDataset::gather(std::span<const std::size_t> indices) const {
  const Index per = images.numel() / images.dim(0);
  std::vector<float> out;
  out.reserve(indices.size() * static_cast<std::size_t>(per));
  for (std::size_t i : indices) {
    auto src = images.data().subspan(i * static_cast<std::size_t>(per), static_cast<std::size_t>(per));
    out.insert(out.end(), src.begin(), src.end());
  }
  return Tensorf({static_cast<Index>(indices.size()), images.dim(1), images.dim(2), images.dim(3)}, std::move(out));
}

std::vector<int> DomainDataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

namespace {

bool inside_shape(int cls, double dx, double dy, double r) {
  const double d = std::hypot(dx, dy);
  switch (cls) {
    case 0: return d <= r;
    case 1: return std::abs(dx) <= 0.82 * r && std::abs(dy) <= 0.82 * r;
    case 2: {
      const double arm = 0.32 * r;
      return (std::abs(dx) <= arm && std::abs(dy) <= r) || (std::abs(dy) <= arm && std::abs(dx) <= r);
    }
    case 3: {
      // Apex up, base at 0.8r.
      if (dy < -r || dy > 0.8 * r) return false;
      const double half_width = r * (dy + r) / (1.8 * r);
      return std::abs(dx) <= half_width;
    }
    case 4: return d <= r && d >= 0.5 * r;
    default: return false;
  }
}

/// Content image for one sample, channel-major [3 × S × S].
void render_content(int cls, int size, Rng& rng, float* out) {
  const double s = size;
  std::array<double, 3> bg{};
  for (auto& c : bg) c = rng.uniform(0.25, 0.75);
  const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
  const double contrast = rng.uniform(0.3, 0.45);
  std::array<double, 3> fg{};
  for (std::size_t c = 0; c < 3; ++c) fg[c] = std::clamp(bg[c] + sign * (contrast + rng.uniform(-0.05, 0.05)), 0.0, 1.0);

  const double cx = s / 2.0 + rng.uniform(-0.14, 0.14) * s;
  const double cy = s / 2.0 + rng.uniform(-0.14, 0.14) * s;
  const double radius = rng.uniform(0.24, 0.34) * s;
  const double fx = rng.uniform(0.3, 1.2), fy = rng.uniform(0.3, 1.2), phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double texture = rng.uniform(0.03, 0.1);

  const auto plane = static_cast<std::size_t>(size) * static_cast<std::size_t>(size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const bool on = inside_shape(cls, x + 0.5 - cx, y + 0.5 - cy, radius);
      const double tex = texture * std::sin(fx * x + fy * y + phase);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (on ? fg[c] : bg[c] + tex) + rng.uniform(-0.02, 0.02);
        out[c * plane + static_cast<std::size_t>(y * size + x)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
}

void apply_style(const DomainStyle& style, int size, Rng& rng, float* img) {
  const auto plane = static_cast<std::size_t>(size) * static_cast<std::size_t>(size);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      float& p = img[c * plane + i];
      const double lin = std::max(0.0, static_cast<double>(style.gain[c]) * p + style.bias[c]);
      double v = std::pow(lin, static_cast<double>(style.gamma));
      if (style.noise_std > 0.0f) v += style.noise_std * rng.normal();
      p = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
}

}  // namespace

void assign_split(DomainDataset& d, std::uint64_t seed) {
  Rng rng(Rng::derive(seed, {3}));
  auto perm = rng.permutation(d.size());
  const std::size_t n_train = d.size() * 4 / 5;
  d.train_indices.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  d.test_indices.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
  std::sort(d.train_indices.begin(), d.train_indices.end());
  std::sort(d.test_indices.begin(), d.test_indices.end());
}

DomainDataset generate_domain(const DomainStyle& style, int n, int num_classes, int image_size, std::uint64_t seed) {
  style.validate();
  if (num_classes < 1 || num_classes > static_cast<int>(kShapeNames.size())) {
    throw ContractError("num_classes " + std::to_string(num_classes) + " exceeds the " +
                        std::to_string(kShapeNames.size()) + " available shape classes");
  }
  if (n < num_classes) throw ContractError("need at least one sample per class");
  if (image_size < 4) throw ContractError("image_size too small to render shapes");

  DomainDataset d;
  d.name = style.name;
  d.seed = seed;
  d.num_classes = num_classes;
  const auto per = static_cast<std::size_t>(kImageChannels * image_size * image_size);
  std::vector<float> pixels(static_cast<std::size_t>(n) * per);
  Rng content_rng(Rng::derive(seed, {1}));
  Rng style_rng(Rng::derive(seed, {2}));
  for (int i = 0; i < n; ++i) {
    const int cls = i % num_classes;
    d.labels.push_back(cls);
    float* img = pixels.data() + static_cast<std::size_t>(i) * per;
    render_content(cls, image_size, content_rng, img);
    apply_style(style, image_size, style_rng, img);
  }
  d.images = Tensorf({n, kImageChannels, image_size, image_size}, std::move(pixels));
  assign_split(d, seed);
  return d;
}

ChannelMeanEstimate channel_mean_estimate(const DomainDataset& d) {
  ChannelMeanEstimate est;
  const auto n = d.size();
  const auto plane = static_cast<std::size_t>(d.images.dim(2) * d.images.dim(3));
  for (std::size_t c = 0; c < 3; ++c) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const float* p = d.images.data().data() + (i * 3 + c) * plane;
      double m = 0.0;
      for (std::size_t k = 0; k < plane; ++k) m += p[k];
      m /= static_cast<double>(plane);
      sum += m;
      sq += m * m;
    }
    const double mean = sum / static_cast<double>(n);
    const double var = n > 1 ? std::max(0.0, (sq - static_cast<double>(n) * mean * mean) / static_cast<double>(n - 1)) : 0.0;
    est.mean[c] = mean;
    est.std_error[c] = std::sqrt(var / static_cast<double>(n));
  }
  return est;
}

void check_style_separation(std::span<const DomainDataset> domains, double factor) {
  std::vector<ChannelMeanEstimate> est;
  for (const auto& d : domains) est.push_back(channel_mean_estimate(d));
  for (std::size_t a = 0; a < domains.size(); ++a) {
    for (std::size_t b = a + 1; b < domains.size(); ++b) {
      bool separated = false;
      for (std::size_t c = 0; c < 3; ++c) {
        const double diff = std::abs(est[a].mean[c] - est[b].mean[c]);
        separated |= diff > factor * std::max(est[a].std_error[c], est[b].std_error[c]);
      }
      if (!separated) {
        throw ContractError("domains '" + domains[a].name + "' and '" + domains[b].name +
                            "' are not separated in channel statistics");
      }
    }
  }
}

DataPreset data_preset(const std::string& name) {
  DataPreset p;
  p.name = name;
  // Four styles: a neutral reference, two tinted ones, and a washed-out,
  // low-contrast domain with swapped channel gains playing the hard role.
  p.styles = {
      DomainStyle{"photo", {1.0f, 1.0f, 1.0f}, {0.0f, 0.0f, 0.0f}, 1.0f, 0.02f},
      DomainStyle{"art", {1.25f, 0.85f, 0.6f}, {0.05f, 0.05f, 0.15f}, 0.8f, 0.04f},
      DomainStyle{"cartoon", {0.7f, 1.1f, 1.35f}, {0.15f, -0.05f, -0.1f}, 1.4f, 0.03f},
      DomainStyle{"sketch", {0.45f, 0.3f, 0.55f}, {0.45f, 0.55f, 0.35f}, 1.8f, 0.06f},
  };
  if (name == "default") {
    p.samples_per_domain = 400;
    p.image_size = 16;
  } else if (name == "tiny") {
    p.samples_per_domain = 400;  // fewer leaves photo and sketch inseparable in channel means
    p.image_size = 8;
  } else {
    throw ContractError("unknown data preset '" + name + "'");
  }
  return p;
}

std::vector<DomainDataset> generate_preset(const DataPreset& preset) {
  std::vector<DomainDataset> out;
  for (std::size_t i = 0; i < preset.styles.size(); ++i) {
    out.push_back(generate_domain(preset.styles[i], preset.samples_per_domain, preset.num_classes, preset.image_size,
                                  Rng::derive(preset.seed, {100 + i})));
  }
  check_style_separation(out);
  return out;
}

LeaveOneOut leave_one_out(std::span<const DomainDataset> domains, std::size_t target) {
  if (domains.size() < 2) throw ContractError("leave-one-domain-out needs at least two domains");
  if (target >= domains.size()) {
    throw ContractError("target index " + std::to_string(target) + " out of range for " +
                        std::to_string(domains.size()) + " domains");
  }
  LeaveOneOut split;
  for (std::size_t i = 0; i < domains.size(); ++i) {
    if (i == target) {
      split.target = &domains[i];
    } else {
      split.sources.push_back(&domains[i]);
    }
  }
  return split;
}

BatchIterator::BatchIterator(const DomainDataset& data, std::vector<std::size_t> subset, std::size_t batch_size,
                             std::uint64_t seed, std::uint64_t epoch)
    : data_(&data), order_(std::move(subset)), batch_size_(batch_size) {
  if (order_.empty()) throw ContractError("cannot iterate an empty split of '" + data.name + "'");
  if (batch_size_ == 0) throw ContractError("batch size must be positive");
  Rng rng(Rng::derive(seed, {epoch, 7}));
  rng.shuffle(order_);
}

bool BatchIterator::next(Batch& out) {
  if (cursor_ >= order_.size()) return false;
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  out.indices.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_), order_.begin() + static_cast<std::ptrdiff_t>(end));
  out.images = data_->gather(out.indices);
  out.labels = data_->gather_labels(out.indices);
  cursor_ = end;
  return true;
}

std::size_t BatchIterator::num_batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

BatchIterator batch_iter(const DomainDataset& data, std::vector<std::size_t> subset, std::size_t batch_size,
                         std::uint64_t seed, std::uint64_t epoch) {
  return BatchIterator(data, std::move(subset), batch_size, seed, epoch);
}

// ---------------------------------------------------------------------------
// Folder ingestion

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct RgbImage {
  int width = 0;
  int height = 0;
  std::string pixels;  // interleaved 8-bit RGB
};

RgbImage read_ppm(const fs::path& path) {
  const std::string bytes = read_file(path);
  std::istringstream in(bytes);
  std::string magic;
  in >> magic;
  auto skip_comments = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  RgbImage img;
  int maxval = 0;
  skip_comments();
  in >> img.width;
  skip_comments();
  in >> img.height;
  skip_comments();
  in >> maxval;
  if (magic != "P6" || !in || img.width <= 0 || img.height <= 0 || maxval != 255) {
    throw IoError("unsupported PPM header in " + path.string());
  }
  in.get();
  const auto offset = static_cast<std::size_t>(in.tellg());
  const auto need = static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height) * 3;
  if (bytes.size() < offset + need) throw IoError("truncated PPM payload in " + path.string());
  img.pixels = bytes.substr(offset, need);
  return img;
}

RgbImage read_raw(const fs::path& path, int width, int height) {
  RgbImage img{width, height, read_file(path)};
  if (img.pixels.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3) {
    throw IoError("raw image " + path.string() + " does not match dims " + std::to_string(width) + "x" +
                  std::to_string(height));
  }
  return img;
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(dir, ec)) {
    if (directories ? e.is_directory() : e.is_regular_file()) out.push_back(e.path());
  }
  if (ec) throw IoError("cannot list " + dir.string() + ": " + ec.message());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

DomainDataset ingest_folder(const fs::path& domain_dir, std::uint64_t split_seed) {
  if (!fs::is_directory(domain_dir)) throw IoError("not a directory: " + domain_dir.string());
  int raw_w = 0, raw_h = 0;
  if (fs::exists(domain_dir / "dims.txt")) {
    std::istringstream dims(read_file(domain_dir / "dims.txt"));
    if (!(dims >> raw_w >> raw_h) || raw_w <= 0 || raw_h <= 0) {
      throw IoError("malformed " + (domain_dir / "dims.txt").string());
    }
  }
  const auto classes = sorted_entries(domain_dir, true);
  if (classes.empty()) throw ContractError("no class directories under " + domain_dir.string());

  DomainDataset d;
  d.name = domain_dir.filename().string();
  d.num_classes = static_cast<int>(classes.size());
  std::vector<float> pixels;
  int width = -1, height = -1;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    std::vector<fs::path> files;
    for (const auto& f : sorted_entries(classes[k], false)) {
      const auto ext = f.extension().string();
      if (ext == ".ppm" || ext == ".raw") files.push_back(f);
    }
    if (files.empty()) throw ContractError("class directory '" + classes[k].filename().string() + "' has no images");
    for (const auto& f : files) {
      RgbImage img;
      if (f.extension() == ".ppm") {
        img = read_ppm(f);
      } else {
        if (raw_w == 0) throw IoError("raw image " + f.string() + " without dims.txt");
        img = read_raw(f, raw_w, raw_h);
      }
      if (width < 0) {
        width = img.width;
        height = img.height;
        if (width != height) throw IoError("non-square image " + f.string());
      } else if (img.width != width || img.height != height) {
        throw IoError("inconsistent image dimensions in " + f.string());
      }
      const auto plane = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
      const std::size_t base = pixels.size();
      pixels.resize(base + 3 * plane);
      for (std::size_t i = 0; i < plane; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
          pixels[base + c * plane + i] = static_cast<float>(static_cast<unsigned char>(img.pixels[i * 3 + c])) / 255.0f;
        }
      }
      d.labels.push_back(static_cast<int>(k));
    }
  }
  d.images = Tensorf({static_cast<Index>(d.labels.size()), 3, height, width}, std::move(pixels));
  d.seed = split_seed;
  assign_split(d, split_seed);
  return d;
}

void export_folder(const DomainDataset& d, const fs::path& root) {
  const fs::path dir = root / d.name;
  const int size = d.image_size();
  const auto plane = static_cast<std::size_t>(size) * static_cast<std::size_t>(size);
  for (int k = 0; k < d.num_classes; ++k) {
    char buf[64];
    const char* shape = k < static_cast<int>(kShapeNames.size()) ? kShapeNames[static_cast<std::size_t>(k)] : "class";
    std::snprintf(buf, sizeof buf, "%02d_%s", k, shape);
    fs::create_directories(dir / buf);
  }
  for (std::size_t i = 0; i < d.size(); ++i) {
    const int k = d.labels[i];
    char cls[64], file[32];
    const char* shape = k < static_cast<int>(kShapeNames.size()) ? kShapeNames[static_cast<std::size_t>(k)] : "class";
    std::snprintf(cls, sizeof cls, "%02d_%s", k, shape);
    std::snprintf(file, sizeof file, "%06zu.ppm", i);
    const fs::path path = dir / cls / file;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << "P6\n" << size << ' ' << size << "\n255\n";
    const float* img = d.images.data().data() + i * 3 * plane;
    std::string bytes(3 * plane, '\0');
    for (std::size_t p = 0; p < plane; ++p) {
      for (std::size_t c = 0; c < 3; ++c) {
        bytes[p * 3 + c] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(img[c * plane + p], 0.0f, 1.0f) * 255.0f)));
      }
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
}

void quantize_to_8bit(DomainDataset& d) {
  for (float& v : d.images.mutable_data()) {
    v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
  }
}

}  // namespace mcsad
