#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mcsad/harness.hpp"

extern char** environ;

namespace mcsad {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw ContractError("config key '" + key + "': cannot read '" + value + "' as " + expected);
}

template <typename T>
T parse_integer(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end) bad_value(key, value, "an integer");
  return out;
}

template <typename T>
T parse_real(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end) bad_value(key, value, "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  bad_value(key, value, "a boolean");
}

std::string format_real(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

struct Key {
  const char* name;
  void (*set)(ExperimentConfig&, const std::string& key, const std::string& value);
  std::string (*get)(const ExperimentConfig&);
};

std::string f32(float v) { return format_real(v, 9); }
std::string f64(double v) { return format_real(v, 17); }
std::string flag(bool b) { return b ? "true" : "false"; }

// Order here is the serialization order.
const std::vector<Key>& keys() {
  static const std::vector<Key> table{
      {"mode", [](auto& c, auto&, auto& v) { c.mode = v; }, [](auto& c) { return c.mode; }},
      {"preset", [](auto& c, auto&, auto& v) { c.preset = v; }, [](auto& c) { return c.preset; }},
      {"data_root", [](auto& c, auto&, auto& v) { c.data_root = v; }, [](auto& c) { return c.data_root; }},
      {"samples_per_domain", [](auto& c, auto& k, auto& v) { c.samples_per_domain = parse_integer<int>(k, v); },
       [](auto& c) { return std::to_string(c.samples_per_domain); }},
      {"image_size", [](auto& c, auto& k, auto& v) { c.image_size = parse_integer<int>(k, v); },
       [](auto& c) { return std::to_string(c.image_size); }},
      {"data_seed", [](auto& c, auto& k, auto& v) { c.data_seed = parse_integer<std::uint64_t>(k, v); },
       [](auto& c) { return std::to_string(c.data_seed); }},
      {"targets",
       [](auto& c, auto& k, auto& v) {
         c.targets.clear();
         if (v == "all") return;
         for (const auto& t : split_list(v)) c.targets.push_back(parse_integer<int>(k, t));
       },
       [](auto& c) { return c.targets.empty() ? std::string("all") : join(c.targets); }},
      {"seeds",
       [](auto& c, auto& k, auto& v) {
         c.seeds.clear();
         for (const auto& s : split_list(v)) c.seeds.push_back(parse_integer<std::uint64_t>(k, s));
       },
       [](auto& c) { return join(c.seeds); }},
      {"out_dir", [](auto& c, auto&, auto& v) { c.out_dir = v; }, [](auto& c) { return c.out_dir; }},
      {"deterministic", [](auto& c, auto& k, auto& v) { c.deterministic = parse_bool(k, v); },
       [](auto& c) { return flag(c.deterministic); }},
      {"jobs", [](auto& c, auto& k, auto& v) { c.jobs = parse_integer<int>(k, v); },
       [](auto& c) { return std::to_string(c.jobs); }},
      {"rounds", [](auto& c, auto& k, auto& v) { c.round.rounds = parse_integer<int>(k, v); },
       [](auto& c) { return std::to_string(c.round.rounds); }},
      {"local_epochs", [](auto& c, auto& k, auto& v) { c.round.local_epochs = parse_integer<int>(k, v); },
       [](auto& c) { return std::to_string(c.round.local_epochs); }},
      {"batch_size", [](auto& c, auto& k, auto& v) { c.round.batch_size = parse_integer<int>(k, v); },
       [](auto& c) { return std::to_string(c.round.batch_size); }},
      {"lr_initial", [](auto& c, auto& k, auto& v) { c.round.lr_initial = parse_real<float>(k, v); },
       [](auto& c) { return f32(c.round.lr_initial); }},
      {"lr_final", [](auto& c, auto& k, auto& v) { c.round.lr_final = parse_real<float>(k, v); },
       [](auto& c) { return f32(c.round.lr_final); }},
      {"momentum", [](auto& c, auto& k, auto& v) { c.round.momentum = parse_real<float>(k, v); },
       [](auto& c) { return f32(c.round.momentum); }},
      {"weight_decay", [](auto& c, auto& k, auto& v) { c.round.weight_decay = parse_real<float>(k, v); },
       [](auto& c) { return f32(c.round.weight_decay); }},
      {"block_channels",
       [](auto& c, auto& k, auto& v) {
         const auto items = split_list(v);
         if (items.size() != 3) bad_value(k, v, "three comma-separated channel counts");
         for (std::size_t i = 0; i < 3; ++i) c.round.backbone.block_channels[i] = parse_integer<int>(k, items[i]);
         c.round.backbone.embedding_dim = c.round.backbone.block_channels[2];
       },
       [](auto& c) {
         const auto& b = c.round.backbone.block_channels;
         return std::to_string(b[0]) + "," + std::to_string(b[1]) + "," + std::to_string(b[2]);
       }},
      {"augmenter", [](auto& c, auto&, auto& v) { c.round.augmenter = parse_augmenter(v); },
       [](auto& c) { return to_string(c.round.augmenter); }},
      {"supcon", [](auto& c, auto& k, auto& v) { c.round.supcon = parse_bool(k, v); },
       [](auto& c) { return flag(c.round.supcon); }},
      {"cdrm", [](auto& c, auto& k, auto& v) { c.round.cdrm = parse_bool(k, v); },
       [](auto& c) { return flag(c.round.cdrm); }},
      {"cdrm_mode",
       [](auto& c, auto& k, auto& v) {
         if (v == "ce") c.round.cdrm_mode = CdrmMode::CrossEntropy;
         else if (v == "kl") c.round.cdrm_mode = CdrmMode::KL;
         else bad_value(k, v, "ce or kl");
       },
       [](auto& c) { return std::string(c.round.cdrm_mode == CdrmMode::KL ? "kl" : "ce"); }},
      {"lambda_con", [](auto& c, auto& k, auto& v) { c.round.weights.lambda_con = parse_real<float>(k, v); },
       [](auto& c) { return f32(c.round.weights.lambda_con); }},
      {"lambda_cdrm", [](auto& c, auto& k, auto& v) { c.round.weights.lambda_cdrm = parse_real<float>(k, v); },
       [](auto& c) { return f32(c.round.weights.lambda_cdrm); }},
      {"tau_supcon", [](auto& c, auto& k, auto& v) { c.round.weights.tau_supcon = parse_real<float>(k, v); },
       [](auto& c) { return f32(c.round.weights.tau_supcon); }},
      {"tau_cdrm", [](auto& c, auto& k, auto& v) { c.round.weights.tau_cdrm = parse_real<float>(k, v); },
       [](auto& c) { return f32(c.round.weights.tau_cdrm); }},
      {"csa.eta", [](auto& c, auto& k, auto& v) { c.round.csa.eta = parse_real<float>(k, v); },
       [](auto& c) { return f32(c.round.csa.eta); }},
      {"csa.steps", [](auto& c, auto& k, auto& v) { c.round.csa.steps = parse_integer<int>(k, v); },
       [](auto& c) { return std::to_string(c.round.csa.steps); }},
      {"csa.splits",
       [](auto& c, auto& k, auto& v) {
         c.round.csa.split_ids.clear();
         for (const auto& s : split_list(v)) c.round.csa.split_ids.push_back(parse_integer<int>(k, s));
       },
       [](auto& c) { return join(c.round.csa.split_ids); }},
      {"csa.epsilon", [](auto& c, auto& k, auto& v) { c.round.csa.epsilon = parse_real<float>(k, v); },
       [](auto& c) { return f32(c.round.csa.epsilon); }},
      {"csa.exclude_self", [](auto& c, auto& k, auto& v) { c.round.csa.exclude_self = parse_bool(k, v); },
       [](auto& c) { return flag(c.round.csa.exclude_self); }},
      {"mixstyle_alpha", [](auto& c, auto& k, auto& v) { c.round.mixstyle_alpha = parse_real<double>(k, v); },
       [](auto& c) { return f64(c.round.mixstyle_alpha); }},
      {"parallel_clients", [](auto& c, auto& k, auto& v) { c.round.parallel_clients = parse_bool(k, v); },
       [](auto& c) { return flag(c.round.parallel_clients); }},
  };
  return table;
}

std::string env_name(const std::string& key) {
  std::string out = kEnvPrefix;
  for (char ch : key) out += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return out;
}

}  // namespace

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig cfg;
  cfg.round.backbone.block_channels = {8, 16, 32};
  cfg.round.backbone.embedding_dim = 32;
  cfg.round.backbone.image_size = 16;
  cfg.round.weights.tau_cdrm = 1.5f;
  // Training from scratch needs a larger step than fine-tuning a pretrained net.
  cfg.round.lr_initial = 0.03f;
  cfg.round.lr_final = 5e-4f;
  // Both auxiliary losses are sums (over 2B anchors, over K class rows), so
  // the reference weights 1 and 4 are divided by those counts.
  cfg.round.weights.lambda_con = 1.0f / 32.0f;
  cfg.round.weights.lambda_cdrm = 4.0f / 5.0f;
  return cfg;
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ContractError("at least one seed is required");
  if (std::find(experiment_modes().begin(), experiment_modes().end(), mode) == experiment_modes().end()) {
    throw ContractError("unknown mode '" + mode + "'");
  }
  if (samples_per_domain < 0 || image_size < 0) throw ContractError("sizes must be non-negative");
  if (jobs < 1) throw ContractError("jobs must be at least 1");
  if (out_dir.empty()) throw ContractError("output directory must be set");
  for (int t : targets) {
    if (t < 0) throw ContractError("target index " + std::to_string(t) + " is negative");
  }
  round.csa.validate();
  round.weights.validate(true);
}

void set_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : keys()) {
    if (key == k.name) {
      k.set(cfg, key, value);
      return;
    }
  }
  throw ContractError("unknown config key '" + key + "'");
}

ExperimentConfig parse_config(const std::string& text, ExperimentConfig base) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    set_config_key(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), std::move(base));
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& k : keys()) out += std::string(k.name) + " = " + k.get(cfg) + "\n";
  return out;
}

void apply_env_overrides(ExperimentConfig& cfg, const std::map<std::string, std::string>& env) {
  for (const auto& k : keys()) {
    if (auto it = env.find(env_name(k.name)); it != env.end()) k.set(cfg, k.name, trim(it->second));
  }
}

std::map<std::string, std::string> current_environment() {
  std::map<std::string, std::string> env;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry(*e);
    const auto eq = entry.find('=');
    if (eq != std::string::npos && entry.rfind(kEnvPrefix, 0) == 0) env[entry.substr(0, eq)] = entry.substr(eq + 1);
  }
  return env;
}

}  // namespace mcsad
