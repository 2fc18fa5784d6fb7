// Acceptance runner: one PASS/FAIL line per criterion, details indented
// below it. Exit status is nonzero when any selected criterion fails.
//
//   acceptance [--criteria 1,2,...] [--seeds N] [--csv FILE]

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <unistd.h>

#include "federation_props.hpp"
#include "loss_oracles.hpp"
#include "mcsad/harness.hpp"
#include "op_suite.hpp"
#include "style_props.hpp"

using namespace mcsad;
using namespace mcsad::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = true;
  std::vector<std::string> details;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    details.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

// --- 1 ---------------------------------------------------------------------

Verdict autodiff_soundness() {
  Verdict v;
  const auto t0 = Clock::now();
  int instances = 0;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : op_cases()) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      Rng rng(Rng::derive(seed, {1001}));
      const double err = check_gradients(c.loss, c.inputs(rng)).relative_error;
      ++instances;
      if (!(err <= worst)) {
        worst = err;
        worst_name = c.name;
      }
    }
  }
  double worst_local = 0.0;
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    auto obj = local_objective(seed + 500, seed % 2 ? CdrmMode::KL : CdrmMode::CrossEntropy);
    worst_local = std::max(worst_local, check_gradients(obj.loss, obj.model->parameters()).relative_error);
    ++instances;
  }
  const double t = seconds_since(t0);
  v.require(instances >= 100, std::to_string(instances) + " seeded instances (>= 100)");
  v.require(worst < 1e-3, "worst op relative error " + fmt("%.2e", worst) + " (" + worst_name + ") < 1e-3");
  v.require(worst_local < 1e-3, "worst end-to-end local objective error " + fmt("%.2e", worst_local) + " < 1e-3");
  v.require(t < 60.0, fmt("runtime %.1f s < 60 s", t));
  return v;
}

// --- 2 ---------------------------------------------------------------------

Verdict style_algebra() {
  Verdict v;
  double identity = 0.0, round_trip = 0.0, norm_mu = 0.0, norm_sigma = 0.0;
  bool clamp_ok = true;
  int rejected = 0, clamped = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(Rng::derive(seed, {2002}));
    const Index b = 1 + static_cast<Index>(rng.index(4)), c = 1 + static_cast<Index>(rng.index(6));
    const Index h = 2 + static_cast<Index>(rng.index(6));
    const auto f = cast<float>(random_tensor(rng, {b, c, h, h}, -3.0, 3.0));
    const auto s = compute_stats(f);
    const auto same = style_transfer(f, s, s);
    const ChannelStats<float> target{cast<float>(random_tensor(rng, {b, c}, -1.0, 1.0)),
                                     cast<float>(random_tensor(rng, {b, c}, 0.3, 3.0))};
    const auto there = style_transfer(f, s, target);
    const auto back = style_transfer(there, compute_stats(there), s);
    const auto n = compute_stats(style_transfer(f, s, ChannelStats<float>{Tensorf::zeros({b, c}), Tensorf::ones({b, c})}));
    for (Index i = 0; i < f.numel(); ++i) {
      identity = std::max(identity, static_cast<double>(std::abs(same[i] - f[i])));
      round_trip = std::max(round_trip, static_cast<double>(std::abs(back[i] - f[i])));
    }
    for (Index i = 0; i < n.mu.numel(); ++i) {
      norm_mu = std::max(norm_mu, static_cast<double>(std::abs(n.mu[i])));
      norm_sigma = std::max(norm_sigma, static_cast<double>(std::abs(n.sigma[i] - 1.0f)));
    }

    // A large ascent step must still leave σ̂ ≥ ε, and a σ below ε is refused.
    auto fx = csa_fixture(seed);
    CsaConfig big;
    big.eta = 1e3f;
    const auto aug = csa_augment<double>(fx.feature, fx.labels, fx.rest(), fx.heads, big);
    for (double sv : aug.learned.sigma.data()) {
      clamp_ok = clamp_ok && sv >= big.epsilon;
      clamped += sv == static_cast<double>(big.epsilon) ? 1 : 0;
    }
    auto low = s.sigma.detach();
    low.mutable_data()[0] = kStyleEpsilon * 0.5f;
    try {
      (void)style_transfer(f, s, ChannelStats<float>{s.mu, low});
    } catch (const ContractError&) {
      ++rejected;
    }
  }
  v.require(identity <= 1e-6, "identity transfer max abs " + fmt("%.2e", identity) + " <= 1e-6");
  v.require(norm_mu <= 1e-5, "normalized mean max abs " + fmt("%.2e", norm_mu) + " <= 1e-5");
  v.require(norm_sigma <= 1e-3, "normalized sigma max |s-1| " + fmt("%.2e", norm_sigma) + " <= 1e-3");
  v.require(round_trip <= 1e-4, "stat round trip max abs " + fmt("%.2e", round_trip) + " <= 1e-4");
  v.require(clamp_ok && clamped > 0, "sigma-hat >= epsilon after eta = 1e3 ascent in 100/100 cases (" +
                                         std::to_string(clamped) + " entries held at the floor)");
  v.require(rejected == 100, std::to_string(rejected) + "/100 sub-epsilon targets rejected");
  return v;
}

// --- 3 ---------------------------------------------------------------------

Verdict csa_ascent() {
  Verdict v;
  const auto t0 = Clock::now();
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) wins += csa_ascent_trial(Rng::derive(seed, {3003})) ? 1 : 0;

  auto fx = csa_fixture(77, 4, 3);
  for (auto& h : fx.heads) h = h.frozen();
  std::vector<Head<double>> heads(fx.heads);
  heads.push_back(fx.model->head());
  CsaConfig cfg;
  (void)csa_augment<double>(fx.feature, fx.labels, fx.rest(), heads, cfg);
  bool untouched = true;
  for (const auto& h : fx.heads) untouched = untouched && !h.weight.has_grad() && !h.bias.has_grad();
  for (const auto& p : fx.model->parameters()) untouched = untouched && !p.has_grad();
  const double t = seconds_since(t0);

  v.require(wins >= 90, std::to_string(wins) + "/100 trials with CE(f-hat) >= CE(f) (>= 90)");
  v.require(untouched, "frozen heads and backbone parameters received no gradient");
  v.require(t < 60.0, fmt("runtime %.1f s < 60 s", t));
  return v;
}

// --- 4 ---------------------------------------------------------------------

Verdict loss_oracles() {
  Verdict v;
  double supcon_err = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(Rng::derive(seed, {4004}));
    const auto n = 2 + rng.index(7);
    const auto z = random_tensor(rng, {static_cast<Index>(n), 1 + static_cast<Index>(rng.index(6))});
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng.index(3));
    const double tau = rng.uniform(0.05, 1.0);
    const double got = supcon_loss(z, std::span<const int>(labels), tau).loss.item();
    const double want = supcon_oracle(z, labels, tau);
    supcon_err = std::max(supcon_err, std::abs(got - want) / std::max(1.0, std::abs(want)));
  }

  float worst_excess = std::numeric_limits<float>::infinity(), matched = 0.0f;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(Rng::derive(seed, {4005}));
    const Index rows = 1 + static_cast<Index>(rng.index(5)), k = 2 + static_cast<Index>(rng.index(6));
    const std::vector<int> classes(static_cast<std::size_t>(rows));
    auto make = [&] {
      return ClassRelationTable<float>{classes, cast<float>(random_tensor(rng, {rows, k}, -5.0, 5.0)),
                                       RelationSource::Ensemble};
    };
    const auto ens = make(), cur = make(), aug = make();
    worst_excess = std::min(worst_excess, cdrm_loss(ens, cur, aug).item() - 2.0f * relation_entropy(ens));
    matched = std::max(matched, std::abs(cdrm_loss(ens, ens, ens, CdrmMode::KL).item()));
  }

  const std::vector<int> four{0, 0, 1, 1};
  const double ln3 = supcon_loss(Tensorf::ones({4, 3}), std::span<const int>(four), 0.07f).loss.item();
  const ClassRelationTable<float> uniform{{0}, Tensorf::zeros({1, 2}), RelationSource::Ensemble};
  const double ln2 = cdrm_loss(uniform, uniform, uniform).item();

  v.require(supcon_err <= 1e-5, "supcon vs triple-loop oracle, 100 batches <= 8: max rel err " + fmt("%.2e", supcon_err));
  v.require(worst_excess >= -1e-7f, "cdrm excess over 2*sum H, 200 tables: min " + fmt("%.2e", worst_excess));
  v.require(matched <= 1e-6f, "cdrm excess at matched tables: max " + fmt("%.2e", matched));
  v.require(std::abs(ln3 - 4.0 * std::log(3.0)) <= 1e-5, fmt("identical embeddings: %.6f vs 4 ln 3 = %.6f", ln3, 4.0 * std::log(3.0)));
  v.require(std::abs(ln2 - 2.0 * std::log(2.0)) <= 1e-5, fmt("uniform relation row: %.6f vs 2 ln 2 = %.6f", ln2, 2.0 * std::log(2.0)));
  return v;
}

// --- 5 ---------------------------------------------------------------------

Verdict aggregation_algebra() {
  Verdict v;
  long double worst = 0, drift = 0, weight_err = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto updates = random_updates(Rng::derive(seed, {5005}), 2 + seed % 6, 64);
    const auto oracle = aggregate_oracle(updates);
    const auto merged = aggregate(updates).find("w")->values;
    for (std::size_t k = 0; k < merged.size(); ++k) {
      worst = std::max(worst, std::abs(merged[k] - oracle[k]) / std::max(1.0L, std::abs(oracle[k])));
    }
    Rng rng(seed);
    const auto perm = rng.permutation(updates.size());
    std::vector<ClientUpdate> shuffled;
    for (auto p : perm) shuffled.push_back(updates[p]);
    const auto again = aggregate(shuffled).find("w")->values;
    for (std::size_t k = 0; k < merged.size(); ++k) drift = std::max(drift, static_cast<long double>(std::abs(again[k] - merged[k])));
    for (auto& u : updates) std::fill(u.checkpoint.params[0].values.begin(), u.checkpoint.params[0].values.end(), 1.0f);
    const auto ones = aggregate(updates).find("w")->values;
    for (float x : ones) weight_err = std::max(weight_err, std::abs(static_cast<long double>(x) - 1.0L));
  }
  const std::vector<ClientUpdate> pair{vector_update(0, 1, {1, 2}), vector_update(1, 3, {3, 4})};
  const auto merged = aggregate(pair).find("w")->values;

  v.require(worst <= 1e-7L, "weighted average vs brute-force oracle, 100 cases: max rel err " + fmt("%.2e", double(worst)));
  v.require(drift <= 1e-7L, "permutation drift " + fmt("%.2e", double(drift)));
  v.require(weight_err <= 1e-9L, "weights sum to one: max deviation " + fmt("%.2e", double(weight_err)));
  v.require(merged == std::vector<float>{2.5f, 3.5f}, fmt("[1,2]/N=1 + [3,4]/N=3 -> [%g, %g]", merged[0], merged[1]));
  return v;
}

// --- 6 ---------------------------------------------------------------------

Verdict protocol_fidelity() {
  Verdict v;
  const auto domains = tiny_domains();
  const auto trace = trace_head_protocol(sources_of(domains, 1), tiny_round_config(4), 6);
  v.require(trace.violations == 0 && trace.checks == 4 * 3 * 3,
            std::to_string(trace.checks) + " consumed heads compared, " + std::to_string(trace.violations) + " differ");

  bool ckpt_ok = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto c = Model<float>::initialized(tiny_round_config().backbone, seed).to_checkpoint();
    const auto bytes = c.serialize();
    ckpt_ok = ckpt_ok && Checkpoint::deserialize(bytes) == c && Checkpoint::deserialize(bytes).serialize() == bytes;
  }
  v.require(ckpt_ok, "checkpoint round trips bitwise stable (10 models)");

  const fs::path root = fs::temp_directory_path() / ("mcsad-acceptance-" + std::to_string(::getpid()));
  fs::remove_all(root);
  auto cfg = parse_config("preset = tiny\nrounds = 3\nblock_channels = 3,4,6\nbatch_size = 8\nseeds = 1,2\n"
                          "deterministic = true\nmode = ablation-grid\ntargets = 2\n");
  std::ostringstream log;
  cfg.out_dir = (root / "a").string();
  (void)run_experiment(cfg, log);
  cfg.out_dir = (root / "b").string();
  (void)run_experiment(cfg, log);
  int compared = 0, differing = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (e.path().extension() != ".csv") continue;
    const auto other = root / "b" / fs::relative(e.path(), root / "a");
    std::ifstream x(e.path(), std::ios::binary), y(other, std::ios::binary);
    std::stringstream sx, sy;
    sx << x.rdbuf();
    sy << y.rdbuf();
    ++compared;
    if (!fs::exists(other) || sx.str() != sy.str()) ++differing;
  }
  fs::remove_all(root);
  v.require(compared >= 10 && differing == 0,
            "deterministic rerun: " + std::to_string(compared) + " CSV files compared, " + std::to_string(differing) + " differ");
  return v;
}

// --- 7, 8, 9 ---------------------------------------------------------------

/// Sweep-level statistics of one cell over targets × seeds.
struct SweepStats {
  std::vector<double> domain_mean;  // over seeds
  double avg = 0.0;                 // mean of domain means
  double avg_std = 0.0;             // std over seeds of the per-seed domain average
  double seconds = 0.0;
  bool ok = true;
};

class Benchmark {
 public:
  Benchmark(std::vector<std::uint64_t> seeds, std::ostream& csv) : seeds_(std::move(seeds)), csv_(csv) {
    cfg_ = ExperimentConfig::defaults();
    domains_ = load_domains(cfg_);
    for (const auto& d : domains_) names_.push_back(d.name);
  }

  const std::vector<std::string>& names() const { return names_; }

  /// Runs (or reuses) a named cell of a harness mode over every target and seed.
  const SweepStats& sweep(const std::string& mode, const std::string& label) {
    const std::string key = mode + "/" + label;
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    CellSpec spec;
    bool found = false;
    for (auto& c : mode_cells(mode, cfg_.round)) {
      if (c.label == label) {
        spec = c;
        found = true;
      }
    }
    if (!found) throw ContractError("no cell " + key);

    SweepStats s;
    std::vector<CellResult> cells;
    const auto t0 = Clock::now();
    for (std::size_t t = 0; t < domains_.size(); ++t) {
      for (auto seed : seeds_) {
        auto run = run_cell(domains_, spec, mode, static_cast<int>(t), seed);
        run.result.cell = key;
        s.ok = s.ok && run.result.ok;
        std::cout << "    " << key << " target=" << run.result.target_name << " seed=" << seed << ": "
                  << (run.result.ok ? format_percent(run.result.accuracy) : "error: " + run.result.error) << " ("
                  << fmt("%.1f", run.result.seconds) << " s)" << std::endl;
        cells.push_back(run.result);
      }
    }
    s.seconds = seconds_since(t0);
    write_cells_csv(csv_, cells, true);
    const auto rows = summarize(cells, names_);
    if (rows.size() == 1) {
      s.domain_mean = rows[0].domain_mean;
      s.avg = rows[0].avg_mean;
      s.avg_std = rows[0].avg_std;
    } else {
      s.ok = false;
    }
    return cache_.emplace(key, s).first->second;
  }

 private:
  ExperimentConfig cfg_;
  std::vector<DomainDataset> domains_;
  std::vector<std::string> names_;
  std::vector<std::uint64_t> seeds_;
  std::ostream& csv_;
  std::map<std::string, SweepStats> cache_;
};

std::string pct(double x) { return format_percent(x); }

Verdict desk_benchmark(Benchmark& bench) {
  Verdict v;
  const auto& fedavg = bench.sweep("fedavg", "fedavg");
  const auto& mcsad = bench.sweep("mcsad", "mcsad");
  v.require(fedavg.ok && mcsad.ok, "all federations completed");
  const double gain = (mcsad.avg - fedavg.avg) * 100.0;
  v.require(gain >= 2.0, "sweep average: mcsad " + pct(mcsad.avg) + " vs fedavg " + pct(fedavg.avg) + " (" +
                             fmt("%+.1f", gain) + " pts, need >= +2.0)");
  for (std::size_t d = 0; d < bench.names().size() && d < mcsad.domain_mean.size(); ++d) {
    const double delta = (mcsad.domain_mean[d] - fedavg.domain_mean[d]) * 100.0;
    v.require(delta >= -1.0, bench.names()[d] + ": mcsad " + pct(mcsad.domain_mean[d]) + " vs fedavg " +
                                 pct(fedavg.domain_mean[d]) + " (" + fmt("%+.1f", delta) + " pts, need >= -1.0)");
  }
  const double total = fedavg.seconds + mcsad.seconds;
  v.require(total <= 900.0, fmt("runtime %.0f s <= 900 s", total));
  return v;
}

Verdict ablation_monotonicity(Benchmark& bench) {
  Verdict v;
  // The baseline cell is FedAvg and the full cell is the mcsad cell, so both
  // sweeps are shared with the desk benchmark.
  const auto& baseline = bench.sweep("fedavg", "fedavg");
  const auto& csa = bench.sweep("ablation-grid", "csa");
  const auto& full = bench.sweep("mcsad", "mcsad");
  v.require(baseline.ok && csa.ok && full.ok, "all federations completed");
  auto step = [&](const char* a, const SweepStats& x, const char* b, const SweepStats& y) {
    const double gap = y.avg - x.avg;
    const double sd = std::max(x.avg_std, y.avg_std);
    v.require(gap >= -sd, std::string(a) + " " + pct(x.avg) + " ± " + pct(x.avg_std) + " <= " + b + " " + pct(y.avg) +
                              " ± " + pct(y.avg_std) + " (gap " + fmt("%+.1f", gap * 100.0) + " pts, tolerance " +
                              fmt("%.1f", sd * 100.0) + ")");
  };
  step("baseline", baseline, "csa-only", csa);
  step("csa-only", csa, "full", full);
  return v;
}

Verdict split_sanity(Benchmark& bench) {
  Verdict v;
  // CSA-only at splits {1,2} is the ablation "csa" cell.
  const auto& early = bench.sweep("ablation-grid", "csa");
  const auto& late = bench.sweep("split-grid", "split-3");
  v.require(early.ok && late.ok, "all federations completed");
  v.require(early.avg >= late.avg, "csa at splits {1,2} " + pct(early.avg) + " >= csa at split {3} " + pct(late.avg));
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks, one PASS/FAIL line per criterion"};
  std::vector<int> selected{1, 2, 3, 4, 5, 6, 7, 8, 9};
  int num_seeds = 3;
  std::string csv_path;
  app.add_option("--criteria", selected, "criteria to run")->delimiter(',')->check(CLI::Range(1, 9));
  app.add_option("--seeds", num_seeds, "seeds for the benchmark criteria")->check(CLI::PositiveNumber);
  app.add_option("--csv", csv_path, "write every benchmark cell result here");
  CLI11_PARSE(app, argc, argv);

  std::ofstream csv_file;
  std::ostringstream csv_sink;
  std::ostream* csv = &csv_sink;
  if (!csv_path.empty()) {
    csv_file.open(csv_path);
    csv = &csv_file;
  }
  std::vector<std::uint64_t> seeds;
  for (int s = 1; s <= num_seeds; ++s) seeds.push_back(static_cast<std::uint64_t>(s));
  std::unique_ptr<Benchmark> bench;
  auto benchmark = [&]() -> Benchmark& {
    if (!bench) bench = std::make_unique<Benchmark>(seeds, *csv);
    return *bench;
  };

  const std::map<int, std::pair<std::string, std::function<Verdict()>>> criteria{
      {1, {"autodiff soundness", autodiff_soundness}},
      {2, {"style algebra", style_algebra}},
      {3, {"CSA ascent property", csa_ascent}},
      {4, {"loss oracles", loss_oracles}},
      {5, {"aggregation algebra", aggregation_algebra}},
      {6, {"protocol fidelity", protocol_fidelity}},
      {7, {"desk-scale benchmark", [&] { return desk_benchmark(benchmark()); }}},
      {8, {"ablation monotonicity", [&] { return ablation_monotonicity(benchmark()); }}},
      {9, {"split-grid sanity", [&] { return split_sanity(benchmark()); }}},
  };

  std::set<int> wanted(selected.begin(), selected.end());
  int failures = 0;
  for (const auto& [id, entry] : criteria) {
    if (!wanted.count(id)) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = entry.second();
    } catch (const std::exception& e) {
      v.require(false, std::string("threw: ") + e.what());
    }
    failures += v.pass ? 0 : 1;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << entry.first
              << fmt(" (%.1f s)", seconds_since(t0)) << std::endl;
    for (const auto& d : v.details) std::cout << "    " << d << "\n";
    std::cout.flush();
  }
  return failures == 0 ? 0 : 1;
}
