#include "mcsad/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "mcsad/evaluate.hpp"

namespace mcsad {

namespace fs = std::filesystem;

std::vector<CellSpec> mode_cells(const std::string& mode, const RoundConfig& base) {
  auto make = [&](std::string label, Augmenter aug, bool supcon, bool cdrm) {
    CellSpec c{std::move(label), base};
    c.round.augmenter = aug;
    c.round.supcon = supcon;
    c.round.cdrm = cdrm;
    return c;
  };
  auto with_splits = [&](std::string label, std::vector<int> splits) {
    auto c = make(std::move(label), Augmenter::Csa, false, false);
    c.round.csa.split_ids = std::move(splits);
    return c;
  };

  if (mode == "fedavg") return {make("fedavg", Augmenter::None, false, false)};
  if (mode == "mcsad") return {make("mcsad", Augmenter::Csa, true, true)};
  if (mode == "ablation-grid") {
    return {make("baseline", Augmenter::None, false, false), make("csa", Augmenter::Csa, false, false),
            make("csa+supcon", Augmenter::Csa, true, false), make("csa+cdrm", Augmenter::Csa, false, true),
            make("full", Augmenter::Csa, true, true)};
  }
  if (mode == "split-grid") {
    return {make("none", Augmenter::None, false, false), with_splits("split-1", {1}), with_splits("split-2", {2}),
            with_splits("split-3", {3}), with_splits("split-1+2", {1, 2}), with_splits("split-1+2+3", {1, 2, 3})};
  }
  if (mode == "augmenter-grid") {
    return {make("none", Augmenter::None, false, false), make("dsu", Augmenter::Dsu, false, false),
            make("advstyle", Augmenter::AdvStyle, false, false), make("mixstyle", Augmenter::MixStyle, false, false),
            make("csa", Augmenter::Csa, false, false)};
  }
  throw ContractError("unknown mode '" + mode + "'");
}

std::vector<DomainDataset> load_domains(const ExperimentConfig& cfg) {
  if (!cfg.data_root.empty()) {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(cfg.data_root)) {
      if (e.is_directory()) dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
    std::vector<DomainDataset> out;
    for (const auto& d : dirs) out.push_back(ingest_folder(d, cfg.data_seed));
    if (out.size() < 2) throw ContractError("need at least two domain folders under " + cfg.data_root);
    return out;
  }
  auto preset = data_preset(cfg.preset);
  if (cfg.samples_per_domain > 0) preset.samples_per_domain = cfg.samples_per_domain;
  if (cfg.image_size > 0) preset.image_size = cfg.image_size;
  if (cfg.data_seed > 0) preset.seed = cfg.data_seed;
  return generate_preset(preset);
}

CellRun run_cell(std::span<const DomainDataset> domains, const CellSpec& cell, const std::string& mode, int target,
                 std::uint64_t seed) {
  CellRun run;
  auto& r = run.result;
  r.mode = mode;
  r.cell = cell.label;
  r.target = target;
  r.seed = seed;
  const auto start = std::chrono::steady_clock::now();
  try {
    const auto split = leave_one_out(domains, static_cast<std::size_t>(target));
    r.target_name = split.target->name;
    RoundConfig round = cell.round;
    round.backbone.image_size = split.target->image_size();
    round.backbone.num_classes = split.target->num_classes;
    round.backbone.embedding_dim = round.backbone.block_channels[2];
    run.federation = run_federation(split.sources, round, seed);
    r.accuracy = evaluate(run.federation->global, *split.target, split.target->all_indices());
    double val = 0.0;
    int n = 0;
    for (const auto& row : run.federation->log) {
      if (row.round == round.rounds) {
        val += row.source_val_acc;
        ++n;
      }
    }
    r.source_val_acc = n ? val / n : 0.0;
    r.ok = true;
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return run;
}

bool ExperimentReport::all_ok() const {
  return std::all_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.ok; });
}

double sample_std(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

namespace {

double mean_of(std::span<const double> v) {
  return v.empty() ? std::nan("") : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch == '\n' ? ' ' : ch;
  }
  return out + "\"";
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace

std::vector<SummaryRow> summarize(std::span<const CellResult> cells, std::span<const std::string> domain_names) {
  std::vector<std::string> order;
  for (const auto& c : cells) {
    if (std::find(order.begin(), order.end(), c.cell) == order.end()) order.push_back(c.cell);
  }
  std::vector<SummaryRow> rows;
  for (const auto& label : order) {
    SummaryRow row;
    row.cell = label;
    std::vector<std::uint64_t> seeds;
    std::vector<double> present_means;
    for (std::size_t d = 0; d < domain_names.size(); ++d) {
      std::vector<double> acc;
      for (const auto& c : cells) {
        if (c.ok && c.cell == label && c.target == static_cast<int>(d)) {
          acc.push_back(c.accuracy);
          if (std::find(seeds.begin(), seeds.end(), c.seed) == seeds.end()) seeds.push_back(c.seed);
        }
      }
      row.domain_mean.push_back(mean_of(acc));
      row.domain_std.push_back(acc.empty() ? std::nan("") : sample_std(acc));
      if (!acc.empty()) present_means.push_back(row.domain_mean.back());
    }
    row.avg_mean = mean_of(present_means);
    std::sort(seeds.begin(), seeds.end());
    row.seeds = static_cast<int>(seeds.size());

    // Per-seed domain averages over the domains that were run for this cell.
    std::vector<double> per_seed;
    for (auto s : seeds) {
      std::vector<double> acc;
      for (std::size_t d = 0; d < domain_names.size(); ++d) {
        if (std::isnan(row.domain_mean[d])) continue;
        for (const auto& c : cells) {
          if (c.ok && c.cell == label && c.seed == s && c.target == static_cast<int>(d)) acc.push_back(c.accuracy);
        }
      }
      if (!acc.empty()) per_seed.push_back(mean_of(acc));
    }
    row.avg_std = sample_std(per_seed);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_percent(double fraction) {
  if (std::isnan(fraction)) return "-";
  return fixed(fraction * 100.0, 1);
}

void emit_summary(std::span<const SummaryRow> rows, std::span<const std::string> domain_names, std::ostream& text,
                  std::ostream& csv) {
  csv << "cell";
  for (const auto& d : domain_names) csv << ',' << csv_escape(d) << "_mean," << csv_escape(d) << "_std";
  csv << ",avg_mean,avg_std,seeds\n";
  for (const auto& r : rows) {
    csv << csv_escape(r.cell);
    for (std::size_t d = 0; d < domain_names.size(); ++d) {
      csv << ',' << format_percent(r.domain_mean[d]) << ',' << format_percent(r.domain_std[d]);
    }
    csv << ',' << format_percent(r.avg_mean) << ',' << format_percent(r.avg_std) << ',' << r.seeds << '\n';
  }

  std::vector<std::string> header{"Cell"};
  for (const auto& d : domain_names) header.push_back(d);
  header.push_back("Avg");
  std::vector<std::vector<std::string>> table{header};
  for (const auto& r : rows) {
    std::vector<std::string> line{r.cell};
    for (std::size_t d = 0; d < domain_names.size(); ++d) {
      line.push_back(std::isnan(r.domain_mean[d]) ? "-"
                                                  : format_percent(r.domain_mean[d]) + " ± " +
                                                        format_percent(r.domain_std[d]));
    }
    line.push_back(format_percent(r.avg_mean) + " ± " + format_percent(r.avg_std));
    table.push_back(std::move(line));
  }
  // Width in code points; "±" is two bytes in UTF-8.
  auto width = [](const std::string& s) {
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char ch) { return (ch & 0xC0) != 0x80; }));
  };
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& line : table) {
    for (std::size_t i = 0; i < line.size(); ++i) widths[i] = std::max(widths[i], width(line[i]));
  }
  for (std::size_t li = 0; li < table.size(); ++li) {
    for (std::size_t i = 0; i < table[li].size(); ++i) {
      const auto& cell = table[li][i];
      const std::string pad(widths[i] - width(cell), ' ');
      text << (i ? "  " : "") << (i == 0 ? cell + pad : pad + cell);
    }
    text << '\n';
    if (li == 0) {
      std::size_t total = 0;
      for (auto w : widths) total += w;
      text << std::string(total + 2 * (widths.size() - 1), '-') << '\n';
    }
  }
}

void write_cells_csv(std::ostream& out, std::span<const CellResult> cells, bool with_timing) {
  out << "mode,cell,target,target_name,seed,accuracy,source_val_acc,status,error";
  if (with_timing) out << ",seconds";
  out << '\n';
  for (const auto& c : cells) {
    out << csv_escape(c.mode) << ',' << csv_escape(c.cell) << ',' << c.target << ',' << csv_escape(c.target_name)
        << ',' << c.seed << ',' << fixed(c.accuracy, 6) << ',' << fixed(c.source_val_acc, 6) << ','
        << (c.ok ? "ok" : "failed") << ',' << csv_escape(c.error);
    if (with_timing) out << ',' << fixed(c.seconds, 2);
    out << '\n';
  }
}

ExperimentReport run_experiment(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto domains = load_domains(cfg);
  ExperimentReport report;
  for (const auto& d : domains) report.domain_names.push_back(d.name);

  std::vector<int> targets = cfg.targets;
  if (targets.empty()) {
    targets.resize(domains.size());
    std::iota(targets.begin(), targets.end(), 0);
  }
  for (int t : targets) {
    if (t >= static_cast<int>(domains.size())) {
      throw ContractError("target index " + std::to_string(t) + " out of range for " +
                          std::to_string(domains.size()) + " domains");
    }
  }

  RoundConfig base = cfg.round;
  if (cfg.deterministic) base.parallel_clients = false;
  const auto cells = mode_cells(cfg.mode, base);

  struct Job {
    const CellSpec* cell;
    int target;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& c : cells) {
    for (int t : targets) {
      for (auto s : cfg.seeds) jobs.push_back({&c, t, s});
    }
  }

  const fs::path root(cfg.out_dir);
  fs::create_directories(root);
  write_text_file(root / "config.txt", serialize_config(cfg));

  report.cells.resize(jobs.size());
  std::mutex log_mutex;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const auto& job = jobs[i];
      auto run = run_cell(domains, *job.cell, cfg.mode, job.target, job.seed);
      if (run.result.ok) {
        const fs::path dir = root / job.cell->label / ("target-" + run.result.target_name) /
                             ("seed-" + std::to_string(job.seed));
        try {
          fs::create_directories(dir);
          std::ostringstream metrics;
          write_metrics_csv(metrics, run.federation->log);
          write_text_file(dir / "metrics.csv", metrics.str());
          const auto bytes = run.federation->global.to_checkpoint().serialize();
          write_text_file(dir / "global.ckpt", std::string(bytes.begin(), bytes.end()));
        } catch (const std::exception& e) {
          run.result.ok = false;
          run.result.error = e.what();
        }
      }
      {
        std::lock_guard lock(log_mutex);
        log << "[" << (i + 1) << "/" << jobs.size() << "] " << job.cell->label << " target=" << job.target
            << " seed=" << job.seed << ": "
            << (run.result.ok ? "acc " + format_percent(run.result.accuracy) : "FAILED " + run.result.error);
        if (!cfg.deterministic) log << " (" << fixed(run.result.seconds, 1) << " s)";
        log << std::endl;
      }
      report.cells[i] = std::move(run.result);
    }
  };
  const int threads = cfg.deterministic ? 1 : std::max(1, cfg.jobs);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::ostringstream cells_csv, summary_csv, summary_txt;
  write_cells_csv(cells_csv, report.cells, !cfg.deterministic);
  const auto rows = summarize(report.cells, report.domain_names);
  emit_summary(rows, report.domain_names, summary_txt, summary_csv);
  write_text_file(root / "cells.csv", cells_csv.str());
  write_text_file(root / "summary.csv", summary_csv.str());
  write_text_file(root / "summary.txt", summary_txt.str());
  log << summary_txt.str();
  return report;
}

}  // namespace mcsad
