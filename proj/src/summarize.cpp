#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>

#include "transmix/harness.hpp"

namespace transmix {

namespace fs = std::filesystem;
using nlohmann::json;

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return json::parse(in);
}

std::string fmt(double v, int prec = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::string sigma_label(double s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", s);
  return buf;
}

void print_table(std::ostream& os, const std::vector<std::string>& header,
                 const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> w(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    w[c] = header[c].size();
    for (const auto& r : rows) w[c] = std::max(w[c], r[c].size());
  }
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      os << (c ? "  " : "") << std::left << std::setw(static_cast<int>(w[c])) << cells[c];
    }
    os << "\n";
  };
  line(header);
  std::vector<std::string> rule;
  for (auto x : w) rule.emplace_back(x, '-');
  line(rule);
  for (const auto& r : rows) line(r);
}

}  // namespace

ExperimentSummary summarize_experiment(const std::string& dir) {
  const fs::path root(dir);
  const json cfg = read_json(root / "config.json");
  ExperimentSummary s;
  s.dir = dir;
  s.env = cfg.at("env").at("name").get<std::string>();
  s.mixer = cfg.at("mixer").get<std::string>();
  s.digest = cfg.at("digest").get<std::string>();
  s.base_digest = cfg.at("base_digest").get<std::string>();
  s.noise_sigma = cfg.at("noise").at("enabled").get<bool>() ? cfg.at("noise").at("sigma").get<double>() : 0.0;

  std::vector<fs::path> seed_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && entry.path().filename().string().rfind("seed_", 0) == 0) seed_dirs.push_back(entry.path());
  }
  std::sort(seed_dirs.begin(), seed_dirs.end());
  if (seed_dirs.empty()) throw std::runtime_error(dir + ": no seed_* run directories");

  std::vector<double> wins, returns;
  for (const auto& sd : seed_dirs) {
    const json run = read_json(sd / "run.json");
    const auto d = run.at("digest").get<std::string>();
    if (d != s.digest) {
      throw DigestMismatch(sd.string() + ": config digest " + d + " does not match " + s.digest + " of " + dir);
    }
    const auto rows = read_metrics((sd / "metrics.csv").string());
    if (rows.empty()) throw std::runtime_error(sd.string() + ": metrics file has no rows");
    SeedFinal f{run.at("seed").get<std::uint64_t>(), rows.back().test_win_rate, rows.back().test_return_mean};
    s.seeds.push_back(f);
    wins.push_back(f.win_rate);
    returns.push_back(f.return_mean);
  }
  s.median_win_rate = median(wins);
  s.median_return = median(returns);
  return s;
}

SummaryReport summarize(const std::vector<std::string>& dirs) {
  SummaryReport rep;
  for (const auto& d : dirs) rep.experiments.push_back(summarize_experiment(d));
  for (const auto& clean : rep.experiments) {
    if (clean.noise_sigma != 0.0) continue;
    for (const auto& noisy : rep.experiments) {
      if (noisy.noise_sigma == 0.0 || noisy.base_digest != clean.base_digest) continue;
      rep.paired.push_back(PairedSummary{clean.env, clean.mixer, noisy.noise_sigma, clean.median_win_rate,
                                         noisy.median_win_rate, clean.median_win_rate - noisy.median_win_rate});
    }
  }
  return rep;
}

void print_report(const SummaryReport& rep, std::ostream& os) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& e : rep.experiments) {
    rows.push_back({e.env, e.mixer, sigma_label(e.noise_sigma), std::to_string(e.seeds.size()), fmt(e.median_win_rate),
                    fmt(e.median_return), e.digest});
  }
  print_table(os, {"env", "mixer", "noise_sigma", "seeds", "median_win_rate", "median_return", "digest"}, rows);

  if (!rep.paired.empty()) {
    os << "\n";
    std::vector<std::vector<std::string>> prow;
    for (const auto& p : rep.paired) {
      prow.push_back({p.env, p.mixer, sigma_label(p.noise_sigma), fmt(p.clean_win_rate), fmt(p.noisy_win_rate),
                      fmt(p.drop)});
    }
    print_table(os, {"env", "mixer", "noise_sigma", "clean_win_rate", "noisy_win_rate", "drop"}, prow);
  }

  os << "\n# csv\n";
  os << "table,env,mixer,noise_sigma,seeds,median_win_rate,median_return,clean_win_rate,noisy_win_rate,drop\n";
  for (const auto& e : rep.experiments) {
    os << "summary," << e.env << "," << e.mixer << "," << sigma_label(e.noise_sigma) << "," << e.seeds.size() << ","
       << fmt(e.median_win_rate, 6) << "," << fmt(e.median_return, 6) << ",,,\n";
  }
  for (const auto& p : rep.paired) {
    os << "paired," << p.env << "," << p.mixer << "," << sigma_label(p.noise_sigma) << ",,,," << fmt(p.clean_win_rate, 6)
       << "," << fmt(p.noisy_win_rate, 6) << "," << fmt(p.drop, 6) << "\n";
  }
}

}  // namespace transmix
