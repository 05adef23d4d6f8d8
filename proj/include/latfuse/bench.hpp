#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "latfuse/flops.hpp"
#include "latfuse/latent_fusion.hpp"

namespace latfuse {

struct BenchSeries {
  std::size_t n_rows = 0;
  std::vector<double> seconds;  // one entry per repetition

  double median() const {
    std::vector<double> s = seconds;
    std::sort(s.begin(), s.end());
    const std::size_t m = s.size();
    return m % 2 ? s[m / 2] : 0.5 * (s[m / 2 - 1] + s[m / 2]);
  }
  double mean() const {
    double acc = 0.0;
    for (double v : seconds) acc += v;
    return acc / static_cast<double>(seconds.size());
  }
  double min() const { return *std::min_element(seconds.begin(), seconds.end()); }
  double max() const { return *std::max_element(seconds.begin(), seconds.end()); }
};

/// Least-squares fit of log(time) against log(N) with a 95% confidence
/// interval on the slope.
struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double stderr_slope = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
};

inline SlopeFit fit_loglog_slope(const std::vector<std::size_t>& sizes,
                                 const std::vector<double>& medians) {
  if (sizes.size() != medians.size() || sizes.size() < 2)
    throw ContractError("slope fit: need at least two (size, time) points");
  const std::size_t m = sizes.size();
  std::vector<double> xs(m), ys(m);
  for (std::size_t i = 0; i < m; ++i) {
    xs[i] = std::log(static_cast<double>(sizes[i]));
    ys[i] = std::log(medians[i]);
  }
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(m);
  my /= static_cast<double>(m);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  SlopeFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  if (m > 2) {
    double sse = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double r = ys[i] - (fit.intercept + fit.slope * xs[i]);
      sse += r * r;
    }
    fit.stderr_slope = std::sqrt(sse / static_cast<double>(m - 2) / sxx);
    // Two-sided 97.5% t quantiles for 1..8 degrees of freedom.
    static constexpr double kT975[8] = {12.706, 4.303, 3.182, 2.776,
                                        2.571,  2.447, 2.365, 2.306};
    const std::size_t dof = m - 2;
    const double t = dof <= 8 ? kT975[dof - 1] : 1.96;
    fit.ci_lo = fit.slope - t * fit.stderr_slope;
    fit.ci_hi = fit.slope + t * fit.stderr_slope;
  } else {
    fit.ci_lo = fit.ci_hi = fit.slope;
  }
  return fit;
}

/// One wall-time comparison grid of the latent interaction against the
/// quadratic attention baseline, plus the fitted complexity slopes.
struct BenchReport {
  std::vector<std::size_t> sizes;
  std::size_t latent_n = 16;
  std::size_t channels = 64;
  int reps = 5;
  std::uint64_t seed = 0;
  std::vector<BenchSeries> ecmi;
  std::vector<BenchSeries> qkv;
  SlopeFit ecmi_slope;
  SlopeFit qkv_slope;
  double speedup_at_max = 0.0;
  std::string compiler;
  std::string build_type;
  std::string scalar_type = "float32";
  int threads = 1;
};

namespace detail {

template <typename S>
double time_once(const Tensor<S>& f, const Tensor<S>& v, const EcmiParamsT<Tensor<S>>& ep,
                 const EcmiConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  Tape<S> tape;
  EcmiParamsT<Var> pv = lift(tape, ep, false);
  auto [ft, vt] = ecmi(tape, tape.constant(f), tape.constant(v), pv, cfg);
  (void)ft;
  (void)vt;
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename S>
double time_once(const Tensor<S>& f, const Tensor<S>& v, const QkvParamsT<Tensor<S>>& qp) {
  const auto t0 = std::chrono::steady_clock::now();
  Tape<S> tape;
  QkvParamsT<Var> pv = lift(tape, qp, false);
  Var out = qkv_cross_attention(tape, tape.constant(f), tape.constant(v), pv);
  (void)out;
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Benchmarks the latent interaction against quadratic cross attention on
/// bit-identical single-precision inputs per size. Single-threaded; medians
/// over `reps` repetitions after one warmup each.
inline BenchReport bench_ecmi_vs_qkv(const std::vector<std::size_t>& sizes, std::size_t latent_n,
                                     std::size_t channels, int reps, std::uint64_t seed = 42) {
  if (reps < 5) throw ContractError("bench: at least 5 repetitions required");
  for (std::size_t i = 1; i < sizes.size(); ++i)
    if (sizes[i] <= sizes[i - 1]) throw ContractError("bench: sizes must be ascending");

  BenchReport report;
  report.sizes = sizes;
  report.latent_n = latent_n;
  report.channels = channels;
  report.reps = reps;
  report.seed = seed;
  report.compiler = __VERSION__;
#ifdef NDEBUG
  report.build_type = "release";
#else
  report.build_type = "debug";
#endif

  EcmiConfig cfg;
  cfg.channels = channels;
  cfg.latent_n = latent_n;
  for (std::size_t n_rows : sizes) {
    Rng rng(seed ^ (0x9e3779b9ull * n_rows));
    const Tensor<float> f = Tensor<float>::uniform({n_rows, channels}, rng, -1.0f, 1.0f);
    const Tensor<float> v = Tensor<float>::uniform({n_rows, channels}, rng, -1.0f, 1.0f);
    EcmiParamsT<Tensor<float>> ep = init_ecmi_params<float>(rng, cfg);
    QkvParamsT<Tensor<float>> qp = init_qkv_params<float>(rng, channels);

    detail::time_once(f, v, ep, cfg);  // warmup
    detail::time_once(f, v, qp);
    BenchSeries se{n_rows, {}}, sq{n_rows, {}};
    for (int r = 0; r < reps; ++r) {
      se.seconds.push_back(detail::time_once(f, v, ep, cfg));
      sq.seconds.push_back(detail::time_once(f, v, qp));
    }
    report.ecmi.push_back(std::move(se));
    report.qkv.push_back(std::move(sq));
  }

  std::vector<double> em, qm;
  for (const auto& s : report.ecmi) em.push_back(s.median());
  for (const auto& s : report.qkv) qm.push_back(s.median());
  report.ecmi_slope = fit_loglog_slope(report.sizes, em);
  report.qkv_slope = fit_loglog_slope(report.sizes, qm);
  report.speedup_at_max = qm.back() / em.back();
  return report;
}

/// FLOP count of one ecmi forward at the given size, via the instrumented
/// kernels. Exact and deterministic.
inline std::uint64_t count_ecmi_flops(std::size_t n_rows, std::size_t latent_n,
                                      std::size_t channels, std::uint64_t seed = 7) {
  Rng rng(seed);
  EcmiConfig cfg;
  cfg.channels = channels;
  cfg.latent_n = latent_n;
  EcmiParamsT<Tensor<float>> ep = init_ecmi_params<float>(rng, cfg);
  const Tensor<float> f = Tensor<float>::uniform({n_rows, channels}, rng, -1.0f, 1.0f);
  const Tensor<float> v = Tensor<float>::uniform({n_rows, channels}, rng, -1.0f, 1.0f);
  flops::CounterScope scope;
  Tape<float> tape;
  EcmiParamsT<Var> pv = lift(tape, ep, false);
  ecmi(tape, tape.constant(f), tape.constant(v), pv, cfg);
  return scope.count();
}

inline std::uint64_t count_qkv_flops(std::size_t n_rows, std::size_t channels,
                                     std::uint64_t seed = 7) {
  Rng rng(seed);
  QkvParamsT<Tensor<float>> qp = init_qkv_params<float>(rng, channels);
  const Tensor<float> f = Tensor<float>::uniform({n_rows, channels}, rng, -1.0f, 1.0f);
  const Tensor<float> v = Tensor<float>::uniform({n_rows, channels}, rng, -1.0f, 1.0f);
  flops::CounterScope scope;
  Tape<float> tape;
  QkvParamsT<Var> pv = lift(tape, qp, false);
  qkv_cross_attention(tape, tape.constant(f), tape.constant(v), pv);
  return scope.count();
}

// ---------------------------------------------------------------------------
// Report emission. JSON carries the full report; CSV carries the timing grid
// with a fixed documented header:
//   op,rows,latent_n,channels,reps,median_s,mean_s,min_s,max_s
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json bench_report_json(const BenchReport& r) {
  auto series = [](const std::vector<BenchSeries>& list) {
    nlohmann::ordered_json out = nlohmann::ordered_json::array();
    for (const auto& s : list) {
      out.push_back({{"rows", s.n_rows},
                     {"median_s", s.median()},
                     {"mean_s", s.mean()},
                     {"min_s", s.min()},
                     {"max_s", s.max()},
                     {"samples_s", s.seconds}});
    }
    return out;
  };
  auto slope = [](const SlopeFit& f) {
    return nlohmann::ordered_json{{"slope", f.slope},
                                  {"intercept", f.intercept},
                                  {"stderr", f.stderr_slope},
                                  {"ci95", {f.ci_lo, f.ci_hi}}};
  };
  nlohmann::ordered_json j;
  j["sizes"] = r.sizes;
  j["latent_n"] = r.latent_n;
  j["channels"] = r.channels;
  j["reps"] = r.reps;
  j["seed"] = r.seed;
  j["scalar_type"] = r.scalar_type;
  j["threads"] = r.threads;
  j["compiler"] = r.compiler;
  j["build_type"] = r.build_type;
  j["ecmi"] = series(r.ecmi);
  j["qkv"] = series(r.qkv);
  j["ecmi_slope"] = slope(r.ecmi_slope);
  j["qkv_slope"] = slope(r.qkv_slope);
  j["speedup_at_max"] = r.speedup_at_max;
  return j;
}

inline constexpr const char* kBenchCsvHeader =
    "op,rows,latent_n,channels,reps,median_s,mean_s,min_s,max_s";

inline std::string bench_report_csv(const BenchReport& r) {
  std::string out = std::string(kBenchCsvHeader) + "\n";
  auto emit = [&](const char* op, const std::vector<BenchSeries>& list) {
    for (const auto& s : list) {
      char line[256];
      std::snprintf(line, sizeof(line), "%s,%zu,%zu,%zu,%d,%.9e,%.9e,%.9e,%.9e\n", op, s.n_rows,
                    r.latent_n, r.channels, r.reps, s.median(), s.mean(), s.min(), s.max());
      out += line;
    }
  };
  emit("ecmi", r.ecmi);
  emit("qkv", r.qkv);
  return out;
}

enum class ReportFormat { json, csv };

inline void emit_report(const BenchReport& report, ReportFormat format,
                        const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out.good()) throw ParseError("report: cannot open '" + path + "' for writing");
  if (format == ReportFormat::json)
    out << bench_report_json(report).dump(2) << '\n';
  else
    out << bench_report_csv(report);
  if (!out.good()) throw ParseError("report: write to '" + path + "' failed");
}

}  // namespace latfuse
