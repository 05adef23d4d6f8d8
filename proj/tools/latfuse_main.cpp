// Command-line frontend: synthetic or KITTI-frame pipeline runs, the
// ecmi-vs-qkv scaling benchmark, and the self-test suite.
//
// Exit codes: 0 success, 1 contract or parse error, 2 self-check failure.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "latfuse/latfuse.hpp"

namespace fs = std::filesystem;
using namespace latfuse;

namespace {

Toggles parse_toggles(const std::string& spec) {
  Toggles t;
  t.saf = t.sam = t.lfm = false;
  if (spec == "none") return t;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "saf")
      t.saf = true;
    else if (item == "sam")
      t.sam = true;
    else if (item == "lfm")
      t.lfm = true;
    else if (!item.empty())
      throw ContractError("unknown toggle '" + item + "' (expected saf, sam, lfm, or none)");
  }
  return t;
}

std::vector<std::size_t> parse_sizes(const std::string& spec) {
  std::vector<std::size_t> sizes;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(item, &pos);
    if (pos != item.size() || v == 0) throw ContractError("bad size '" + item + "'");
    sizes.push_back(static_cast<std::size_t>(v));
  }
  if (sizes.empty()) throw ContractError("no benchmark sizes given");
  return sizes;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out.good()) throw ParseError("cannot open '" + path + "' for writing");
  out << text;
  if (!out.good()) throw ParseError("write to '" + path + "' failed");
}

nlohmann::ordered_json config_json(const PipelineConfig& cfg) {
  nlohmann::ordered_json j;
  j["channels"] = cfg.channels;
  j["level_strides"] = cfg.level_strides;
  j["latent_n"] = cfg.latent_n;
  j["voxel_size"] = cfg.voxel.voxel_size;
  j["range_min"] = cfg.voxel.range_min;
  j["range_max"] = cfg.voxel.range_max;
  j["image_h"] = cfg.image_h;
  j["image_w"] = cfg.image_w;
  return j;
}

struct RunOptions {
  bool synthetic = false;
  std::uint64_t seed = 0;
  int objects = 5;
  std::string frame_dir;
  std::string toggles_spec = "saf,sam,lfm";
  std::string out_path;
  bool timings = false;
  std::uint64_t params_seed = 1;
};

int cmd_run(const RunOptions& opt) {
  if (opt.synthetic == !opt.frame_dir.empty())
    throw ContractError("run: choose exactly one of --synthetic or --frame-dir");
  const Toggles toggles = parse_toggles(opt.toggles_spec);
  PipelineConfig cfg;
  Rng prng(opt.params_seed);
  PipelineParamsT<Tensord> params = init_pipeline_params<double>(prng, cfg);

  nlohmann::ordered_json report;
  report["command"] = "run";
  report["toggles"] = toggles_json(toggles);
  report["params_seed"] = opt.params_seed;
  report["config"] = config_json(cfg);
  report["frames"] = nlohmann::ordered_json::array();

  std::vector<Frame<double>> frames;
  if (opt.synthetic) {
    report["source"] = {{"type", "synthetic"},
                        {"seed", opt.seed},
                        {"objects", opt.objects}};
    frames.push_back(
        generate_synthetic_scene<double>(opt.seed, static_cast<std::size_t>(opt.objects), cfg));
  } else {
    report["source"] = {{"type", "frame-dir"}, {"path", opt.frame_dir}};
    std::vector<fs::path> bins;
    for (const auto& entry : fs::directory_iterator(opt.frame_dir))
      if (entry.is_regular_file() && entry.path().extension() == ".bin")
        bins.push_back(entry.path());
    std::sort(bins.begin(), bins.end());
    if (bins.empty()) throw ParseError("run: no .bin clouds in '" + opt.frame_dir + "'");
    for (const auto& bin : bins) {
      fs::path calib = bin;
      calib.replace_extension(".txt");
      if (!fs::exists(calib))
        throw ParseError("run: missing calibration '" + calib.string() + "'");
      frames.push_back(load_kitti_frame<double>(bin.string(), calib.string(), cfg));
    }
  }

  // Frames are independent; process them on a worker pool. Each frame's
  // pipeline stays single-threaded and results keep input order.
  std::vector<nlohmann::ordered_json> frame_reports(frames.size());
  std::vector<std::exception_ptr> errors(frames.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= frames.size()) return;
      try {
        PipelineOutput<double> out = run_pipeline(frames[i], params, toggles, cfg);
        nlohmann::ordered_json fj = pipeline_output_json(out, opt.timings);
        fj["name"] = frames[i].name;
        frame_reports[i] = std::move(fj);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_workers =
      std::min<std::size_t>(std::max(1u, std::thread::hardware_concurrency()), frames.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w + 1 < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (const auto& err : errors)
    if (err) std::rethrow_exception(err);

  for (auto& fj : frame_reports) report["frames"].push_back(std::move(fj));
  const std::string text = report.dump(2) + "\n";
  if (opt.out_path.empty())
    std::cout << text;
  else
    write_text(opt.out_path, text);
  for (const auto& fj : report["frames"])
    std::fprintf(stderr, "frame %s: stage-1 voxels %llu, valid fraction %.3f\n",
                 fj["name"].get<std::string>().c_str(),
                 static_cast<unsigned long long>(fj["stages"][0]["num_voxels"].get<std::uint64_t>()),
                 fj["stages"][0]["valid_fraction"].get<double>());
  return 0;
}

struct BenchOptions {
  std::string sizes_spec = "1024,2048,4096,8192,16384";
  std::size_t latent_n = 16;
  std::size_t channels = 64;
  int reps = 7;
  std::uint64_t seed = 42;
  std::string out_path;
  std::string format;  // "", "json", or "csv"
};

int cmd_bench(const BenchOptions& opt) {
  const std::vector<std::size_t> sizes = parse_sizes(opt.sizes_spec);
  std::fprintf(stderr, "benchmarking ecmi vs qkv: sizes %s, n=%zu, c=%zu, reps=%d\n",
               opt.sizes_spec.c_str(), opt.latent_n, opt.channels, opt.reps);
  BenchReport report = bench_ecmi_vs_qkv(sizes, opt.latent_n, opt.channels, opt.reps, opt.seed);
  for (std::size_t i = 0; i < report.sizes.size(); ++i)
    std::fprintf(stderr, "  N=%6zu  ecmi %.4f s  qkv %.4f s  (x%.1f)\n", report.sizes[i],
                 report.ecmi[i].median(), report.qkv[i].median(),
                 report.qkv[i].median() / report.ecmi[i].median());
  std::fprintf(stderr,
               "slopes: ecmi %.3f [%.3f, %.3f]  qkv %.3f [%.3f, %.3f]  speedup at N=%zu: %.1fx\n",
               report.ecmi_slope.slope, report.ecmi_slope.ci_lo, report.ecmi_slope.ci_hi,
               report.qkv_slope.slope, report.qkv_slope.ci_lo, report.qkv_slope.ci_hi,
               report.sizes.back(), report.speedup_at_max);

  ReportFormat format = ReportFormat::json;
  if (opt.format == "csv" || (opt.format.empty() && opt.out_path.ends_with(".csv")))
    format = ReportFormat::csv;
  else if (!opt.format.empty() && opt.format != "json")
    throw ContractError("bench: format must be json or csv");
  if (opt.out_path.empty()) {
    std::cout << (format == ReportFormat::json ? bench_report_json(report).dump(2) + "\n"
                                               : bench_report_csv(report));
  } else {
    emit_report(report, format, opt.out_path);
  }
  return 0;
}

int cmd_selftest() {
  const std::vector<CheckResult> checks = run_selfchecks();
  bool all_ok = true;
  for (const auto& c : checks) {
    std::printf("[%s] %s — %s\n", c.passed ? "PASS" : "FAIL", c.name.c_str(), c.detail.c_str());
    all_ok = all_ok && c.passed;
  }
  std::printf("%zu checks, %s\n", checks.size(), all_ok ? "all passed" : "FAILURES present");
  return all_ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-stage LiDAR-camera feature fusion with latent cross-modal attention"};
  app.require_subcommand(1);

  RunOptions run_opt;
  CLI::App* run = app.add_subcommand("run", "Run the fusion pipeline and emit a JSON report");
  run->add_flag("--synthetic", run_opt.synthetic, "Generate a synthetic frame");
  run->add_option("--seed", run_opt.seed, "Synthetic scene seed");
  run->add_option("--objects", run_opt.objects, "Synthetic object count")
      ->check(CLI::NonNegativeNumber);
  run->add_option("--frame-dir", run_opt.frame_dir,
                  "Directory of KITTI frames (NAME.bin + NAME.txt pairs)");
  run->add_option("--toggles", run_opt.toggles_spec,
                  "Enabled components, comma-separated subset of saf,sam,lfm (or 'none')");
  run->add_option("--out", run_opt.out_path, "Report path (stdout when omitted)");
  run->add_flag("--timings", run_opt.timings,
                "Embed wall-clock phase timings (breaks byte-for-byte report stability)");
  run->add_option("--params-seed", run_opt.params_seed, "Parameter initialization seed");

  BenchOptions bench_opt;
  CLI::App* bench =
      app.add_subcommand("bench", "Benchmark latent fusion against QKV cross attention");
  bench->add_option("--sizes", bench_opt.sizes_spec, "Ascending comma-separated row counts");
  bench->add_option("--latent-n", bench_opt.latent_n, "Latent nodes per modality");
  bench->add_option("--channels", bench_opt.channels, "Feature channels");
  bench->add_option("--reps", bench_opt.reps, "Repetitions per cell (>= 5)");
  bench->add_option("--seed", bench_opt.seed, "Input generation seed");
  bench->add_option("--out", bench_opt.out_path, "Report path (.json or .csv)");
  bench->add_option("--format", bench_opt.format, "Force report format: json or csv");

  CLI::App* selftest =
      app.add_subcommand("selftest", "Run oracle-equivalence and gradient suites");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(run_opt);
    if (bench->parsed()) return cmd_bench(bench_opt);
    if (selftest->parsed()) return cmd_selftest();
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
