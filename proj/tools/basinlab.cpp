// basinlab command-line front end.
//
// Exit codes: 0 ok, 2 schema or usage error, 3 divergence, 4 I/O or format
// error, 1 anything else.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "basinlab/report.hpp"

namespace fs = std::filesystem;
using namespace basinlab;

namespace {

void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty() || out_path == "-") {
    std::cout << text;
    return;
  }
  if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
  atomic_write(out_path, text);
  std::cerr << "wrote " << out_path << "\n";
}

std::vector<fs::path> to_paths(const std::vector<std::string>& in) { return {in.begin(), in.end()}; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"basinlab: ensembles, linear connectivity and predictive diversity"};
  app.require_subcommand(1);

  std::string manifest, out, format = "text", eval, kind, method = "pcd", metric = "q_joint";
  std::vector<std::uint64_t> seeds;
  std::size_t jobs = 1, max_outer_iters = kDefaultMaxOuterIters, samples = kDefaultJointSamples,
              lambda_points = kDefaultLambdaPoints, resolution = kDefaultPlaneResolution;
  double margin = kDefaultPlaneMargin;
  std::vector<std::string> inputs;
  std::string run_dir;

  auto* run = app.add_subcommand("run", "train every seed of a manifest and write metrics");
  run->add_option("--manifest", manifest, "experiment manifest (JSON)")->required();
  run->add_option("--seeds", seeds, "override the manifest seeds")->delimiter(',');
  run->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
  run->add_option("--out", out, "override the manifest output_dir");
  run->add_option("--eval", eval, "evaluation split")->check(CLI::IsMember({"test", "train"}));

  auto* table = app.add_subcommand("table", "aggregate metrics.json files into mean ± std per metric");
  table->add_option("inputs", inputs, "metrics.json files or directories to search")->required();
  table->add_option("--format", format, "output format")->check(CLI::IsMember({"csv", "text"}));
  table->add_option("--out", out, "output file (default stdout)");

  auto* plot = app.add_subcommand("plot", "render an SVG plot from metrics.json files");
  plot->add_option("--kind", kind, "interpolation, scatter, ablation or plane")->required();
  plot->add_option("inputs", inputs, "metrics.json/plane.json files or directories")->required();
  plot->add_option("--metric", metric, "y metric for ablation plots");
  plot->add_option("--out", out, "output SVG (default stdout)");

  auto* align = app.add_subcommand("align", "permutation-align the members of a run directory");
  align->add_option("dir", run_dir, "seed directory")->required();
  align->add_option("--method", method, "pcd or multi_pcd")->check(CLI::IsMember({"pcd", "multi_pcd"}));
  align->add_option("--max-outer-iters", max_outer_iters, "Multi-PCD outer iterations")->check(CLI::PositiveNumber);
  align->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);

  auto* connect = app.add_subcommand("connect", "pairwise and joint linear connectivity of a run directory");
  connect->add_option("dir", run_dir, "seed directory (or aligned-* subdirectory)")->required();
  connect->add_option("--samples", samples, "Dirichlet samples for q_joint")->check(CLI::PositiveNumber);
  connect->add_option("--lambda-points", lambda_points, "interpolation grid points")->check(CLI::Range(2, 100000));
  connect->add_option("--eval", eval, "evaluation split")->check(CLI::IsMember({"test", "train"}));
  connect->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);

  auto* plane = app.add_subcommand("plane", "loss plane through members 0, 1 and 2");
  plane->add_option("dir", run_dir, "seed directory (or aligned-* subdirectory)")->required();
  plane->add_option("--resolution", resolution, "grid points per axis")->check(CLI::Range(2, 1000));
  plane->add_option("--margin", margin, "fractional margin around the anchors")->check(CLI::NonNegativeNumber);
  plane->add_option("--eval", eval, "evaluation split")->check(CLI::IsMember({"test", "train"}));
  plane->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);

  auto* diversity = app.add_subcommand("diversity", "predictive variance and one-vs-rest JSD of a run directory");
  diversity->add_option("dir", run_dir, "seed directory (or aligned-* subdirectory)")->required();
  diversity->add_option("--eval", eval, "evaluation split")->check(CLI::IsMember({"test", "train"}));
  diversity->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::string split = eval.empty() ? "test" : eval;
  try {
    if (*run) {
      RunOverrides ov;
      if (!seeds.empty()) ov.seeds = seeds;
      ov.jobs = jobs;
      if (!out.empty()) ov.out = out;
      if (!eval.empty()) ov.eval = eval;
      const RunSummary s = cmd_run(load_manifest(manifest), ov, &std::cerr);
      std::cerr << "done: " << s.runs_trained << " runs trained, " << s.runs_cached << " reused\n";
      for (const auto& d : s.seed_dirs) std::cout << d.string() << "\n";
    } else if (*table) {
      emit(cmd_table(to_paths(inputs), format), out);
    } else if (*plot) {
      emit(cmd_plot(kind, to_paths(inputs), std::cerr, metric), out);
    } else if (*align) {
      std::cout << cmd_align(run_dir, method, max_outer_iters, jobs).dump(2) << "\n";
    } else if (*connect) {
      std::cout << cmd_connect(run_dir, samples, lambda_points, split, jobs).dump(2) << "\n";
    } else if (*plane) {
      const auto j = cmd_plane(run_dir, resolution, margin, split, jobs);
      std::cout << (fs::path(run_dir) / "plane.csv").string() << "\n";
      (void)j;
    } else if (*diversity) {
      std::cout << cmd_diversity(run_dir, split, jobs).dump(2) << "\n";
    }
  } catch (const SchemaError& e) {
    std::cerr << "schema error at " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 4;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
