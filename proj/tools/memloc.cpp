// memloc command-line driver. Exit codes: 0 success, 1 runtime error, 2 usage error.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "memloc/memloc.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::size_t> max_jobs;
  bool quiet = false;
  std::string technique;
  std::string csv;
  std::string svg;
  std::string title;
};

memloc::Experiment open_experiment(const Options& o) {
  auto cfg = memloc::load_config(o.config);
  memloc::apply_env_overrides(cfg);
  memloc::RunOptions ro;
  if (o.max_jobs) ro.max_jobs = *o.max_jobs;
  if (!o.quiet) ro.log = &std::cerr;
  return memloc::Experiment(std::move(cfg), ro);
}

void report(const memloc::Experiment& e, const memloc::CommandResult& r) {
  std::cout << r.command << ": " << r.ran << " run, " << r.skipped << " reused, " << r.artifacts.size()
            << " artifacts under " << e.root().string() << (r.interrupted ? " (stopped early; rerun to resume)" : "")
            << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-level memorisation localisation for small transformer classifiers"};
  app.require_subcommand(1);
  Options o;

  auto with_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", o.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--max-jobs", o.max_jobs, "Stop after this many new jobs; a rerun resumes");
    sub->add_flag("-q,--quiet", o.quiet, "Suppress progress on stderr");
    return sub;
  };

  auto* gen = with_config(app.add_subcommand("gen-data", "Export task data and noisy training sets as JSONL"));
  auto* train = with_config(app.add_subcommand("train", "Train theta_P/M1/M2/O checkpoints per task and seed"));
  auto* localise = with_config(app.add_subcommand("localise", "Run one localisation technique on trained checkpoints"));
  localise->add_option("technique", o.technique, "swap, retrain, gradients or probe")
      ->required()
      ->check(CLI::IsMember(memloc::technique_names()));
  auto* control = with_config(app.add_subcommand("control", "Control setup with known memorisation layers"));
  auto* events = with_config(app.add_subcommand("events", "Centroid and probe events plus correlations"));
  auto* genscore = with_config(app.add_subcommand("genscore", "Generalisation score per task"));
  auto* correlate = with_config(app.add_subcommand("correlate", "Spearman correlations across techniques and models"));
  auto* rep = with_config(app.add_subcommand("report", "Markdown report and heatmaps from existing results"));
  auto* heat = app.add_subcommand("heatmap", "Render a window-matrix CSV as SVG");
  heat->add_option("csv", o.csv, "Matrix CSV (w,y,value rows)")->required();
  heat->add_option("-o,--output", o.svg, "SVG output path")->required();
  heat->add_option("--title", o.title, "Figure title");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (heat->parsed()) {
      memloc::emit_heatmap(o.csv, o.svg, o.title);
      std::cout << "heatmap: " << o.svg << '\n';
      return 0;
    }
    auto e = open_experiment(o);
    memloc::CommandResult r;
    if (gen->parsed()) r = e.gen_data();
    else if (train->parsed()) r = e.train();
    else if (localise->parsed()) r = e.localise(o.technique);
    else if (control->parsed()) r = e.control();
    else if (events->parsed()) r = e.events();
    else if (genscore->parsed()) r = e.genscore();
    else if (correlate->parsed()) r = e.correlate();
    else if (rep->parsed()) r = e.report();
    report(e, r);
    return 0;
  } catch (const memloc::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
