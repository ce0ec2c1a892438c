// lirr: generate the synthetic benchmark, train, evaluate and tabulate runs.
//
//   lirr gen    [--config BENCH.json] [--seed N] [--out DIR]
//   lirr train  [--config EXP.json] [--seed N] [--deterministic] [--out DIR]
//   lirr eval   --config EXP_OR_REPORT.json [--out DIR] [--checkpoint FILE | --detections FILE]
//   lirr report [--out DIR] RUN...

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "lirr/coco_eval.hpp"
#include "lirr/pipeline.hpp"
#include "lirr/synthgen.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string out;
};

void add_common(CLI::App* app, CommonFlags& f, const std::string& out_default, bool with_seed = true) {
  app->add_option("--config", f.config, "JSON configuration file");
  if (with_seed) app->add_option("--seed", f.seed, "seed, overrides the config");
  app->add_flag("--deterministic", f.deterministic, "single-threaded, reproducible execution");
  f.out = out_default;
  app->add_option("--out", f.out, "output directory")->capture_default_str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

int cmd_gen(const CommonFlags& f) {
  nlohmann::json j = lirr::BenchmarkConfig::desk_default();
  if (!f.config.empty()) j.merge_patch(lirr::read_json_file(f.config));
  auto cfg = j.get<lirr::BenchmarkConfig>();
  if (f.seed) cfg.scene.seed = *f.seed;
  const unsigned threads = f.deterministic ? 1u : std::max(1u, std::thread::hardware_concurrency());
  const auto bm = lirr::make_benchmark(cfg, threads);
  const nlohmann::json echo = cfg;
  fs::create_directories(f.out);
  const fs::path out(f.out);
  lirr::save_dataset((out / "source_train.bin").string(), bm.source_train, echo);
  lirr::save_dataset((out / "target_train.bin").string(), bm.target_train, echo);
  lirr::save_dataset((out / "target_train_small.bin").string(), bm.target_train_small, echo);
  lirr::save_dataset((out / "target_test.bin").string(), bm.target_test, echo);
  write_text(out / "benchmark.json", echo.dump(2) + "\n");
  std::cout << "source_train " << bm.source_train.size() << ", target_train " << bm.target_train.size()
            << ", target_train_small " << bm.target_train_small.size() << ", target_test " << bm.target_test.size()
            << " -> " << f.out << '\n';
  return 0;
}

lirr::ExperimentConfig experiment_config(const CommonFlags& f) {
  lirr::ExperimentConfig cfg;
  if (!f.config.empty()) cfg = lirr::load_experiment_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.deterministic) cfg.deterministic = true;
  cfg.validate();
  return cfg;
}

int cmd_train(const CommonFlags& f) {
  const auto cfg = experiment_config(f);
  lirr::RunOptions opt;
  opt.out_dir = f.out;
  opt.quiet = false;
  const auto report = lirr::run_experiment(cfg, opt);
  std::cout << lirr::format_table({lirr::table_row(report)});
  return 0;
}

int cmd_eval(const CommonFlags& f, const std::string& checkpoint, const std::string& detections) {
  if (f.config.empty()) throw lirr::ConfigError("eval needs --config");
  const auto cfg = experiment_config(f);
  const auto test = lirr::load_dataset(cfg.target_test);
  const fs::path out(f.out);
  fs::create_directories(out);
  lirr::APReport rep;
  if (!detections.empty()) {
    rep = lirr::evaluate(lirr::eval_input(test, lirr::read_detections(detections)));
  } else {
    const std::string ckpt = checkpoint.empty() ? (out / "checkpoint.bin").string() : checkpoint;
    lirr::ImageDetections dets;
    rep = lirr::evaluate_checkpoint(cfg, ckpt, test, &dets);
    lirr::write_detections((out / "eval_detections.jsonl").string(), dets);
  }
  write_text(out / "eval_report.json", nlohmann::json(rep).dump(2) + "\n");
  std::cout << lirr::format_report(rep);
  return 0;
}

int cmd_report(const CommonFlags& f, const std::vector<std::string>& runs) {
  std::vector<lirr::TableRow> rows;
  for (const auto& r : runs) {
    fs::path p(r);
    if (fs::is_directory(p)) p /= "run_report.json";
    rows.push_back(lirr::table_row(lirr::read_json_file(p.string()).get<lirr::RunReport>()));
  }
  lirr::sort_rows(rows);
  fs::create_directories(f.out);
  const auto table = lirr::format_table(rows);
  write_text(fs::path(f.out) / "table.txt", table);
  write_text(fs::path(f.out) / "table.csv", lirr::format_csv(rows));
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Supervised domain adaptation for object detection with invariant representations and risks"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_version_flag("--version", std::string(LIRR_VERSION) + " (" + LIRR_GIT_REVISION + ")");

  CommonFlags gen_f, train_f, eval_f, report_f;
  auto* gen = app.add_subcommand("gen", "render the synthetic source/target benchmark");
  add_common(gen, gen_f, "data");
  auto* train = app.add_subcommand("train", "train one run (source_only, oracle or sda)");
  add_common(train, train_f, "run");
  auto* eval = app.add_subcommand("eval", "re-evaluate a checkpoint or a detection dump on the target test split");
  add_common(eval, eval_f, "run");
  std::string checkpoint, detections;
  auto* ckpt_opt = eval->add_option("--checkpoint", checkpoint, "checkpoint file (default: OUT/checkpoint.bin)");
  eval->add_option("--detections", detections, "detection dump (JSON lines) to score instead")->excludes(ckpt_opt);
  auto* report = app.add_subcommand("report", "tabulate run reports as Method/Ims/AP/AP50/AP75");
  add_common(report, report_f, "report", false);
  std::vector<std::string> runs;
  report->add_option("runs", runs, "run directories or run_report.json files")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen(gen_f);
    if (*train) return cmd_train(train_f);
    if (*eval) return cmd_eval(eval_f, checkpoint, detections);
    if (*report) return cmd_report(report_f, runs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
