#ifndef LIRR_PIPELINE_HPP
#define LIRR_PIPELINE_HPP

// Experiment runner for the three training regimes:
//   SourceOnly  L_i on labeled source images only
//   Oracle      L_i on the labeled target budget only
//   SDA         the full LIRR objective on source + target budget
// Every regime is evaluated with the invariant head on the target test split.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "lirr/coco_eval.hpp"
#include "lirr/detector.hpp"
#include "lirr/lirr.hpp"
#include "lirr/nn.hpp"
#include "lirr/synthgen.hpp"

#ifndef LIRR_VERSION
#define LIRR_VERSION "0.1.0"
#endif
#ifndef LIRR_GIT_REVISION
#define LIRR_GIT_REVISION "unknown"
#endif

namespace lirr {

enum class Mode { SourceOnly, Oracle, SDA };

NLOHMANN_JSON_SERIALIZE_ENUM(Mode, {{Mode::SourceOnly, "source_only"}, {Mode::Oracle, "oracle"}, {Mode::SDA, "sda"}})

inline const char* mode_label(Mode m) {
  switch (m) {
    case Mode::SourceOnly: return "SourceOnly";
    case Mode::Oracle: return "Oracle";
    case Mode::SDA: return "SDA";
  }
  return "?";
}

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  Mode mode = Mode::SDA;
  std::string source_train = "data/source_train.bin";
  std::string target_train = "data/target_train.bin";
  std::string target_test = "data/target_test.bin";
  std::size_t label_budget = 50;  // leading target_train samples used
  std::uint64_t seed = 42;
  std::size_t steps = 2000;
  std::size_t batch_size = 8;  // per domain
  std::size_t eval_every = 200;
  double lr = 0.01;
  double momentum = 0.9;
  double lambda_rep = 0.1;
  double lambda_risk = 1.0;
  double grl_lambda = 1.0;
  bool clamp_gap = true;
  bool deterministic = false;
  ModelSpec model;

  LirrConfig lirr() const { return {lambda_rep, lambda_risk, grl_lambda, clamp_gap}; }
  SgdConfig sgd() const { return {lr, momentum}; }

  void validate() const {
    if (steps == 0) throw ConfigError("config: steps must be positive");
    if (batch_size == 0) throw ConfigError("config: batch_size must be positive");
    if (eval_every == 0) throw ConfigError("config: eval_every must be positive");
    if (mode != Mode::SourceOnly && label_budget == 0) throw ConfigError("config: label_budget must be positive");
    try {
      lirr().validate();
      SgdMomentum<float> probe(sgd());
      model.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"mode", c.mode},
       {"source_train", c.source_train},
       {"target_train", c.target_train},
       {"target_test", c.target_test},
       {"label_budget", c.label_budget},
       {"seed", c.seed},
       {"steps", c.steps},
       {"batch_size", c.batch_size},
       {"eval_every", c.eval_every},
       {"lr", c.lr},
       {"momentum", c.momentum},
       {"lambda_rep", c.lambda_rep},
       {"lambda_risk", c.lambda_risk},
       {"grl_lambda", c.grl_lambda},
       {"clamp_gap", c.clamp_gap},
       {"deterministic", c.deterministic},
       {"model", c.model}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const nlohmann::json known = ExperimentConfig{};
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw ConfigError("config: unknown key '" + k + "'");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("mode", c.mode);
    if (j.contains("mode") && !j.at("mode").is_string()) throw ConfigError("config: mode must be a string");
    if (j.contains("mode") && c.mode == Mode::SourceOnly && j.at("mode") != "source_only")
      throw ConfigError("config: unknown mode " + j.at("mode").dump());
    get("source_train", c.source_train);
    get("target_train", c.target_train);
    get("target_test", c.target_test);
    get("label_budget", c.label_budget);
    get("seed", c.seed);
    get("steps", c.steps);
    get("batch_size", c.batch_size);
    get("eval_every", c.eval_every);
    get("lr", c.lr);
    get("momentum", c.momentum);
    get("lambda_rep", c.lambda_rep);
    get("lambda_risk", c.lambda_risk);
    get("grl_lambda", c.grl_lambda);
    get("clamp_gap", c.clamp_gap);
    get("deterministic", c.deterministic);
    get("model", c.model);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// Accepts a bare config or a run report (its "config" member).
inline ExperimentConfig load_experiment_config(const std::string& path) {
  auto j = read_json_file(path);
  if (j.is_object() && j.contains("config") && j.contains("final")) j = j.at("config");
  ExperimentConfig c = j.get<ExperimentConfig>();
  c.validate();
  return c;
}

// Endless epoch-shuffled index stream over one dataset.
class BatchStream {
 public:
  BatchStream(std::size_t size, std::uint64_t seed, std::uint64_t tag) : order_(size) {
    if (size == 0) throw std::invalid_argument("BatchStream: empty dataset");
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(tag)};
    rng_.seed(seq);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
  }

  std::vector<std::size_t> next(std::size_t n) {
    std::vector<std::size_t> out;
    out.reserve(n);
    while (out.size() < n) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    consumed_ += n;
    return out;
  }

  std::size_t consumed() const { return consumed_; }

 private:
  void reshuffle() {
    // Fisher-Yates with explicit draws, identical across standard libraries.
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_() % i]);
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  std::size_t pos_ = 0, consumed_ = 0;
  std::mt19937_64 rng_;
};

inline constexpr std::uint64_t kSourceStream = 1, kTargetStream = 2;

// Datasets a run may touch. The mode decides which members are filled.
struct ExperimentData {
  std::optional<Dataset> source;
  std::optional<Dataset> target;  // already cut to the label budget
  Dataset test;
};

inline bool uses_source(Mode m) { return m != Mode::Oracle; }
inline bool uses_target(Mode m) { return m != Mode::SourceOnly; }

// Selects what the mode may see from already-loaded splits.
inline ExperimentData select_data(const ExperimentConfig& cfg, const Dataset& source, const Dataset& target,
                                  const Dataset& test) {
  ExperimentData d;
  if (uses_source(cfg.mode)) d.source = source;
  if (uses_target(cfg.mode)) d.target = target.head(cfg.label_budget);
  d.test = test;
  return d;
}

inline ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  if (uses_source(cfg.mode)) d.source = load_dataset(cfg.source_train);
  if (uses_target(cfg.mode)) d.target = load_dataset(cfg.target_train).head(cfg.label_budget);
  d.test = load_dataset(cfg.target_test);
  return d;
}

struct EvalPoint {
  std::size_t step = 0;
  APReport report;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalPoint, step, report)

struct RunReport {
  nlohmann::json config;
  std::string version = LIRR_VERSION;
  std::string git_revision = LIRR_GIT_REVISION;
  std::size_t consumed_source = 0, consumed_target = 0;
  std::vector<EvalPoint> evals;
  APReport final_report;
  std::string losses_path, checkpoint_path, detections_path;
  double wall_clock_seconds = 0;
};

inline void to_json(nlohmann::json& j, const RunReport& r) {
  j = {{"config", r.config},
       {"version", r.version},
       {"git_revision", r.git_revision},
       {"consumed", {{"source", r.consumed_source}, {"target", r.consumed_target}}},
       {"evals", r.evals},
       {"final", r.final_report},
       {"outputs", {{"losses", r.losses_path}, {"checkpoint", r.checkpoint_path}, {"detections", r.detections_path}}},
       {"wall_clock_seconds", r.wall_clock_seconds}};
}

inline void from_json(const nlohmann::json& j, RunReport& r) {
  r.config = j.at("config");
  r.version = j.value("version", "");
  r.git_revision = j.value("git_revision", "");
  r.consumed_source = j.at("consumed").at("source");
  r.consumed_target = j.at("consumed").at("target");
  j.at("evals").get_to(r.evals);
  j.at("final").get_to(r.final_report);
  const auto& o = j.at("outputs");
  r.losses_path = o.value("losses", "");
  r.checkpoint_path = o.value("checkpoint", "");
  r.detections_path = o.value("detections", "");
  r.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
}

// Everything in a report that must be reproducible: all but timing and
// output locations.
inline nlohmann::json report_metrics(const RunReport& r) {
  return {{"config", r.config},
          {"consumed", {{"source", r.consumed_source}, {"target", r.consumed_target}}},
          {"evals", r.evals},
          {"final", r.final_report}};
}

using ImageDetections = std::vector<std::pair<std::int64_t, std::vector<Detection>>>;

template <std::floating_point T>
ImageDetections detect_dataset(const Detector<T>& det, const Dataset& d, std::size_t chunk = 50) {
  ImageDetections out;
  for (std::size_t begin = 0; begin < d.size(); begin += chunk) {
    const std::size_t end = std::min(d.size(), begin + chunk);
    std::vector<const Sample*> batch;
    for (std::size_t i = begin; i < end; ++i) batch.push_back(&d.samples[i]);
    auto dets = det.detect(images_tensor<T>(batch));
    for (std::size_t i = begin; i < end; ++i) out.emplace_back(d.samples[i].image_id, std::move(dets[i - begin]));
  }
  return out;
}

inline EvalInput eval_input(const Dataset& d, const ImageDetections& dets) {
  if (dets.size() != d.size()) throw std::invalid_argument("eval_input: detection list does not cover the dataset");
  EvalInput in;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& s = d.samples[i];
    if (dets[i].first != s.image_id) throw std::invalid_argument("eval_input: detection image ids out of order");
    in.push_back({s.image_id, s.boxes, s.classes, dets[i].second});
  }
  return in;
}

// Same, for detections read back from a dump (images without detections
// are allowed; ids unknown to the dataset are not).
inline EvalInput eval_input(const Dataset& d, const DetectionsById& dets) {
  std::set<std::int64_t> ids;
  for (const auto& s : d.samples) ids.insert(s.image_id);
  for (const auto& [id, v] : dets)
    if (!ids.contains(id)) throw std::invalid_argument("detections reference unknown image id " + std::to_string(id));
  EvalInput in;
  for (const auto& s : d.samples) {
    auto it = dets.find(s.image_id);
    in.push_back({s.image_id, s.boxes, s.classes, it == dets.end() ? std::vector<Detection>{} : it->second});
  }
  return in;
}

template <std::floating_point T>
APReport evaluate_detector(const Detector<T>& det, const Dataset& test, ImageDetections* dets_out = nullptr) {
  auto dets = detect_dataset(det, test);
  auto rep = evaluate(eval_input(test, dets));
  if (dets_out) *dets_out = std::move(dets);
  return rep;
}

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunOptions {
  std::string out_dir;  // empty: no files written
  bool quiet = true;
};

// Trains per cfg.mode on `data` and evaluates on data.test every eval_every
// steps and after the last step.
inline RunReport run_experiment(const ExperimentConfig& cfg, const ExperimentData& data, const RunOptions& opt = {}) {
  cfg.validate();
  if (uses_source(cfg.mode) && !data.source) throw ConfigError("run: mode needs the source training set");
  if (uses_target(cfg.mode) && !data.target) throw ConfigError("run: mode needs the target training set");
  const auto t0 = std::chrono::steady_clock::now();

  LirrModel<float> model(cfg.model, cfg.seed);
  const auto& det = model.detector();
  SgdMomentum<float> opt_sgd(cfg.sgd());

  auto match_all = [&](const std::optional<Dataset>& d) {
    std::vector<MatchResult> m;
    if (d)
      for (const auto& s : d->samples) {
        if (!s.labeled()) throw ConfigError("run: unlabeled sample " + std::to_string(s.image_id) + " in " + d->name);
        m.push_back(det.match(s));
      }
    return m;
  };
  const auto src_matches = match_all(data.source);
  const auto tgt_matches = match_all(data.target);

  std::optional<BatchStream> src_stream, tgt_stream;
  if (uses_source(cfg.mode)) src_stream.emplace(data.source->size(), cfg.seed, kSourceStream);
  if (uses_target(cfg.mode)) tgt_stream.emplace(data.target->size(), cfg.seed, kTargetStream);
  auto draw = [&](BatchStream& stream, const Dataset& d, const std::vector<MatchResult>& m) {
    DomainBatch b;
    for (std::size_t i : stream.next(cfg.batch_size)) {
      b.samples.push_back(&d.samples[i]);
      b.matches.push_back(&m[i]);
    }
    return b;
  };

  RunReport report;
  report.config = cfg;
  std::ofstream losses;
  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    report.losses_path = (std::filesystem::path(opt.out_dir) / "losses.jsonl").string();
    report.checkpoint_path = (std::filesystem::path(opt.out_dir) / "checkpoint.bin").string();
    report.detections_path = (std::filesystem::path(opt.out_dir) / "detections.jsonl").string();
    losses.open(report.losses_path);
    if (!losses) throw std::runtime_error("cannot write " + report.losses_path);
  }

  const LirrConfig lc = cfg.lirr();
  ImageDetections last_dets;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    LossBreakdown b;
    switch (cfg.mode) {
      case Mode::SourceOnly: b = supervised_step(model, draw(*src_stream, *data.source, src_matches), opt_sgd); break;
      case Mode::Oracle: b = supervised_step(model, draw(*tgt_stream, *data.target, tgt_matches), opt_sgd); break;
      case Mode::SDA: {
        const DomainBatch src = draw(*src_stream, *data.source, src_matches);
        const DomainBatch tgt = draw(*tgt_stream, *data.target, tgt_matches);
        b = train_step(model, src, tgt, opt_sgd, lc);
        break;
      }
    }
    if (!b.finite()) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << step << ": " << to_json_line(step, b).dump();
      throw NonFiniteLoss(msg.str());
    }
    if (losses.is_open()) losses << to_json_line(step, b).dump() << '\n';
    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      report.evals.push_back({step, evaluate_detector(det, data.test, &last_dets)});
      if (!opt.quiet) {
        const auto& r = report.evals.back().report;
        std::cerr << "[" << mode_label(cfg.mode) << "] step " << step << " AP " << std::fixed << std::setprecision(1)
                  << 100 * r.ap << " AP50 " << 100 * r.ap50 << " AP75 " << 100 * r.ap75 << '\n';
      }
    }
  }
  report.final_report = report.evals.back().report;
  report.consumed_source = src_stream ? src_stream->consumed() : 0;
  report.consumed_target = tgt_stream ? tgt_stream->consumed() : 0;

  if (!opt.out_dir.empty()) {
    save_checkpoint(report.checkpoint_path, model.params());
    write_detections(report.detections_path, last_dets);
  }
  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!opt.out_dir.empty()) {
    std::ofstream os(std::filesystem::path(opt.out_dir) / "run_report.json");
    os << nlohmann::json(report).dump(2) << '\n';
    if (!os) throw std::runtime_error("cannot write run report in " + opt.out_dir);
  }
  return report;
}

inline RunReport run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  cfg.validate();
  return run_experiment(cfg, load_experiment_data(cfg), opt);
}

// Rebuilds the model from a checkpoint and evaluates it on the test split.
inline APReport evaluate_checkpoint(const ExperimentConfig& cfg, const std::string& checkpoint, const Dataset& test,
                                    ImageDetections* dets_out = nullptr) {
  LirrModel<float> model(cfg.model, cfg.seed);
  load_checkpoint(checkpoint, model.params());
  return evaluate_detector(model.detector(), test, dets_out);
}

// ---------------------------------------------------------------- result tables

struct TableRow {
  std::string method;
  std::size_t ims = 0;  // labeled target images
  std::uint64_t seed = 0;
  double ap = 0, ap50 = 0, ap75 = 0;
};

inline TableRow table_row(const RunReport& r) {
  const auto cfg = r.config.get<ExperimentConfig>();
  return {mode_label(cfg.mode), uses_target(cfg.mode) ? cfg.label_budget : 0, cfg.seed, r.final_report.ap,
          r.final_report.ap50, r.final_report.ap75};
}

// Method order SourceOnly, Oracle, SDA; then budget, then seed.
inline void sort_rows(std::vector<TableRow>& rows) {
  auto rank = [](const std::string& m) { return m == "SourceOnly" ? 0 : m == "Oracle" ? 1 : 2; };
  std::stable_sort(rows.begin(), rows.end(), [&](const TableRow& a, const TableRow& b) {
    return std::tuple(rank(a.method), a.ims, a.seed) < std::tuple(rank(b.method), b.ims, b.seed);
  });
}

inline std::string format_table(const std::vector<TableRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "Method" << std::right << std::setw(6) << "Ims" << std::setw(8) << "AP"
     << std::setw(8) << "AP50" << std::setw(8) << "AP75" << '\n';
  os << std::fixed << std::setprecision(1);
  for (const auto& r : rows)
    os << std::left << std::setw(12) << r.method << std::right << std::setw(6) << r.ims << std::setw(8) << 100 * r.ap
       << std::setw(8) << 100 * r.ap50 << std::setw(8) << 100 * r.ap75 << '\n';
  return os.str();
}

inline std::string format_csv(const std::vector<TableRow>& rows) {
  std::ostringstream os;
  os << "Method,Ims,AP,AP50,AP75\n" << std::fixed << std::setprecision(4);
  for (const auto& r : rows) os << r.method << ',' << r.ims << ',' << 100 * r.ap << ',' << 100 * r.ap50 << ',' << 100 * r.ap75 << '\n';
  return os.str();
}

}  // namespace lirr

#endif  // LIRR_PIPELINE_HPP
