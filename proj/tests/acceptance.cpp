// Acceptance gate: one PASS/FAIL line per criterion, exit status 0 only if
// all pass. `acceptance 1 4 6` runs a subset.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "grad_cases.hpp"
#include "lirr/pipeline.hpp"
#include "oracles.hpp"
#include "random_instances.hpp"

using namespace lirr;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

class Clock {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int prec = 3, bool sci = false) {
  std::ostringstream os;
  if (sci) os << std::scientific;
  else os << std::fixed;
  os << std::setprecision(prec) << v;
  return os.str();
}

// ---------------------------------------------------------------- 1

Verdict gradient_suite() {
  Clock clock;
  auto cases = gradcases::op_cases();
  cases.push_back(gradcases::composed_case());
  double worst = 0;
  std::string worst_case;
  std::size_t coords = 0;
  for (const auto& c : cases)
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      auto s = c.make(seed);
      std::mt19937_64 rng(seed);
      const auto r = oracle::gradcheck(s.f, s.inputs, rng, s.max_coords);
      coords += r.coords;
      const double err = r.coords ? r.max_rel_err : 1.0;
      if (err > worst) worst = err, worst_case = c.name;
    }
  const double t = clock.seconds();
  return {worst < 1e-6 && t < 60,
          std::to_string(cases.size()) + " cases x 20 seeds, " + std::to_string(coords) + " coordinates, max rel err " +
              fmt(worst, 2, true) + " (" + worst_case + "), " + fmt(t, 1) + " s"};
}

// ---------------------------------------------------------------- 2

// Backbone gradient of L_rep with and without the reversal layer.
std::vector<double> backbone_rep_grad(LirrModel<double>& model, const std::vector<const Sample*>& batch, std::size_t ns,
                                      double grl, bool reversal) {
  model.params().zero_grad();
  Tape<double> tape;
  const auto f = model.detector().backbone(tape, images_tensor<double>(batch));
  const auto pooled = global_avg_pool(tape, f.last);
  tape.backward(rep_loss(tape, slice_rows(tape, pooled, 0, ns), slice_rows(tape, pooled, ns, batch.size()), model.classifier(),
                         grl, reversal));
  std::vector<double> g;
  for (const auto& p : model.params().all())
    if (p.name.starts_with("backbone")) g.insert(g.end(), p.tensor.grad().begin(), p.tensor.grad().end());
  return g;
}

Verdict reversal_property() {
  const auto cfg = BenchmarkConfig::desk_default();
  const auto src = render_range(cfg.scene, cfg.source, Domain::Source, 0, 3, "s");
  const auto tgt = render_range(cfg.scene, cfg.target, Domain::Target, 0, 3, "t");
  std::vector<const Sample*> batch;
  for (const auto& s : src.samples) batch.push_back(&s);
  for (const auto& s : tgt.samples) batch.push_back(&s);
  double worst = 0, scale = 0;
  std::size_t pairs = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed)
    for (double grl : {1.0, 0.5, 0.1, 2.0}) {
      LirrModel<double> model(ModelSpec{}, seed);
      const auto plain = backbone_rep_grad(model, batch, 3, grl, false);
      const auto rev = backbone_rep_grad(model, batch, 3, grl, true);
      for (std::size_t i = 0; i < plain.size(); ++i) {
        worst = std::max(worst, std::abs(rev[i] + grl * plain[i]));
        scale = std::max(scale, std::abs(plain[i]));
      }
      ++pairs;
    }
  return {worst <= 1e-12 && scale > 0, std::to_string(pairs) + " paired runs (grl_lambda 0.1..2), max |g_rev + lambda g| " +
                                           fmt(worst, 2, true) + " (gradient scale " + fmt(scale, 2, true) + ")"};
}

// ---------------------------------------------------------------- 3

struct SmallWorld {
  Dataset source, target;
  std::vector<MatchResult> ms, mt;
};

SmallWorld small_world(const Detector<double>& det) {
  const auto cfg = BenchmarkConfig::desk_default();
  SmallWorld w{render_range(cfg.scene, cfg.source, Domain::Source, 0, 8, "s"),
               render_range(cfg.scene, cfg.target, Domain::Target, 0, 8, "t"), {}, {}};
  for (const auto& s : w.source.samples) w.ms.push_back(det.match(s));
  for (const auto& s : w.target.samples) w.mt.push_back(det.match(s));
  return w;
}

DomainBatch draw(BatchStream& stream, const Dataset& d, const std::vector<MatchResult>& m, std::size_t n) {
  DomainBatch b;
  for (std::size_t i : stream.next(n)) b.samples.push_back(&d.samples[i]), b.matches.push_back(&m[i]);
  return b;
}

std::vector<double> flat_params(const ParameterStore<double>& store) {
  std::vector<double> v;
  for (const auto& p : store.all()) v.insert(v.end(), p.tensor.values().begin(), p.tensor.values().end());
  return v;
}

Verdict loss_identities() {
  Clock clock;
  const LirrConfig cfg{0.1, 1.0, 1.0, true};
  double worst = 0;
  std::size_t clamped = 0;
  bool finite = true;
  {
    LirrModel<double> model(ModelSpec{}, 42);
    const auto w = small_world(model.detector());
    SgdMomentum<double> opt({0.01, 0.9});
    BatchStream ss(8, 42, kSourceStream), st(8, 42, kTargetStream);
    for (int step = 0; step < 500; ++step) {
      const auto src = draw(ss, w.source, w.ms, 2), tgt = draw(st, w.target, w.mt, 2);
      // L_i and L_d recomputed through the standalone risk functions.
      Tape<double> probe(false);
      const auto mixed = detail::concat_batches(src, tgt);
      const double li = invariant_risk(probe, model.detector(), mixed).item();
      const double ld = domain_risk(probe, model.detector(), mixed).item();
      const auto b = train_step(model, src, tgt, opt, cfg);
      finite = finite && b.finite();
      worst = std::max({worst, std::abs(b.l_i - li), std::abs(b.l_d - ld),
                        std::abs(b.l_risk - (li + cfg.lambda_risk * (li - ld))),
                        std::abs(b.l_total - (b.l_risk + cfg.lambda_rep * b.l_rep)),
                        std::abs(b.objective - (b.l_risk - cfg.lambda_rep * b.l_rep))});
      clamped += b.gap_clamped;
    }
  }
  // lambda_rep = lambda_risk = 0 against plain supervised steps on [src; tgt].
  std::size_t identical = 0;
  const std::size_t steps = 500;
  {
    LirrModel<double> a(ModelSpec{}, 7), b(ModelSpec{}, 7);
    const auto w = small_world(a.detector());
    SgdMomentum<double> oa({0.01, 0.9}), ob({0.01, 0.9});
    BatchStream sa(8, 7, kSourceStream), ta(8, 7, kTargetStream), sb(8, 7, kSourceStream), tb(8, 7, kTargetStream);
    for (std::size_t step = 0; step < steps; ++step) {
      const auto ra = train_step(a, draw(sa, w.source, w.ms, 2), draw(ta, w.target, w.mt, 2), oa, LirrConfig{0, 0, 1, true});
      const auto rb = supervised_step(b, detail::concat_batches(draw(sb, w.source, w.ms, 2), draw(tb, w.target, w.mt, 2)), ob);
      if (ra.l_i != rb.l_i || flat_params(a.params()) != flat_params(b.params())) break;
      ++identical;
    }
  }
  return {finite && worst <= 1e-6 && identical == steps,
          "500 LIRR steps, max identity residual " + fmt(worst, 2, true) + " (" + std::to_string(clamped) +
              " clamped steps); zero-weight run bit-identical to supervised for " + std::to_string(identical) + "/" +
              std::to_string(steps) + " steps, " + fmt(clock.seconds(), 1) + " s"};
}

// ---------------------------------------------------------------- 4

Verdict oracle_equivalence() {
  Clock clock;
  std::size_t match_ok = 0, nms_ok = 0, flags_ok = 0, coco_ok = 0;
  const std::size_t n = 100;
  for (std::uint64_t seed = 0; seed < n; ++seed) {
    const auto inst = instances::match_instance(1000 + seed);
    const auto got = match_anchors(inst.gts, inst.classes, inst.grid, inst.thr);
    const auto want = oracle::match_anchors(inst.gts, inst.classes, inst.grid, inst.thr);
    match_ok += got.assignment == want.assignment && got.labels == want.labels && got.targets == want.targets;

    const auto dets = instances::nms_instance(1000 + seed);
    const double thr = 0.3 + 0.1 * static_cast<double>(seed % 5);
    const auto a = nms(dets, thr), b = oracle::nms(dets, thr);
    bool same = a.size() == b.size();
    for (std::size_t i = 0; same && i < a.size(); ++i)
      same = a[i].bbox == b[i].bbox && a[i].score == b[i].score && a[i].class_id == b[i].class_id;
    nms_ok += same;

    const auto in = instances::eval_instance(1000 + seed, 50, 1 + static_cast<int>(seed % 3));
    bool flags = true;
    for (const auto& im : in)
      for (double t : coco_iou_thresholds())
        flags = flags && match_detections(im.detections, im.gt_boxes, im.gt_classes, t) ==
                             oracle::match_flags(im.detections, im.gt_boxes, im.gt_classes, t);
    flags_ok += flags;
    const auto r = evaluate(in), o = oracle::evaluate(in);
    bool close = std::abs(r.ap - o.ap) <= 1e-9 && std::abs(r.ap50 - o.ap50) <= 1e-9 && std::abs(r.ap75 - o.ap75) <= 1e-9 &&
                 r.per_threshold.size() == o.per_threshold.size();
    for (std::size_t t = 0; close && t < r.per_threshold.size(); ++t) close = std::abs(r.per_threshold[t] - o.per_threshold[t]) <= 1e-9;
    coco_ok += close;
  }
  const double t = clock.seconds();
  return {match_ok == n && nms_ok == n && flags_ok == n && coco_ok == n && t < 60,
          "matching " + std::to_string(match_ok) + "/100, NMS " + std::to_string(nms_ok) + "/100, COCO flags " +
              std::to_string(flags_ok) + "/100, COCO AP " + std::to_string(coco_ok) + "/100, " + fmt(t, 1) + " s"};
}

// ---------------------------------------------------------------- 5

Verdict geometry_round_trip() {
  std::mt19937_64 rng(5);
  const auto grid = generate_anchors(ModelSpec{}.anchor_config());
  std::uniform_int_distribution<std::size_t> pick(0, grid.size() - 1);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto gt = instances::random_box(rng, 64, 2).as<float>();
    const auto an = (i % 2 ? instances::random_box(rng, 64, 2) : grid.anchors[pick(rng)]).as<float>();
    const auto back = decode_box(encode_box(gt, an), an);
    for (float e : {back.x1 - gt.x1, back.y1 - gt.y1, back.x2 - gt.x2, back.y2 - gt.y2})
      worst = std::max(worst, static_cast<double>(std::abs(e)));
  }
  return {worst < 1e-5, "1000 float box/anchor pairs, max coordinate error " + fmt(worst, 2, true)};
}

// ---------------------------------------------------------------- 6

Verdict directional_reproduction() {
  Clock clock;
  const auto bench = make_benchmark(BenchmarkConfig::desk_default(), 1);
  std::size_t passing = 0;
  std::ostringstream detail;
  for (std::uint64_t seed : {42u, 43u, 44u}) {
    auto run = [&](Mode mode, std::size_t budget) {
      ExperimentConfig c;
      c.mode = mode;
      c.label_budget = budget;
      c.seed = seed;
      c.deterministic = true;
      return 100 * run_experiment(c, select_data(c, bench.source_train, bench.target_train, bench.target_test)).final_report.ap;
    };
    const double so = run(Mode::SourceOnly, 0), o50 = run(Mode::Oracle, 50), o100 = run(Mode::Oracle, 100),
                 sda = run(Mode::SDA, 50);
    const bool a = so <= o100 - 15, b = sda >= so + 10, c = sda >= o50;
    passing += a && b && c;
    detail << "seed " << seed << ": SO " << fmt(so, 1) << " O50 " << fmt(o50, 1) << " O100 " << fmt(o100, 1) << " SDA50 "
           << fmt(sda, 1) << " [" << (a ? 'a' : '-') << (b ? 'b' : '-') << (c ? 'c' : '-') << "]; ";
    std::cerr << "  " << detail.str().substr(detail.str().rfind("seed ")) << '\n';
  }
  const double t = clock.seconds();
  detail << passing << "/3 seeds pass, " << fmt(t / 60, 1) << " min";
  return {passing >= 2 && t <= 15 * 60, detail.str()};
}

// ---------------------------------------------------------------- 7

int run_cli(const std::string& args, std::string* output = nullptr) {
  const std::string cmd = std::string(LIRR_CLI_PATH) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return -1;
  char buf[4096];
  std::string out;
  while (std::fgets(buf, sizeof buf, p)) out += buf;
  const int status = pclose(p);
  if (output) *output = out;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream is(p);
  return nlohmann::json::parse(is);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

Verdict determinism() {
  Clock clock;
  const fs::path root = fs::absolute("acceptance_work");
  fs::remove_all(root);
  fs::create_directories(root);
  std::string out;
  if (run_cli("gen --deterministic --out " + (root / "data").string(), &out) != 0) return {false, "gen failed: " + out};
  ExperimentConfig c;
  c.mode = Mode::SDA;
  c.source_train = (root / "data" / "source_train.bin").string();
  c.target_train = (root / "data" / "target_train.bin").string();
  c.target_test = (root / "data" / "target_test.bin").string();
  c.steps = 300;
  c.eval_every = 100;
  {
    std::ofstream os(root / "exp.json");
    os << nlohmann::json(c).dump(2);
  }
  for (const char* run : {"run_a", "run_b"})
    if (run_cli("train --deterministic --config " + (root / "exp.json").string() + " --out " + (root / run).string(), &out) != 0)
      return {false, std::string(run) + " failed: " + out};
  auto metrics = [](nlohmann::json j) {
    j.erase("wall_clock_seconds");
    j.erase("outputs");
    return j;
  };
  const auto a = read_json(root / "run_a" / "run_report.json"), b = read_json(root / "run_b" / "run_report.json");
  const bool same_report = metrics(a) == metrics(b);
  const bool same_ckpt = slurp(root / "run_a" / "checkpoint.bin") == slurp(root / "run_b" / "checkpoint.bin");
  if (run_cli("eval --config " + (root / "run_a" / "run_report.json").string() + " --out " + (root / "run_a").string(), &out) != 0)
    return {false, "eval failed: " + out};
  const bool eval_same = read_json(root / "run_a" / "eval_report.json") == a.at("final");
  return {same_report && same_ckpt && eval_same,
          std::string("run reports ") + (same_report ? "identical" : "differ") + ", checkpoints " +
              (same_ckpt ? "identical" : "differ") + ", eval " + (eval_same ? "reproduces" : "does not reproduce") +
              " final AP " + fmt(100 * a.at("final").at("ap").get<double>(), 2) + ", " + fmt(clock.seconds(), 1) + " s"};
}

// ---------------------------------------------------------------- 8

Verdict dataset_integrity() {
  const auto cfg = BenchmarkConfig::desk_default();
  Dataset d;
  d.name = "integrity";
  double worst = 1.0;
  std::size_t scanned = 0;
  for (std::size_t i = 0; i < 500; ++i)
    for (Domain dom : {Domain::Source, Domain::Target}) {
      SceneLayers layers;
      auto s = render_scene(cfg.scene, dom == Domain::Source ? cfg.source : cfg.target, dom, i, &layers);
      const auto scan = oracle::scan_box(layers.clean, layers.background, cfg.scene.image_size);
      worst = std::min(worst, scan ? iou(s.boxes[0], *scan) : 0.0);
      scanned += scan.has_value();
      d.samples.push_back(std::move(s));
    }
  const fs::path path = fs::absolute("acceptance_integrity.bin");
  save_dataset(path.string(), d, nlohmann::json(cfg));
  const auto back = load_dataset(path.string());
  bool bitwise = back.size() == d.size() && back.name == d.name;
  for (std::size_t i = 0; bitwise && i < d.size(); ++i) {
    const auto &x = d.samples[i], &y = back.samples[i];
    bitwise = x.image_id == y.image_id && x.domain == y.domain && x.boxes == y.boxes && x.classes == y.classes &&
              x.image.size() == y.image.size() && std::memcmp(x.image.data(), y.image.data(), x.image.size() * sizeof(float)) == 0;
  }
  fs::remove(path);
  return {bitwise && scanned == 1000 && worst >= 0.9, std::string("1000 samples, round trip ") +
                                                          (bitwise ? "bitwise" : "NOT bitwise") + ", min GT/scan IoU " +
                                                          fmt(worst, 4)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient suite", gradient_suite},
      {"reversal property", reversal_property},
      {"loss identities", loss_identities},
      {"oracle equivalence", oracle_equivalence},
      {"geometry round trip", geometry_round_trip},
      {"directional reproduction", directional_reproduction},
      {"determinism", determinism},
      {"dataset integrity", dataset_integrity}};
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));
  bool all = true;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    if (!selected.empty() && !selected.contains(k + 1)) continue;
    Verdict v;
    try {
      v = criteria[k].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    all = all && v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  " << k + 1 << " " << criteria[k].first << ": " << v.detail << std::endl;
  }
  return all ? 0 : 1;
}
