#ifndef LIRR_SYNTHGEN_HPP
#define LIRR_SYNTHGEN_HPP

// Procedural two-domain detection benchmark. Each image holds one bright
// convex "spacecraft" polygon over a domain-specific background, lit by a
// domain-specific illumination model, with sensor noise added last. Every
// image is a pure function of (scene seed, domain, index).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "lirr/geometry.hpp"
#include "lirr/io.hpp"
#include "lirr/sample.hpp"

namespace lirr {

enum class Background { Starfield, Clutter, EarthGradient };
enum class TargetTexture { Flat, Panelled };

NLOHMANN_JSON_SERIALIZE_ENUM(Background, {{Background::Starfield, "starfield"},
                                          {Background::Clutter, "clutter"},
                                          {Background::EarthGradient, "earth_gradient"}})
NLOHMANN_JSON_SERIALIZE_ENUM(TargetTexture, {{TargetTexture::Flat, "flat"}, {TargetTexture::Panelled, "panelled"}})

struct DomainParams {
  double illumination_gain = 1.0;
  double gradient_angle = 0.0;     // radians, direction of increasing light
  double gradient_strength = 0.0;  // relative gain change across the image width
  double noise_sigma = 0.01;       // additive Gaussian, intensity units
  Background background = Background::Starfield;
  double clutter_density = 0.02;   // stars per pixel / blob density, in [0, 1]
  TargetTexture target_texture = TargetTexture::Flat;
  double background_level = 0.05;
  double target_intensity = 0.85;

  void validate() const {
    if (!(noise_sigma >= 0)) throw std::invalid_argument("noise_sigma must be >= 0");
    if (!(clutter_density >= 0 && clutter_density <= 1)) throw std::invalid_argument("clutter_density must lie in [0, 1]");
    if (!(illumination_gain > 0)) throw std::invalid_argument("illumination_gain must be > 0");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DomainParams, illumination_gain, gradient_angle, gradient_strength,
                                                noise_sigma, background, clutter_density, target_texture,
                                                background_level, target_intensity)

struct SceneSpec {
  std::size_t image_size = 64;
  std::size_t channels = 1;
  double min_extent = 16.0;  // target major axis, pixels
  double max_extent = 36.0;
  double min_minor_ratio = 0.45;
  int min_vertices = 5;
  int max_vertices = 8;
  std::uint64_t seed = 7;

  void validate() const {
    if (image_size < 8) throw std::invalid_argument("image_size must be >= 8");
    if (channels < 1) throw std::invalid_argument("channels must be >= 1");
    if (!(min_extent >= 4 && max_extent >= min_extent && max_extent + 2 <= static_cast<double>(image_size)))
      throw std::invalid_argument("target extent range does not fit the image");
    if (min_vertices < 3 || max_vertices < min_vertices) throw std::invalid_argument("invalid vertex range");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SceneSpec, image_size, channels, min_extent, max_extent,
                                                min_minor_ratio, min_vertices, max_vertices, seed)

inline constexpr std::int64_t kTargetIdOffset = 1'000'000;

struct SceneLayers {
  std::vector<float> background;  // lit, noise free, one plane
  std::vector<float> clean;       // lit composite before noise, one plane
  std::vector<float> coverage;    // target silhouette coverage in [0, 1]
  std::vector<std::pair<double, double>> polygon;
};

namespace detail {

inline std::mt19937_64 scene_rng(std::uint64_t seed, Domain domain, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(domain), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(static_cast<std::uint64_t>(index) >> 32), 0x5eedu};
  return std::mt19937_64(seq);
}

using Polygon = std::vector<std::pair<double, double>>;

inline double polygon_area(const Polygon& p) {
  double a = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& [x0, y0] = p[i];
    const auto& [x1, y1] = p[(i + 1) % p.size()];
    a += x0 * y1 - x1 * y0;
  }
  return 0.5 * std::abs(a);
}

// Counter-clockwise convex polygon containment (boundary inclusive).
inline bool inside_convex(const Polygon& p, double x, double y) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& [x0, y0] = p[i];
    const auto& [x1, y1] = p[(i + 1) % p.size()];
    if ((x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) < 0) return false;
  }
  return true;
}

}  // namespace detail

// Renders one scene. Layers are returned for inspection; the sample image is
// `clean` plus noise, clamped to [0, 1] and replicated over channels.
inline Sample render_scene(const SceneSpec& spec, const DomainParams& params, Domain domain, std::size_t index,
                           SceneLayers* layers = nullptr) {
  spec.validate();
  params.validate();
  auto rng = detail::scene_rng(spec.seed, domain, index);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const std::size_t n = spec.image_size;
  const double size = static_cast<double>(n);

  // Target polygon: vertices on a rotated ellipse in angular order, hence convex.
  detail::Polygon poly;
  double major = 0, theta = 0;
  for (int attempt = 0; attempt < 16 && poly.empty(); ++attempt) {
    major = spec.min_extent + (spec.max_extent - spec.min_extent) * uni(rng);
    const double a = 0.5 * major;
    const double b = a * (spec.min_minor_ratio + (1.0 - spec.min_minor_ratio) * uni(rng));
    theta = 2 * std::numbers::pi * uni(rng);
    const double cx = a + 1 + (size - 2 * a - 2) * uni(rng);
    const double cy = a + 1 + (size - 2 * a - 2) * uni(rng);
    const int nv = spec.min_vertices +
                   static_cast<int>(uni(rng) * static_cast<double>(spec.max_vertices - spec.min_vertices + 1)) %
                       (spec.max_vertices - spec.min_vertices + 1);
    std::vector<double> phi(static_cast<std::size_t>(nv));
    for (auto& p : phi) p = 2 * std::numbers::pi * uni(rng);
    std::sort(phi.begin(), phi.end());
    detail::Polygon cand;
    for (double p : phi) {
      const double ex = a * std::cos(p), ey = b * std::sin(p);
      cand.emplace_back(cx + ex * std::cos(theta) - ey * std::sin(theta), cy + ex * std::sin(theta) + ey * std::cos(theta));
    }
    // Reject slivers: keep polygons covering a reasonable share of the ellipse.
    if (detail::polygon_area(cand) >= 0.35 * std::numbers::pi * a * b) poly = std::move(cand);
  }
  if (poly.empty()) {  // regular hexagon fallback
    const double a = 0.5 * spec.min_extent;
    for (int k = 0; k < 6; ++k)
      poly.emplace_back(0.5 * size + a * std::cos(k * std::numbers::pi / 3), 0.5 * size + a * std::sin(k * std::numbers::pi / 3));
  }

  // Background.
  std::vector<float> bg(n * n, static_cast<float>(params.background_level));
  auto add_blob = [&](double bx, double by, double sigma, double amp) {
    const double inv = 1.0 / (2 * sigma * sigma);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - bx, dy = static_cast<double>(y) + 0.5 - by;
        bg[y * n + x] += static_cast<float>(amp * std::exp(-(dx * dx + dy * dy) * inv));
      }
  };
  switch (params.background) {
    case Background::Starfield: {
      const auto stars = static_cast<std::size_t>(std::round(params.clutter_density * static_cast<double>(n * n)));
      for (std::size_t s = 0; s < stars; ++s) {
        const auto px = static_cast<std::size_t>(uni(rng) * size) % n;
        const auto py = static_cast<std::size_t>(uni(rng) * size) % n;
        bg[py * n + px] = static_cast<float>(params.background_level + (0.3 + 0.7 * uni(rng)) * (1.0 - params.background_level));
      }
      break;
    }
    case Background::Clutter: {
      const auto blobs = static_cast<std::size_t>(std::round(params.clutter_density * 40.0));
      for (std::size_t s = 0; s < blobs; ++s)
        add_blob(uni(rng) * size, uni(rng) * size, 1.5 + 3.0 * uni(rng), 0.15 + 0.35 * uni(rng));
      break;
    }
    case Background::EarthGradient: {
      // Soft bright limb entering from a random side.
      const double dir = 2 * std::numbers::pi * uni(rng);
      const double offset = (0.1 + 0.5 * uni(rng)) * size;
      const double width = 3.0 + 6.0 * uni(rng);
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          const double d = (static_cast<double>(x) + 0.5 - 0.5 * size) * std::cos(dir) +
                           (static_cast<double>(y) + 0.5 - 0.5 * size) * std::sin(dir);
          bg[y * n + x] += static_cast<float>(0.35 / (1.0 + std::exp(-(d - 0.5 * size + offset) / width)));
        }
      const auto blobs = static_cast<std::size_t>(std::round(params.clutter_density * 40.0));
      for (std::size_t s = 0; s < blobs; ++s)
        add_blob(uni(rng) * size, uni(rng) * size, 2.0 + 3.0 * uni(rng), 0.1 + 0.2 * uni(rng));
      break;
    }
  }

  // Silhouette coverage by 4x4 supersampling over the polygon's pixel hull.
  std::vector<float> cov(n * n, 0.0f);
  double px0 = size, py0 = size, px1 = 0, py1 = 0;
  for (const auto& [x, y] : poly) {
    px0 = std::min(px0, x), py0 = std::min(py0, y), px1 = std::max(px1, x), py1 = std::max(py1, y);
  }
  const auto x_lo = static_cast<std::size_t>(std::max(0.0, std::floor(px0)));
  const auto y_lo = static_cast<std::size_t>(std::max(0.0, std::floor(py0)));
  const auto x_hi = std::min(n, static_cast<std::size_t>(std::ceil(px1)) + 1);
  const auto y_hi = std::min(n, static_cast<std::size_t>(std::ceil(py1)) + 1);
  for (std::size_t y = y_lo; y < y_hi; ++y)
    for (std::size_t x = x_lo; x < x_hi; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx)
          hits += detail::inside_convex(poly, static_cast<double>(x) + (sx + 0.5) / 4.0,
                                        static_cast<double>(y) + (sy + 0.5) / 4.0);
      cov[y * n + x] = static_cast<float>(hits) / 16.0f;
    }

  // Composite and light.
  std::vector<float> lit_bg(n * n), clean(n * n);
  const double gx = std::cos(params.gradient_angle), gy = std::sin(params.gradient_angle);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double fx = static_cast<double>(x) + 0.5, fy = static_cast<double>(y) + 0.5;
      double tex = params.target_intensity;
      if (params.target_texture == TargetTexture::Panelled) {
        const double u = (fx - poly[0].first) * std::cos(theta) + (fy - poly[0].second) * std::sin(theta);
        if (static_cast<long>(std::floor(u / 3.0)) % 2 != 0) tex *= 0.7;
      }
      const double light = params.illumination_gain *
                           (1.0 + params.gradient_strength * ((fx - 0.5 * size) * gx + (fy - 0.5 * size) * gy) / size);
      const double c = cov[y * n + x];
      lit_bg[y * n + x] = static_cast<float>(light * bg[y * n + x]);
      clean[y * n + x] = static_cast<float>(light * ((1.0 - c) * bg[y * n + x] + c * tex));
    }

  Sample s;
  s.image_id = static_cast<std::int64_t>(index) + (domain == Domain::Target ? kTargetIdOffset : 0);
  s.domain = domain;
  s.channels = spec.channels;
  s.height = n;
  s.width = n;
  s.image.resize(spec.channels * n * n);
  std::normal_distribution<double> noise(0.0, params.noise_sigma);
  for (std::size_t i = 0; i < n * n; ++i) {
    const double v = params.noise_sigma > 0 ? clean[i] + noise(rng) : clean[i];
    const float px = static_cast<float>(std::clamp(v, 0.0, 1.0));
    for (std::size_t ch = 0; ch < spec.channels; ++ch) s.image[ch * n * n + i] = px;
  }

  // Tight box of every pixel the silhouette touches.
  std::size_t bx0 = n, by0 = n, bx1 = 0, by1 = 0;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      if (cov[y * n + x] > 0) {
        bx0 = std::min(bx0, x), by0 = std::min(by0, y), bx1 = std::max(bx1, x + 1), by1 = std::max(by1, y + 1);
      }
  s.boxes.push_back({static_cast<double>(bx0), static_cast<double>(by0), static_cast<double>(bx1), static_cast<double>(by1)});
  s.classes.push_back(0);

  if (layers) {
    layers->background = std::move(lit_bg);
    layers->clean = std::move(clean);
    layers->coverage = std::move(cov);
    layers->polygon = poly;
  }
  return s;
}

// Renders indices [first, first + count) of one domain, using up to
// `threads` workers. Output order and content do not depend on `threads`.
inline Dataset render_range(const SceneSpec& spec, const DomainParams& params, Domain domain, std::size_t first,
                            std::size_t count, std::string name, unsigned threads = 1) {
  Dataset d;
  d.name = std::move(name);
  d.samples.resize(count);
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(count, 1))));
  auto work = [&](unsigned t) {
    for (std::size_t i = t; i < count; i += threads) d.samples[i] = render_scene(spec, params, domain, first + i);
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }
  return d;
}

// ---------------------------------------------------------------- benchmark

struct BenchmarkConfig {
  SceneSpec scene;
  DomainParams source;
  DomainParams target;
  std::size_t source_train = 2000;
  std::size_t target_train = 100;
  std::size_t target_small = 50;
  std::size_t target_test = 200;
  std::size_t target_test_offset = 100;  // first target index of the test split
  double min_brightness_gap = 0.05;

  static BenchmarkConfig desk_default() {
    BenchmarkConfig c;
    c.source.illumination_gain = 1.0;
    c.source.noise_sigma = 0.01;
    c.source.background = Background::Starfield;
    c.source.clutter_density = 0.01;
    c.source.target_texture = TargetTexture::Flat;
    c.source.background_level = 0.05;
    c.source.target_intensity = 0.85;

    // Lab-like target: dark panelled silhouette against a bright limb.
    c.target.illumination_gain = 1.0;
    c.target.gradient_angle = 0.6;
    c.target.gradient_strength = 0.3;
    c.target.noise_sigma = 0.03;
    c.target.background = Background::EarthGradient;
    c.target.clutter_density = 0.3;
    c.target.target_texture = TargetTexture::Panelled;
    c.target.background_level = 0.45;
    c.target.target_intensity = 0.2;
    return c;
  }

  void validate() const {
    scene.validate();
    source.validate();
    target.validate();
    if (source_train == 0 || target_train == 0 || target_small == 0 || target_test == 0)
      throw std::invalid_argument("benchmark split sizes must be positive");
    if (target_small > target_train) throw std::invalid_argument("small target split exceeds target train split");
    if (target_test_offset < target_train)
      throw std::invalid_argument("target test index range [" + std::to_string(target_test_offset) + ", ...) overlaps target train [0, " +
                                  std::to_string(target_train) + ")");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BenchmarkConfig, scene, source, target, source_train, target_train,
                                                target_small, target_test, target_test_offset, min_brightness_gap)

struct Benchmark {
  Dataset source_train;
  Dataset target_train;        // larger label budget
  Dataset target_train_small;  // prefix of target_train
  Dataset target_test;
};

inline Benchmark make_benchmark(const BenchmarkConfig& cfg, unsigned threads = 1) {
  cfg.validate();
  Benchmark b;
  b.source_train = render_range(cfg.scene, cfg.source, Domain::Source, 0, cfg.source_train, "source_train", threads);
  b.target_train = render_range(cfg.scene, cfg.target, Domain::Target, 0, cfg.target_train, "target_train", threads);
  b.target_train_small = b.target_train.head(cfg.target_small);
  b.target_train_small.name = "target_train_small";
  b.target_test =
      render_range(cfg.scene, cfg.target, Domain::Target, cfg.target_test_offset, cfg.target_test, "target_test", threads);
  return b;
}

inline double mean_brightness(const Dataset& d) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& smp : d.samples) {
    for (float v : smp.image) s += v;
    n += smp.image.size();
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------- dataset files
//
// Line 1: JSON header (format, version, count, geometry, config echo and
// per-section byte counts with CRC32). Then the image section (float32
// little-endian, samples in order, CHW) and the annotation section (one JSON
// object per line: image_id, domain, boxes, classes).

inline constexpr int kDatasetVersion = 1;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::json annotation_json(const Sample& s) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : s.boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
  return {{"image_id", s.image_id}, {"domain", domain_name(s.domain)}, {"boxes", boxes}, {"classes", s.classes}};
}

inline void save_dataset(const std::string& path, const Dataset& d, const nlohmann::json& config_echo = {}) {
  std::size_t channels = 0, height = 0, width = 0;
  if (!d.samples.empty()) {
    channels = d.samples[0].channels, height = d.samples[0].height, width = d.samples[0].width;
  }
  std::ostringstream images(std::ios::binary);
  std::string annotations;
  for (const auto& s : d.samples) {
    if (s.channels != channels || s.height != height || s.width != width)
      throw DatasetError("save_dataset: mixed image geometry in " + d.name);
    detail::write_le<float>(images, s.image);
    annotations += annotation_json(s).dump();
    annotations += '\n';
  }
  const std::string img = images.str();
  nlohmann::json header{{"format", "lirr-dataset"},
                        {"version", kDatasetVersion},
                        {"name", d.name},
                        {"count", d.samples.size()},
                        {"channels", channels},
                        {"height", height},
                        {"width", width},
                        {"dtype", "float32"},
                        {"config", config_echo},
                        {"sections",
                         {{"images", {{"bytes", img.size()}, {"crc32", detail::crc32_of(img)}}},
                          {"annotations", {{"bytes", annotations.size()}, {"crc32", detail::crc32_of(annotations)}}}}}};
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DatasetError("cannot write dataset: " + path);
  os << header.dump() << '\n' << img << annotations;
  if (!os) throw DatasetError("failed writing dataset: " + path);
}

inline nlohmann::json read_dataset_header(std::istream& is, const std::string& path) {
  std::string line;
  if (!std::getline(is, line)) throw DatasetError(path + ": missing header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(path + ": malformed header: " + e.what());
  }
  if (h.value("format", "") != "lirr-dataset") throw DatasetError(path + ": not a dataset file");
  if (h.value("version", 0) != kDatasetVersion)
    throw DatasetError(path + ": unsupported dataset version " + std::to_string(h.value("version", 0)));
  return h;
}

// Either the whole dataset is returned or DatasetError is thrown.
inline Dataset load_dataset(const std::string& path, nlohmann::json* header_out = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetError("cannot open dataset: " + path);
  const nlohmann::json h = read_dataset_header(is, path);
  std::size_t count, channels, height, width, img_bytes, ann_bytes;
  std::uint32_t img_crc, ann_crc;
  try {
    count = h.at("count"), channels = h.at("channels"), height = h.at("height"), width = h.at("width");
    img_bytes = h.at("sections").at("images").at("bytes");
    img_crc = h.at("sections").at("images").at("crc32");
    ann_bytes = h.at("sections").at("annotations").at("bytes");
    ann_crc = h.at("sections").at("annotations").at("crc32");
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(path + ": incomplete header: " + e.what());
  }
  const std::size_t plane = channels * height * width;
  if (img_bytes != count * plane * sizeof(float)) throw DatasetError(path + ": image section size disagrees with geometry");

  std::string img(img_bytes, '\0'), ann(ann_bytes, '\0');
  is.read(img.data(), static_cast<std::streamsize>(img_bytes));
  if (static_cast<std::size_t>(is.gcount()) != img_bytes) throw DatasetError(path + ": truncated image section");
  is.read(ann.data(), static_cast<std::streamsize>(ann_bytes));
  if (static_cast<std::size_t>(is.gcount()) != ann_bytes) throw DatasetError(path + ": truncated annotation section");
  if (is.peek() != std::char_traits<char>::eof()) throw DatasetError(path + ": trailing bytes after annotations");
  if (detail::crc32_of(img) != img_crc) throw DatasetError(path + ": image section checksum mismatch");
  if (detail::crc32_of(ann) != ann_crc) throw DatasetError(path + ": annotation section checksum mismatch");

  Dataset d;
  d.name = h.value("name", "");
  d.samples.resize(count);
  std::istringstream img_in(img, std::ios::binary);
  std::istringstream ann_in(ann);
  std::string line;
  for (auto& s : d.samples) {
    s.channels = channels, s.height = height, s.width = width;
    s.image.resize(plane);
    detail::read_le<float>(img_in, std::span<float>(s.image), path);
    if (!std::getline(ann_in, line)) throw DatasetError(path + ": fewer annotations than images");
    try {
      const auto a = nlohmann::json::parse(line);
      s.image_id = a.at("image_id");
      s.domain = parse_domain(a.at("domain"));
      for (const auto& b : a.at("boxes")) s.boxes.push_back({b.at(0), b.at(1), b.at(2), b.at(3)});
      s.classes = a.at("classes").get<std::vector<int>>();
    } catch (const std::exception& e) {
      throw DatasetError(path + ": bad annotation line: " + e.what());
    }
    if (s.boxes.size() != s.classes.size()) throw DatasetError(path + ": boxes/classes length mismatch");
  }
  if (std::getline(ann_in, line) && !line.empty()) throw DatasetError(path + ": more annotations than images");
  if (header_out) *header_out = h;
  return d;
}

}  // namespace lirr

#endif  // LIRR_SYNTHGEN_HPP
