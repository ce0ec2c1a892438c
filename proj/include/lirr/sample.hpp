#ifndef LIRR_SAMPLE_HPP
#define LIRR_SAMPLE_HPP

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "lirr/geometry.hpp"

namespace lirr {

enum class Domain : int { Source = 0, Target = 1 };

inline const char* domain_name(Domain d) { return d == Domain::Source ? "source" : "target"; }

inline Domain parse_domain(const std::string& s) {
  if (s == "source") return Domain::Source;
  if (s == "target") return Domain::Target;
  throw std::invalid_argument("unknown domain: " + s);
}

// One labeled image. Pixels are CHW floats in [0, 1].
struct Sample {
  std::int64_t image_id = 0;
  Domain domain = Domain::Source;
  std::size_t channels = 1, height = 0, width = 0;
  std::vector<float> image;
  std::vector<BBox> boxes;
  std::vector<int> classes;

  bool labeled() const { return !boxes.empty() && boxes.size() == classes.size(); }

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  std::vector<Sample> samples;
  std::string name;

  std::size_t size() const { return samples.size(); }

  // The first n samples, keeping order and ids.
  Dataset head(std::size_t n) const {
    if (n > samples.size()) throw std::out_of_range("dataset " + name + " has fewer than " + std::to_string(n) + " samples");
    Dataset d;
    d.name = name + "[:" + std::to_string(n) + "]";
    d.samples.assign(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(n));
    return d;
  }
};

}  // namespace lirr

#endif  // LIRR_SAMPLE_HPP
