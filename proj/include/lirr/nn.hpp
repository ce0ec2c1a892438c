#ifndef LIRR_NN_HPP
#define LIRR_NN_HPP

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "lirr/io.hpp"
#include "lirr/tensor.hpp"

namespace lirr {

template <std::floating_point T>
struct Parameter {
  std::string name;  // dotted path, e.g. "backbone.conv1.weight"
  Tensor<T> tensor;
};

// Ordered, name-unique collection of trainable tensors.
template <std::floating_point T>
class ParameterStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> tensor) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    if (!tensor.requires_grad()) tensor = Tensor<T>(tensor.shape(), tensor.values(), true);
    index_.emplace(name, params_.size());
    params_.push_back({name, tensor});
    return tensor;
  }

  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second].tensor;
  }
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// He-normal weights, std = sqrt(2 / fan_in). Draws in double so float and
// double models built from one seed agree up to rounding.
template <std::floating_point T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
};

// SGD with momentum: v <- momentum * v + g; p <- p - lr * v.
template <std::floating_point T>
class SgdMomentum {
 public:
  explicit SgdMomentum(SgdConfig cfg) : cfg_(cfg) {
    if (!(cfg.lr >= 0.0)) throw std::invalid_argument("sgd: lr must be >= 0");
    if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0))
      throw std::invalid_argument("sgd: momentum must lie in [0, 1)");
  }

  void step(ParameterStore<T>& store) {
    auto& params = store.all();
    if (velocity_.size() < params.size()) velocity_.resize(params.size());
    const T lr = static_cast<T>(cfg_.lr);
    const T mu = static_cast<T>(cfg_.momentum);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& t = params[i].tensor;
      auto g = t.grad();
      if (g.empty()) continue;
      auto& v = velocity_[i];
      if (v.empty()) v.assign(t.numel(), T(0));
      auto p = t.mutable_data();
      for (std::size_t j = 0; j < p.size(); ++j) {
        v[j] = mu * v[j] + g[j];
        p[j] -= lr * v[j];
      }
    }
  }

  const SgdConfig& config() const { return cfg_; }

 private:
  SgdConfig cfg_;
  std::vector<std::vector<T>> velocity_;
};

// ---------------------------------------------------------------- checkpoints
//
// One JSON header line (format, version, dtype, names, shapes) terminated by
// '\n', then raw little-endian values of every parameter in header order.

inline constexpr int kCheckpointVersion = 1;

namespace detail {

template <class T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

}  // namespace detail

template <std::floating_point T>
void save_checkpoint(const std::string& path, const ParameterStore<T>& store) {
  nlohmann::json header;
  header["format"] = "lirr-checkpoint";
  header["version"] = kCheckpointVersion;
  header["dtype"] = detail::dtype_name<T>();
  header["params"] = nlohmann::json::array();
  for (const auto& p : store.all())
    header["params"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  os << header.dump() << '\n';
  for (const auto& p : store.all()) detail::write_le<T>(os, p.tensor.data());
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path);
}

// Loads into an already-constructed store; names, order and shapes must match.
template <std::floating_point T>
void load_checkpoint(const std::string& path, ParameterStore<T>& store) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint: " + path);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(path + ": missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": malformed header: " + e.what());
  }
  if (header.value("format", "") != "lirr-checkpoint") throw std::runtime_error(path + ": not a checkpoint");
  if (header.value("version", 0) != kCheckpointVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version");
  if (header.value("dtype", "") != detail::dtype_name<T>())
    throw std::runtime_error(path + ": dtype " + header.value("dtype", "") + " does not match model");
  const auto& entries = header.at("params");
  auto& params = store.all();
  if (entries.size() != params.size()) throw std::runtime_error(path + ": parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (entries[i].at("name").get<std::string>() != params[i].name ||
        entries[i].at("shape").get<Shape>() != params[i].tensor.shape())
      throw std::runtime_error(path + ": parameter " + params[i].name + " does not match model layout");
  }
  std::vector<std::vector<T>> staged;
  for (const auto& p : params) {
    staged.emplace_back(p.tensor.numel());
    detail::read_le<T>(is, std::span<T>(staged.back()), path);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error(path + ": trailing bytes");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.mutable_data();
    std::copy(staged[i].begin(), staged[i].end(), dst.begin());
  }
}

}  // namespace lirr

#endif  // LIRR_NN_HPP
