#pragma once
// Named parameter storage with deterministic (lexicographic) iteration,
// per-graph leaf binding, and directory checkpoints (.ptns per parameter
// plus manifest.json).

#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "pcaagg/autodiff.hpp"

namespace pcaagg {

template <typename T>
class ParamStore {
 public:
  std::map<std::string, Tensor<T>> values;
  std::map<std::string, Tensor<T>> grads;

  Tensor<T>& add(const std::string& path, Tensor<T> init) {
    auto [it, inserted] = values.emplace(path, std::move(init));
    if (!inserted) throw ConfigError("duplicate parameter path: " + path);
    return it->second;
  }

  bool has(const std::string& path) const { return values.count(path) != 0; }

  Tensor<T>& at(const std::string& path) {
    auto it = values.find(path);
    if (it == values.end()) throw ConfigError("unknown parameter path: " + path);
    return it->second;
  }
  const Tensor<T>& at(const std::string& path) const {
    auto it = values.find(path);
    if (it == values.end()) throw ConfigError("unknown parameter path: " + path);
    return it->second;
  }

  int64_t total_parameters() const {
    int64_t n = 0;
    for (const auto& [k, v] : values) n += v.numel();
    return n;
  }

  int64_t total_parameters(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& [k, v] : values)
      if (k.rfind(prefix, 0) == 0) n += v.numel();
    return n;
  }

  void zero_grads() { grads.clear(); }

  uint64_t content_hash() const {
    uint64_t h = 1469598103934665603ULL;
    for (const auto& [k, v] : values) {
      h = detail::fnv1a_bytes(k.data(), k.size(), h);
      h = detail::fnv1a_bytes(v.data.data(), v.data.size() * sizeof(T), h);
    }
    return h;
  }

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    for (const auto& [k, v] : values) {
      save_ptns(v, dir / (k + ".ptns"));
      nlohmann::json entry;
      entry["dims"] = v.dims;
      entry["dtype"] = std::is_same_v<T, float> ? "f32" : "f64";
      manifest[k] = entry;
    }
    std::ofstream f(dir / "manifest.json");
    f << manifest.dump(2) << "\n";
  }

  static ParamStore load(const std::filesystem::path& dir) {
    std::ifstream f(dir / "manifest.json");
    if (!f) throw IoError("missing manifest: " + (dir / "manifest.json").string());
    nlohmann::json manifest = nlohmann::json::parse(f);
    ParamStore out;
    for (auto it = manifest.begin(); it != manifest.end(); ++it)
      out.add(it.key(), load_ptns<T>(dir / (it.key() + ".ptns")));
    return out;
  }
};

// Per-graph view of a ParamStore: materializes each parameter as a leaf
// DiffNode on first use, and copies accumulated gradients back after the
// backward pass.
template <typename T>
class ParamBinding {
 public:
  ParamBinding(Graph<T>& g, ParamStore<T>& s) : g_(&g), store_(&s) {}

  DiffNode<T> operator[](const std::string& path) {
    auto it = ids_.find(path);
    if (it != ids_.end()) return DiffNode<T>{g_, it->second};
    DiffNode<T> n = g_->leaf(store_->at(path), true);
    ids_.emplace(path, n.id);
    return n;
  }

  void export_grads() {
    for (const auto& [path, id] : ids_) store_->grads[path] = g_->grad_or_zero(id);
  }

  ParamStore<T>& store() { return *store_; }

 private:
  Graph<T>* g_;
  ParamStore<T>* store_;
  std::map<std::string, int> ids_;
};

// ---------------------------------------------------------------------------
// Seeded initializers. Each parameter derives its stream from the master
// seed and its own path, so adding parameters never reshuffles others.
// ---------------------------------------------------------------------------

namespace detail {
inline Rng param_rng(uint64_t seed, const std::string& path) {
  return Rng(seed ^ fnv1a(path));
}
}  // namespace detail

template <typename T>
Tensor<T>& register_xavier(ParamStore<T>& store, const std::string& path, Dims dims,
                           int64_t fan_in, int64_t fan_out, uint64_t seed) {
  detail::Rng rng = detail::param_rng(seed, path);
  T stddev = T(std::sqrt(2.0 / double(fan_in + fan_out)));
  return store.add(path, Tensor<T>::randn(std::move(dims), rng, stddev));
}

template <typename T>
Tensor<T>& register_constant(ParamStore<T>& store, const std::string& path, Dims dims, T v) {
  return store.add(path, Tensor<T>::full(std::move(dims), v));
}

}  // namespace pcaagg
