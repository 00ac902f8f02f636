#pragma once
// AdamW: bias-corrected adaptive moments with decoupled weight decay.

#include "pcaagg/param_store.hpp"

namespace pcaagg {

struct AdamWParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

template <typename T>
class AdamW {
 public:
  AdamWParams hp;
  std::map<std::string, Tensor<T>> m;  // first moments
  std::map<std::string, Tensor<T>> v;  // second moments
  int64_t step_count = 0;

  explicit AdamW(AdamWParams p = {}) : hp(p) {}

  // One update from store.grads. Parameters with no recorded gradient are
  // treated as zero-gradient (weight decay still applies). A non-finite
  // gradient rejects the whole step, naming the offending parameter.
  void step(ParamStore<T>& store) {
    for (const auto& [path, g] : store.grads)
      for (T x : g.data)
        if (!std::isfinite(x))
          throw DomainError("optimizer: non-finite gradient for parameter '" + path +
                            "'; step rejected");
    ++step_count;
    double bc1 = 1.0 - std::pow(hp.beta1, double(step_count));
    double bc2 = 1.0 - std::pow(hp.beta2, double(step_count));
    for (auto& [path, value] : store.values) {
      auto git = store.grads.find(path);
      const Tensor<T>* grad = git == store.grads.end() ? nullptr : &git->second;
      Tensor<T>& m1 = moments(m, path, value.dims);
      Tensor<T>& m2 = moments(v, path, value.dims);
      T decay = T(1.0 - hp.lr * hp.weight_decay);
      for (size_t i = 0; i < value.data.size(); ++i) {
        double g = grad ? double(grad->data[i]) : 0.0;
        double mi = hp.beta1 * double(m1.data[i]) + (1.0 - hp.beta1) * g;
        double vi = hp.beta2 * double(m2.data[i]) + (1.0 - hp.beta2) * g * g;
        m1.data[i] = T(mi);
        m2.data[i] = T(vi);
        double update = hp.lr * (mi / bc1) / (std::sqrt(vi / bc2) + hp.eps);
        value.data[i] = decay * value.data[i] - T(update);
      }
    }
  }

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir / "m");
    std::filesystem::create_directories(dir / "v");
    for (const auto& [k, t] : m) save_ptns(t, dir / "m" / (k + ".ptns"));
    for (const auto& [k, t] : v) save_ptns(t, dir / "v" / (k + ".ptns"));
    nlohmann::json st;
    st["step_count"] = step_count;
    st["lr"] = hp.lr;
    st["beta1"] = hp.beta1;
    st["beta2"] = hp.beta2;
    st["eps"] = hp.eps;
    st["weight_decay"] = hp.weight_decay;
    nlohmann::json keys = nlohmann::json::array();
    for (const auto& [k, t] : m) keys.push_back(k);
    st["parameters"] = keys;
    std::ofstream f(dir / "state.json");
    f << st.dump(2) << "\n";
  }

  static AdamW load(const std::filesystem::path& dir) {
    std::ifstream f(dir / "state.json");
    if (!f) throw IoError("missing optimizer state: " + (dir / "state.json").string());
    nlohmann::json st = nlohmann::json::parse(f);
    AdamW out;
    out.step_count = st.at("step_count").get<int64_t>();
    out.hp.lr = st.at("lr").get<double>();
    out.hp.beta1 = st.at("beta1").get<double>();
    out.hp.beta2 = st.at("beta2").get<double>();
    out.hp.eps = st.at("eps").get<double>();
    out.hp.weight_decay = st.at("weight_decay").get<double>();
    for (const auto& k : st.at("parameters")) {
      std::string key = k.get<std::string>();
      out.m.emplace(key, load_ptns<T>(dir / "m" / (key + ".ptns")));
      out.v.emplace(key, load_ptns<T>(dir / "v" / (key + ".ptns")));
    }
    return out;
  }

 private:
  Tensor<T>& moments(std::map<std::string, Tensor<T>>& side, const std::string& path,
                     const Dims& dims) {
    auto it = side.find(path);
    if (it == side.end()) it = side.emplace(path, Tensor<T>::zeros(dims)).first;
    return it->second;
  }
};

}  // namespace pcaagg
