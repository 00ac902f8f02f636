// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Criteria marked with a runtime budget also fail on overrun.

#include <atomic>
#include <chrono>
#include <iostream>
#include <thread>

#include "attention_reference.hpp"
#include "pcaagg/experiment.hpp"
#include "pcaagg/gradcheck.hpp"

using namespace pcaagg;
using Clock = std::chrono::steady_clock;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int criterion, const std::string& name, bool pass, const std::string& detail) {
  std::cout << (pass ? "[PASS] " : "[FAIL] ") << "criterion " << criterion << ": " << name;
  if (!detail.empty()) std::cout << " (" << detail << ")";
  std::cout << std::endl;
  if (!pass) ++failures;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

double elapsed(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Tensor<double> randn(Dims dims, uint64_t seed, double scale = 1.0) {
  detail::Rng rng(seed);
  return Tensor<double>::randn(std::move(dims), rng, scale);
}

// FD harness over the parameters of a store plus extra leaves.
template <typename BuildFn>
GradCheckReport fd_store(ParamStore<double>& store,
                         std::vector<std::pair<std::string, Tensor<double>*>> extra, BuildFn build,
                         double tol) {
  std::vector<std::pair<std::string, Tensor<double>*>> leaves = extra;
  for (auto& [k, v] : store.values) leaves.emplace_back(k, &v);
  GradObjective f = [&](bool want, std::map<std::string, Tensor<double>>* grads) {
    Graph<double> g;
    ParamBinding<double> binding(g, store);
    std::map<std::string, DiffNode<double>> nodes;
    for (auto& [name, tensor] : extra) nodes[name] = g.leaf(*tensor, true);
    DiffNode<double> loss = build(g, binding, nodes);
    double v = loss.value().data[0];
    if (want) {
      g.backward(loss);
      store.grads.clear();
      binding.export_grads();
      for (auto& [k, gv] : store.grads) (*grads)[k] = gv;
      for (auto& [name, tensor] : extra) (*grads)[name] = nodes[name].grad();
    }
    return v;
  };
  return check_gradients(f, leaves, 1e-5, tol);
}

template <typename BuildFn>
GradCheckReport fd_leaves(std::vector<std::pair<std::string, Tensor<double>*>> leaves,
                          BuildFn build, double tol = 1e-4) {
  GradObjective f = [&](bool want, std::map<std::string, Tensor<double>>* grads) {
    Graph<double> g;
    std::map<std::string, DiffNode<double>> nodes;
    for (auto& [name, tensor] : leaves) nodes[name] = g.leaf(*tensor, true);
    DiffNode<double> loss = build(g, nodes);
    double v = loss.value().data[0];
    if (want) {
      g.backward(loss);
      for (auto& [name, tensor] : leaves) (*grads)[name] = nodes[name].grad();
    }
    return v;
  };
  return check_gradients(f, leaves, 1e-5, tol);
}

// ---------------------------------------------------------------------------

void criterion_1_gradient_suite() {
  auto t0 = Clock::now();
  double worst = 0;
  std::string worst_what;
  bool ok = true;
  auto track = [&](const char* what, const GradCheckReport& rep) {
    ok = ok && rep.pass;
    if (rep.max_rel_err() > worst) {
      worst = rep.max_rel_err();
      worst_what = what;
    }
  };

  // elementwise ops
  {
    Tensor<double> a = randn({3, 4}, 11);
    Tensor<double> b = randn({4}, 12);
    for (EwOp op : {EwOp::Add, EwOp::Sub, EwOp::Mul, EwOp::Div}) {
      Tensor<double> bb = b;
      if (op == EwOp::Div)
        for (double& x : bb.data) x = 1.0 + std::abs(x);
      track("elementwise", fd_leaves({{"a", &a}, {"b", &bb}}, [&](Graph<double>& g, auto& n) {
              return sum(mul(elementwise(op, n["a"], n["b"]), n["a"]));
            }));
    }
  }
  // matmul (plain and batched)
  {
    Tensor<double> a = randn({3, 4}, 13);
    Tensor<double> b = randn({4, 2}, 14);
    track("matmul", fd_leaves({{"a", &a}, {"b", &b}}, [](Graph<double>& g, auto& n) {
            auto y = matmul(n["a"], n["b"]);
            return sum(mul(y, y));
          }));
    Tensor<double> ab = randn({2, 3, 4}, 15);
    track("matmul_batched", fd_leaves({{"a", &ab}, {"b", &b}}, [](Graph<double>& g, auto& n) {
            auto y = matmul(n["a"], n["b"]);
            return sum(mul(y, y));
          }));
  }
  // softmax
  {
    Tensor<double> x = randn({4, 5}, 16);
    Tensor<double> w = randn({4, 5}, 17);
    track("softmax", fd_leaves({{"x", &x}}, [&](Graph<double>& g, auto& n) {
            return sum(mul(softmax(n["x"], 1), g.constant(w)));
          }));
  }
  // activations
  for (Activation act : {Activation::Relu, Activation::Gelu, Activation::EluPlusOne}) {
    Tensor<double> x = randn({9}, 18);
    if (act == Activation::Relu)
      for (double& v : x.data) v += (v >= 0 ? 0.5 : -0.5);
    track("activation", fd_leaves({{"x", &x}}, [&](Graph<double>& g, auto& n) {
            auto y = activation(act, n["x"]);
            return sum(mul(y, y));
          }));
  }
  // normalize_l2
  {
    Tensor<double> x = randn({3, 5}, 19);
    Tensor<double> w = randn({3, 5}, 20);
    track("normalize_l2", fd_leaves({{"x", &x}}, [&](Graph<double>& g, auto& n) {
            return sum(mul(normalize_l2(n["x"], 1), g.constant(w)));
          }));
  }
  // conv2d, both kernel sizes
  for (int64_t k : {int64_t(1), int64_t(3)}) {
    Tensor<double> x = randn({2, 3, 4, 4}, 21 + uint64_t(k));
    Tensor<double> w = randn({2, 3, k, k}, 23 + uint64_t(k), 0.5);
    Tensor<double> b = randn({2}, 25 + uint64_t(k));
    track("conv2d", fd_leaves({{"x", &x}, {"w", &w}, {"b", &b}}, [](Graph<double>& g, auto& n) {
            auto y = conv2d(n["x"], n["w"], n["b"]);
            return sum(mul(y, y));
          }));
  }
  // batchnorm at its BN-path tolerance
  {
    Tensor<double> x = randn({3, 2, 2, 2}, 27);
    Tensor<double> gamma = randn({2}, 28, 0.3);
    for (double& v : gamma.data) v += 1.0;
    Tensor<double> beta = randn({2}, 29, 0.3);
    auto rep = fd_leaves(
        {{"x", &x}, {"gamma", &gamma}, {"beta", &beta}},
        [](Graph<double>& g, auto& n) {
          BatchNormState<double> st;
          auto y = batchnorm(n["x"], n["gamma"], n["beta"], st, BnMode::Train);
          return sum(mul(y, y));
        },
        1e-3);
    ok = ok && rep.pass;
  }
  // layer_norm, upsample, cross-entropy
  {
    Tensor<double> x = randn({3, 4}, 30);
    Tensor<double> gamma = randn({4}, 31, 0.2);
    for (double& v : gamma.data) v += 1.0;
    Tensor<double> beta = randn({4}, 32, 0.2);
    track("layer_norm",
          fd_leaves({{"x", &x}, {"gamma", &gamma}, {"beta", &beta}}, [](Graph<double>& g, auto& n) {
            auto y = layer_norm(n["x"], n["gamma"], n["beta"]);
            return sum(mul(y, y));
          }));
    Tensor<double> u = randn({2, 3, 2}, 33);
    track("upsample", fd_leaves({{"x", &u}}, [](Graph<double>& g, auto& n) {
            auto y = upsample_bilinear(n["x"], 3);
            return sum(mul(y, y));
          }));
    Tensor<double> logits = randn({6, 4}, 34);
    std::vector<int> labels = {0, 3, kIgnoreLabel, 1, 2, 2};
    track("cross_entropy", fd_leaves({{"l", &logits}}, [&](Graph<double>& g, auto& n) {
            return cross_entropy_masked(n["l"], labels);
          }));
  }

  // end-to-end total loss on the tiny config, full parameter sweep
  bool e2e_ok = false;
  double e2e_err = 0;
  {
    ModelConfig cfg;
    cfg.height = 4;
    cfg.width = 4;
    cfg.num_classes = 3;
    cfg.channels = 8;
    cfg.enc_channels = 8;
    cfg.experts = 2;
    cfg.num_blocks = 2;
    cfg.attention.heads = 2;
    cfg.attention.window = 2;
    cfg.upsample = 2;
    cfg.seed = 35;
    TaskParams tp;
    tp.height = 4;
    tp.width = 4;
    tp.num_classes = 3;
    tp.enc_channels = 8;
    tp.upsample = 2;
    tp.sigma = 0.05;
    tp.rho = 1.0;
    SyntheticTask<double> task = synthesize_task<double>(tp, 35);
    Model<double> model = Model<double>::init(cfg);
    auto rep = fd_store(
        model.params, {},
        [&](Graph<double>& g, ParamBinding<double>& binding, auto&) {
          ForwardResult<double> fwd = model.forward(g, binding, task, BnMode::Train);
          auto l_sup = supervised_loss(fwd.logits, task.labels);
          auto l_od = fod_loss(fwd.pairs, cfg.fod_per_class, cfg.fod_detach);
          return total_loss(l_sup, l_od, cfg.lambda);
        },
        1e-3);
    e2e_ok = rep.pass;
    e2e_err = rep.max_rel_err();
  }

  double dt = elapsed(t0);
  bool pass = ok && e2e_ok && dt < 120.0;
  report(1, "gradient suite (ops < 1e-4, BN/e2e < 1e-3, double precision)", pass,
         "worst op rel err " + fmt(worst) + ", e2e rel err " + fmt(e2e_err) + ", " + fmt(dt) +
             " s of 120 s budget");
}

void criterion_2_cost_volume_oracle() {
  bool ok = true;
  double worst = 0;
  detail::Rng rng(200);
  for (int trial = 0; trial < 100; ++trial) {
    int64_t H = 2 + int64_t(rng.below(3));
    int64_t W = 2 + int64_t(rng.below(3));
    int64_t N = 2 + int64_t(rng.below(3));
    int64_t Ce = 3 + int64_t(rng.below(6));
    Tensor<double> visual = Tensor<double>::randn({H, W, Ce}, rng);
    Tensor<double> text = Tensor<double>::randn({N, Ce}, rng);
    Tensor<double> s = build_cost_volume(visual, text);
    for (int64_t i = 0; i < H && ok; ++i)
      for (int64_t j = 0; j < W && ok; ++j)
        for (int64_t n = 0; n < N && ok; ++n) {
          double dot = 0, nv = 0, nt = 0;
          for (int64_t c = 0; c < Ce; ++c) {
            dot += visual(i, j, c) * text(n, c);
            nv += visual(i, j, c) * visual(i, j, c);
            nt += text(n, c) * text(n, c);
          }
          double expected = dot / (std::sqrt(nv) * std::sqrt(nt));
          worst = std::max(worst, std::abs(s(i, j, n) - expected));
          ok = ok && std::abs(s(i, j, n) - expected) < 1e-6;
          ok = ok && std::abs(s(i, j, n)) <= 1.0 + 1e-5;
        }
    // positive-rescaling invariance
    Tensor<double> visual2 = visual;
    for (int64_t c = 0; c < Ce; ++c) visual2(0, 0, c) *= 12.5;
    Tensor<double> text2 = text;
    for (int64_t c = 0; c < Ce; ++c) text2(0, c) *= 0.004;
    Tensor<double> s2 = build_cost_volume(visual2, text2);
    for (size_t i = 0; i < s.data.size(); ++i)
      ok = ok && std::abs(s.data[i] - s2.data[i]) < 1e-6;
  }
  report(2, "cost volume matches the double-loop cosine oracle on 100 instances", ok,
         "max deviation " + fmt(worst));
}

void criterion_3_coefficients_and_integration() {
  bool ok = true;
  // probability vectors everywhere
  {
    ParamStore<double> store;
    register_epl(store, "epl.", 8, 4, 300);
    Graph<double> g;
    ParamBinding<double> binding(g, store);
    auto a = g.leaf(randn({3, 3, 2, 16}, 301));
    auto p = coefficient_map(a, binding, "epl.");
    const Tensor<double>& pv = p.value();
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 3; ++j)
        for (int64_t n = 0; n < 2; ++n) {
          double s = 0;
          for (int64_t z = 0; z < 4; ++z) {
            ok = ok && pv(i, j, n, z) >= 0.0;
            s += pv(i, j, n, z);
          }
          ok = ok && std::abs(s - 1.0) < 1e-6;
        }
  }
  // integrate vs triple-loop oracle
  {
    Graph<double> g;
    std::vector<Tensor<double>> dz;
    for (uint64_t z = 0; z < 3; ++z) dz.push_back(randn({2, 3, 2, 4}, 310 + z));
    auto p = softmax(g.leaf(randn({2, 3, 2, 3}, 313)), 3);
    auto r = integrate<double>({g.leaf(dz[0]), g.leaf(dz[1]), g.leaf(dz[2])}, p);
    const Tensor<double>& pv = p.value();
    for (int64_t i = 0; i < 2; ++i)
      for (int64_t j = 0; j < 3; ++j)
        for (int64_t n = 0; n < 2; ++n)
          for (int64_t c = 0; c < 4; ++c) {
            double expected = 0;
            for (int64_t z = 0; z < 3; ++z) expected += pv(i, j, n, z) * dz[size_t(z)](i, j, n, c);
            ok = ok && std::abs(r.value()(i, j, n, c) - expected) < 1e-6;
          }
  }
  // Z=1 reduces to a pass-through
  {
    Graph<double> g;
    Tensor<double> d1 = randn({2, 2, 2, 4}, 320);
    auto r = integrate<double>({g.leaf(d1)}, g.leaf(Tensor<double>::full({2, 2, 2, 1}, 1.0)));
    ok = ok && r.value().data == d1.data;

    ParamStore<double> store;
    register_epl(store, "epl.", 8, 1, 321);
    ParamBinding<double> binding(g, store);
    auto p1 = coefficient_map(g.leaf(randn({2, 2, 2, 16}, 322)), binding, "epl.");
    for (double v : p1.value().data) ok = ok && v == 1.0;
  }
  report(3, "coefficient fields are probability vectors; integrate matches the loop oracle", ok,
         "");
}

void criterion_4_fod_values() {
  Graph<double> g;
  Tensor<double> b = randn({3, 3, 2, 4}, 400);
  double coupled = fod_loss<double>({{g.leaf(b), g.leaf(b)}}).value().data[0];
  bool ok = std::abs(coupled - 1.0) < 1e-6;

  Tensor<double> bo = Tensor<double>::zeros({2, 2, 1, 4});
  Tensor<double> eo = Tensor<double>::zeros({2, 2, 1, 4});
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t j = 0; j < 2; ++j) {
      bo(i, j, 0, 0) = 1.0 + double(i + j);
      eo(i, j, 0, 2) = 0.5 + double(j);
    }
  double ortho = fod_loss<double>({{g.leaf(bo), g.leaf(eo)}}).value().data[0];
  ok = ok && ortho < 1e-10;

  Tensor<double> b2({2, 1, 1, 2}, {1, 0, 1, 0});
  Tensor<double> e2({2, 1, 1, 2});
  e2(0, 0, 0, 0) = 0.5;
  e2(0, 0, 0, 1) = std::sqrt(3.0) / 2;
  e2(1, 0, 0, 0) = -0.5;
  e2(1, 0, 0, 1) = std::sqrt(3.0) / 2;
  double quarter = fod_loss<double>({{g.leaf(b2), g.leaf(e2)}}).value().data[0];
  ok = ok && std::abs(quarter - 0.25) < 1e-15;

  report(4, "orthogonalization loss values: coupled=1, orthogonal<1e-10, two-pixel=0.25", ok,
         "coupled " + fmt(coupled) + ", orthogonal " + fmt(ortho) + ", two-pixel " +
             fmt(quarter));
}

void criterion_5_fod_descent() {
  auto t0 = Clock::now();
  // Two linear maps of fixed random inputs; 500 steps at lr 1e-2, seed 0.
  const int64_t H = 4, W = 4, N = 2, C = 4, Fin = 6;
  detail::Rng rng(0);
  Tensor<double> x = Tensor<double>::randn({H * W, Fin}, rng);
  ParamStore<double> store;
  register_xavier(store, "map_b", {Fin, N * C}, Fin, N * C, 0);
  register_xavier(store, "map_e", {Fin, N * C}, Fin, N * C, 1);

  auto mean_abs = [&]() {
    Graph<double> g;
    ParamBinding<double> binding(g, store);
    auto b = reshape(matmul(g.constant(x), binding["map_b"]), {H, W, N, C});
    auto e = reshape(matmul(g.constant(x), binding["map_e"]), {H, W, N, C});
    return mean_abs_similarity<double>({b, e});
  };
  double initial = mean_abs();

  AdamW<double> opt;
  opt.hp.lr = 1e-2;
  opt.hp.weight_decay = 0.0;
  for (int step = 0; step < 500; ++step) {
    Graph<double> g;
    ParamBinding<double> binding(g, store);
    auto b = reshape(matmul(g.constant(x), binding["map_b"]), {H, W, N, C});
    auto e = reshape(matmul(g.constant(x), binding["map_e"]), {H, W, N, C});
    auto loss = fod_loss<double>({{b, e}});
    g.backward(loss);
    store.zero_grads();
    binding.export_grads();
    opt.step(store);
  }
  double final = mean_abs();
  double dt = elapsed(t0);
  bool pass = initial > 0.2 && final < 0.05 && dt < 60.0;
  report(5, "descent on the penalty alone drives mean |M| from > 0.2 to < 0.05", pass,
         "initial " + fmt(initial) + ", final " + fmt(final) + ", " + fmt(dt) +
             " s of 60 s budget");
}

void criterion_6_hiou_values() {
  auto round1 = [](double v) { return std::round(v * 10.0) / 10.0; };
  struct Row {
    double seen, unseen, expected;
  };
  // Published seen/unseen/h rows that reproduce under one-decimal rounding.
  std::vector<Row> rows = {{57.5, 44.9, 50.4},
                           {50.0, 31.7, 38.8},
                           {53.1, 47.2, 50.0},
                           {57.4, 27.4, 37.1},
                           {54.4, 19.0, 28.2}};
  bool ok = true;
  for (const Row& r : rows)
    ok = ok && std::abs(round1(compute_hiou(r.seen, r.unseen)) - r.expected) < 1e-9;
  ok = ok && std::abs(compute_hiou(0.42, 0.42) - 0.42) < 1e-15;
  ok = ok && compute_hiou(1.0, 0.0) == 0.0;
  report(6, "h-IoU reproduces published benchmark rows at one-decimal rounding", ok, "");
}

void criterion_7_miou_oracle() {
  bool ok = true;
  detail::Rng rng(700);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t n = 4, pixels = 64;  // 8x8 label maps
    std::vector<int> pred(pixels), gt(pixels);
    for (auto& v : pred) v = int(rng.below(n));
    for (auto& v : gt) v = int(rng.below(n));
    ConfusionMatrix cm(n);
    accumulate_confusion(pred, gt, cm);
    EvalReport rep = compute_miou(cm);
    double total = 0;
    int64_t defined = 0;
    for (int64_t c = 0; c < n; ++c) {
      int64_t inter = 0, uni = 0;
      for (int64_t p = 0; p < pixels; ++p) {
        bool in_pred = pred[size_t(p)] == c;
        bool in_gt = gt[size_t(p)] == c;
        inter += in_pred && in_gt;
        uni += in_pred || in_gt;
      }
      if (uni == 0) {
        ok = ok && !rep.per_class_iou[size_t(c)].has_value();
        continue;
      }
      ok = ok && rep.per_class_iou[size_t(c)].has_value();
      ok = ok && *rep.per_class_iou[size_t(c)] == double(inter) / double(uni);
      total += double(inter) / double(uni);
      ++defined;
    }
    ok = ok && rep.miou == total / double(defined);
  }
  // hand-enumerated 2x2 case
  ConfusionMatrix cm(2);
  accumulate_confusion({0, 1, 1, 1}, {0, 1, 0, 1}, cm);
  EvalReport rep = compute_miou(cm);
  ok = ok && std::abs(rep.miou - 7.0 / 12.0) < 1e-15;
  report(7, "mIoU matches the brute-force set computation exactly; 2x2 case = 7/12", ok, "");
}

void criterion_8_cca_sanity() {
  bool ok = true;
  double self_dev = 0, rot_dev = 0, worst_indep = 0;
  {
    detail::Rng rng(800);
    Tensor<double> x = Tensor<double>::randn({300, 8}, rng);
    self_dev = std::abs(cca_mean_correlation(x, x).mean_correlation - 1.0);
    ok = ok && self_dev < 1e-6;

    // orthogonal rotation via Gram-Schmidt columns
    Tensor<double> r = Tensor<double>::randn({8, 8}, rng);
    for (int64_t j = 0; j < 8; ++j) {
      for (int64_t k = 0; k < j; ++k) {
        double dot = 0;
        for (int64_t i = 0; i < 8; ++i) dot += r(i, j) * r(i, k);
        for (int64_t i = 0; i < 8; ++i) r(i, j) -= dot * r(i, k);
      }
      double nrm = 0;
      for (int64_t i = 0; i < 8; ++i) nrm += r(i, j) * r(i, j);
      nrm = std::sqrt(nrm);
      for (int64_t i = 0; i < 8; ++i) r(i, j) /= nrm;
    }
    Tensor<double> y({300, 8});
    for (int64_t i = 0; i < 300; ++i)
      for (int64_t j = 0; j < 8; ++j) {
        double s = 0;
        for (int64_t k = 0; k < 8; ++k) s += x(i, k) * r(k, j);
        y(i, j) = s;
      }
    rot_dev = std::abs(cca_mean_correlation(x, y).mean_correlation - 1.0);
    ok = ok && rot_dev < 1e-6;
  }
  for (uint64_t seed = 0; seed < 10; ++seed) {
    detail::Rng ra(810 + seed), rb(910 + seed);
    Tensor<double> x = Tensor<double>::randn({5000, 10}, ra);
    Tensor<double> y = Tensor<double>::randn({5000, 10}, rb);
    double corr = cca_mean_correlation(x, y).mean_correlation;
    worst_indep = std::max(worst_indep, corr);
    ok = ok && corr < 0.1;
  }
  report(8, "CCA sanity: self = 1, rotation invariant, independent pairs < 0.1", ok,
         "self dev " + fmt(self_dev) + ", rotation dev " + fmt(rot_dev) +
             ", worst independent " + fmt(worst_indep));
}

void criterion_9_toy_learning() {
  auto t0 = Clock::now();
  struct RunOutcome {
    double miou = 0;
    int64_t steps = 0;
    uint64_t trace_hash = 0;
  };
  auto run_one = [](Architecture arch, uint64_t seed) {
    ModelConfig cfg;  // desk defaults
    cfg.architecture = arch;
    cfg.seed = seed;
    TaskParams tp;
    tp.sigma = 0.05;
    SyntheticTask<float> task = synthesize_task<float>(tp, seed);
    Model<float> model = Model<float>::init(cfg);
    AdamW<float> opt;
    TrainParams train_params;
    train_params.steps = 500;
    train_params.eval_every = 20;
    train_params.early_stop_miou = arch == Architecture::Serial ? 0.80 : 0.90;
    TrainResult r = train(model, opt, task, train_params);
    RunOutcome out;
    out.miou = r.last_eval_miou;
    out.steps = r.steps_run;
    uint64_t h = 1469598103934665603ULL;
    for (const TraceRow& row : r.trace)
      h = detail::fnv1a_bytes(&row.total, sizeof(row.total), h);
    out.trace_hash = h;
    return out;
  };

  // 5 seeds x {parallel, serial}, plus a repeat of parallel seed 0 for the
  // per-seed determinism check; two workers.
  struct Job {
    Architecture arch;
    uint64_t seed;
  };
  std::vector<Job> jobs;
  for (uint64_t s = 0; s < 5; ++s) jobs.push_back({Architecture::Parallel, s});
  for (uint64_t s = 0; s < 5; ++s) jobs.push_back({Architecture::Serial, s});
  jobs.push_back({Architecture::Parallel, 0});
  std::vector<RunOutcome> outcomes(jobs.size());
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (size_t i; (i = next.fetch_add(1)) < jobs.size();)
      outcomes[i] = run_one(jobs[i].arch, jobs[i].seed);
  };
  std::thread w1(worker), w2(worker);
  w1.join();
  w2.join();

  double parallel_mean = 0, serial_mean = 0;
  int64_t max_steps = 0;
  for (size_t i = 0; i < 5; ++i) {
    parallel_mean += outcomes[i].miou;
    serial_mean += outcomes[i + 5].miou;
    max_steps = std::max({max_steps, outcomes[i].steps, outcomes[i + 5].steps});
  }
  parallel_mean /= 5;
  serial_mean /= 5;
  bool deterministic = outcomes[10].trace_hash == outcomes[0].trace_hash &&
                       outcomes[10].miou == outcomes[0].miou;
  double dt = elapsed(t0);
  bool pass = parallel_mean > 0.90 && serial_mean > 0.80 && max_steps <= 500 && deterministic &&
              dt < 600.0;
  report(9, "toy learning: parallel mean mIoU > 0.90, serial baseline > 0.80, within 500 steps",
         pass,
         "parallel " + fmt(parallel_mean) + ", serial " + fmt(serial_mean) + " (reported, not a margin assertion), max steps " +
             std::to_string(max_steps) + ", deterministic " + (deterministic ? "yes" : "no") +
             ", " + fmt(dt) + " s of 600 s budget");
}

void criterion_10_attention_oracles() {
  bool ok = true;
  double worst = 0;
  // windowed == dense when the window covers the grid
  for (int64_t size : {int64_t(2), int64_t(4)}) {
    ParamStore<double> store;
    register_transformer_block(store, "phi.", 8, 1000 + uint64_t(size));
    AttentionConfig cfg;
    cfg.heads = 2;
    cfg.window = size;
    Tensor<double> v = randn({size, size, 3, 8}, 1010 + uint64_t(size));
    Graph<double> g;
    ParamBinding<double> binding(g, store);
    auto y = spatial_aggregate(g.leaf(v), binding, "phi.", cfg);

    Tensor<double> x({3, size * size, 8});
    for (int64_t i = 0; i < size; ++i)
      for (int64_t j = 0; j < size; ++j)
        for (int64_t n = 0; n < 3; ++n)
          for (int64_t c = 0; c < 8; ++c) x(n, i * size + j, c) = v(i, j, n, c);
    Tensor<double> ref = testref::dense_softmax_block(x, store, "phi.", 2);
    for (int64_t i = 0; i < size; ++i)
      for (int64_t j = 0; j < size; ++j)
        for (int64_t n = 0; n < 3; ++n)
          for (int64_t c = 0; c < 8; ++c) {
            double dev = std::abs(y.value()(i, j, n, c) - ref(n, i * size + j, c));
            worst = std::max(worst, dev);
            ok = ok && dev < 1e-5;
          }
  }
  // exact permutation equivariances
  {
    ParamStore<double> store;
    register_transformer_block(store, "phi.", 8, 1020);
    register_transformer_block(store, "gamma.", 8, 1021);
    AttentionConfig cfg;
    cfg.heads = 2;
    cfg.window = 2;
    Tensor<double> v = randn({4, 4, 4, 8}, 1022);

    Graph<double> g;
    ParamBinding<double> binding(g, store);
    auto b = spatial_aggregate(g.leaf(v), binding, "phi.", cfg);
    std::vector<int> perm = {3, 1, 0, 2};
    Tensor<double> vp({4, 4, 4, 8});
    for (int64_t i = 0; i < 4; ++i)
      for (int64_t j = 0; j < 4; ++j)
        for (int64_t n = 0; n < 4; ++n)
          for (int64_t c = 0; c < 8; ++c) vp(i, j, n, c) = v(i, j, perm[size_t(n)], c);
    Graph<double> g2;
    ParamBinding<double> binding2(g2, store);
    auto bp = spatial_aggregate(g2.leaf(vp), binding2, "phi.", cfg);
    for (int64_t i = 0; i < 4 && ok; ++i)
      for (int64_t j = 0; j < 4 && ok; ++j)
        for (int64_t n = 0; n < 4 && ok; ++n)
          for (int64_t c = 0; c < 8 && ok; ++c)
            ok = bp.value()(i, j, n, c) == b.value()(i, j, perm[size_t(n)], c);

    auto e = class_aggregate(g.leaf(v), binding, "gamma.", cfg);
    Tensor<double> vswap = v;
    for (int64_t n = 0; n < 4; ++n)
      for (int64_t c = 0; c < 8; ++c)
        std::swap(vswap.data[size_t(((0 * 4 + 0) * 4 + n) * 8 + c)],
                  vswap.data[size_t(((3 * 4 + 2) * 4 + n) * 8 + c)]);
    Graph<double> g3;
    ParamBinding<double> binding3(g3, store);
    auto ep = class_aggregate(g3.leaf(vswap), binding3, "gamma.", cfg);
    for (int64_t n = 0; n < 4 && ok; ++n)
      for (int64_t c = 0; c < 8 && ok; ++c) {
        ok = ep.value()(0, 0, n, c) == e.value()(3, 2, n, c);
        ok = ok && ep.value()(3, 2, n, c) == e.value()(0, 0, n, c);
        ok = ok && ep.value()(1, 1, n, c) == e.value()(1, 1, n, c);
      }
  }
  report(10, "windowed attention equals the dense oracle; permutation equivariances exact", ok,
         "max dense deviation " + fmt(worst));
}

void criterion_11_parameter_accounting() {
  bool ok = true;
  for (auto [C, Z] : std::vector<std::pair<int64_t, int64_t>>{
           {8, 1}, {8, 2}, {16, 3}, {32, 5}, {64, 4}}) {
    ParamStore<float> store;
    register_epl(store, "epl.", C, Z, 1100);
    ok = ok && store.total_parameters() == epl_parameter_count(C, Z);
  }
  // model-level tally: per-block EPL subtree matches the closed form
  {
    ModelConfig cfg;  // desk defaults: Z=4, C=64
    cfg.seed = 1101;
    Model<float> model = Model<float>::init(cfg);
    ok = ok && model.params.total_parameters("block1.epl.") == epl_parameter_count(64, 4);
    ok = ok && model.params.total_parameters("block2.epl.") == epl_parameter_count(64, 4);
  }
  ModelConfig defaults;
  ok = ok && defaults.experts == 4 && defaults.lambda == 0.01;
  report(11, "parameter tallies match the closed-form count; defaults Z=4, lambda=0.01", ok, "");
}

void criterion_12_reproducibility() {
  fs::path dir = fs::temp_directory_path() / "pcaagg_acceptance_repro";
  fs::remove_all(dir);
  nlohmann::json j;
  j["schema_version"] = 1;
  j["model"] = {{"height", 8},   {"width", 8},   {"num_classes", 4}, {"channels", 16},
                {"enc_channels", 16}, {"experts", 2}, {"num_blocks", 2},  {"heads", 2},
                {"window", 4},   {"upsample", 2}};
  j["task"] = {{"sigma", 0.05}, {"rho", 2.0}};
  j["train"] = {{"steps", 30}, {"eval_every", 10}};
  ExperimentSpec spec = parse_spec(j);
  run_experiment(spec, 77, dir / "a");
  run_experiment(spec, 77, dir / "b");
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  };
  bool ok = slurp(dir / "a" / "trace.csv") == slurp(dir / "b" / "trace.csv");
  ok = ok && slurp(dir / "a" / "final_metrics.json") == slurp(dir / "b" / "final_metrics.json");
  ok = ok && !slurp(dir / "a" / "trace.csv").empty();
  fs::remove_all(dir);
  report(12, "identical spec + seed reproduce byte-identical trace.csv and final_metrics.json",
         ok, "");
}

}  // namespace

int main() {
  auto t0 = Clock::now();
  criterion_1_gradient_suite();
  criterion_2_cost_volume_oracle();
  criterion_3_coefficients_and_integration();
  criterion_4_fod_values();
  criterion_5_fod_descent();
  criterion_6_hiou_values();
  criterion_7_miou_oracle();
  criterion_8_cca_sanity();
  criterion_9_toy_learning();
  criterion_10_attention_oracles();
  criterion_11_parameter_accounting();
  criterion_12_reproducibility();
  std::cout << (failures == 0 ? "ALL CRITERIA PASSED" : "FAILURES: " + std::to_string(failures))
            << " (total " << fmt(elapsed(t0)) << " s)" << std::endl;
  return failures == 0 ? 0 : 1;
}
