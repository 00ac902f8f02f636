#include <doctest.h>

#include <filesystem>

#include "pcaagg/costvolume.hpp"
#include "test_util.hpp"

using namespace pcaagg;

TEST_CASE("cost volume: orthogonal and identical vectors") {
  Tensor<double> visual({1, 1, 2}, {1, 0});
  Tensor<double> text({2, 2}, {0, 1, 0.3, 0.4});
  Tensor<double> s = build_cost_volume(visual, text);
  CHECK(s(0, 0, 0) == doctest::Approx(0.0));  // (1,0) vs (0,1)

  Tensor<double> visual2({1, 1, 2}, {0.3, 0.4});
  Tensor<double> s2 = build_cost_volume(visual2, text);
  CHECK(s2(0, 0, 1) == doctest::Approx(1.0));  // self-similarity
}

TEST_CASE("cost volume matches a double-loop cosine oracle") {
  detail::Rng rng(500);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> visual = Tensor<double>::randn({2, 2, 4}, rng);
    Tensor<double> text = Tensor<double>::randn({3, 4}, rng);
    Tensor<double> s = build_cost_volume(visual, text);
    for (int64_t i = 0; i < 2; ++i)
      for (int64_t j = 0; j < 2; ++j)
        for (int64_t n = 0; n < 3; ++n) {
          double dot = 0, nv = 0, nt = 0;
          for (int64_t c = 0; c < 4; ++c) {
            dot += visual(i, j, c) * text(n, c);
            nv += visual(i, j, c) * visual(i, j, c);
            nt += text(n, c) * text(n, c);
          }
          double expected = dot / (std::sqrt(nv) * std::sqrt(nt));
          CHECK(std::abs(s(i, j, n) - expected) < 1e-6);
          CHECK(std::abs(s(i, j, n)) <= 1.0 + 1e-5);
        }
  }
}

TEST_CASE("cost volume is invariant to positive rescaling") {
  detail::Rng rng(501);
  Tensor<float> visual = Tensor<float>::randn({3, 3, 8}, rng);
  Tensor<float> text = Tensor<float>::randn({4, 8}, rng);
  Tensor<float> s = build_cost_volume(visual, text);

  Tensor<float> visual2 = visual;
  for (int64_t c = 0; c < 8; ++c) visual2(1, 2, c) *= 37.5f;
  Tensor<float> text2 = text;
  for (int64_t c = 0; c < 8; ++c) text2(2, c) *= 0.003f;
  Tensor<float> s2 = build_cost_volume(visual2, text2);
  for (size_t i = 0; i < s.data.size(); ++i)
    CHECK(std::abs(double(s.data[i]) - double(s2.data[i])) < 1e-6);
}

TEST_CASE("cost volume rejects channel mismatch") {
  Graph<double> g;
  auto v = g.leaf(Tensor<double>({2, 2, 4}));
  auto t = g.leaf(Tensor<double>({3, 5}));
  CHECK_THROWS_AS(build_cost_volume(v, t), ShapeError);
}

TEST_CASE("embed_cost_volume degenerate and identity cases") {
  Graph<double> g;
  detail::Rng rng(502);
  auto s = g.leaf(Tensor<double>::randn({2, 3, 2}, rng));

  // all-zero weight: every channel is the bias constant
  auto w0 = g.leaf(Tensor<double>({4, 1, 1, 1}));
  auto b0 = g.leaf(Tensor<double>({4}, {0.5, -1, 2, 0}));
  auto v0 = embed_cost_volume(s, w0, b0);
  CHECK(v0.dims() == Dims{2, 3, 2, 4});
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t j = 0; j < 3; ++j)
      for (int64_t n = 0; n < 2; ++n) {
        CHECK(v0.value()(i, j, n, 0) == 0.5);
        CHECK(v0.value()(i, j, n, 1) == -1.0);
      }

  // C=1, weight 1, bias 0 reproduces S
  auto w1 = g.leaf(Tensor<double>({1, 1, 1, 1}, {1}));
  auto b1 = g.leaf(Tensor<double>({1}));
  auto v1 = embed_cost_volume(s, w1, b1);
  CHECK(v1.value().data == s.value().data);
}

TEST_CASE("gradient flows from the embedding back to encoder outputs") {
  Graph<double> g;
  detail::Rng rng(503);
  auto visual = g.leaf(Tensor<double>::randn({2, 2, 4}, rng), true);
  auto text = g.leaf(Tensor<double>::randn({3, 4}, rng), true);
  auto w = g.leaf(Tensor<double>::randn({4, 1, 1, 1}, rng), true);
  auto b = g.leaf(Tensor<double>({4}), true);
  auto v = embed_cost_volume(build_cost_volume(visual, text), w, b);
  g.backward(sum(mul(v, v)));
  double vg = 0, tg = 0;
  for (double x : visual.grad().data) vg += std::abs(x);
  for (double x : text.grad().data) tg += std::abs(x);
  CHECK(vg > 0.0);
  CHECK(tg > 0.0);
}

TEST_CASE("build_cost_volume gradient vs finite differences") {
  Tensor<double> visual = testutil::random_tensor({2, 2, 3}, 504);
  Tensor<double> text = testutil::random_tensor({2, 3}, 505);
  auto rep = testutil::fd_check({{"v", &visual}, {"t", &text}},
                                [](Graph<double>& g, auto& nodes) {
                                  auto s = build_cost_volume(nodes["v"], nodes["t"]);
                                  return sum(mul(s, s));
                                });
  CHECK(rep.pass);
}

TEST_CASE("synthesize_task: noiseless tasks classify perfectly") {
  TaskParams p;
  p.height = 8;
  p.width = 8;
  p.num_classes = 4;
  p.enc_channels = 16;
  p.sigma = 0.0;
  p.rho = 2.0;
  SyntheticTask<double> task = synthesize_task<double>(p, 9);
  Tensor<double> s = build_cost_volume(task.visual, task.text);
  std::vector<int> pred = argmax_last(s);
  for (int64_t i = 0; i < p.height; ++i)
    for (int64_t j = 0; j < p.width; ++j)
      CHECK(pred[size_t(i * p.width + j)] == task.label_at_low_res(i, j));
}

TEST_CASE("synthesize_task is deterministic under seed") {
  TaskParams p;
  p.height = 8;
  p.width = 8;
  p.num_classes = 4;
  p.enc_channels = 8;
  SyntheticTask<float> a = synthesize_task<float>(p, 1234);
  SyntheticTask<float> b = synthesize_task<float>(p, 1234);
  CHECK(a.visual.data == b.visual.data);
  CHECK(a.text.data == b.text.data);
  CHECK(a.labels == b.labels);
  CHECK(a.seen == b.seen);
  SyntheticTask<float> c = synthesize_task<float>(p, 1235);
  CHECK(a.visual.data != c.visual.data);
}

TEST_CASE("synthesize_task: more classes than channels is invalid") {
  TaskParams p;
  p.num_classes = 40;
  p.enc_channels = 32;
  CHECK_THROWS_AS(synthesize_task<float>(p, 0), ConfigError);
}

TEST_CASE("synthesize_task: nearest-prototype accuracy above 0.99 at sigma 0.1") {
  // Monte-Carlo over 10 seeds on a 64x64 grid.
  TaskParams p;
  p.height = 64;
  p.width = 64;
  p.num_classes = 8;
  p.enc_channels = 32;
  p.sigma = 0.1;
  p.rho = 4.0;
  int64_t correct = 0, total = 0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    SyntheticTask<float> task = synthesize_task<float>(p, seed);
    Tensor<float> s = build_cost_volume(task.visual, task.text);
    std::vector<int> pred = argmax_last(s);
    for (int64_t i = 0; i < p.height; ++i)
      for (int64_t j = 0; j < p.width; ++j) {
        correct += pred[size_t(i * p.width + j)] == task.label_at_low_res(i, j);
        ++total;
      }
  }
  CHECK(double(correct) / double(total) > 0.99);
}

TEST_CASE("synthesize_task: seen split has both sides when enabled") {
  TaskParams p;
  p.num_classes = 8;
  p.enc_channels = 16;
  p.seen_fraction = 0.75;
  for (uint64_t seed = 0; seed < 5; ++seed) {
    SyntheticTask<float> task = synthesize_task<float>(p, seed);
    int64_t seen = 0;
    for (uint8_t s : task.seen) seen += s;
    CHECK(seen >= 1);
    CHECK(seen <= p.num_classes - 1);
  }
}

TEST_CASE("task directory round-trip") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "pcaagg_task_test";
  fs::remove_all(dir);
  TaskParams p;
  p.height = 8;
  p.width = 8;
  p.num_classes = 4;
  p.enc_channels = 8;
  SyntheticTask<float> task = synthesize_task<float>(p, 77);
  save_task(task, dir);
  SyntheticTask<float> back = load_task<float>(dir);
  CHECK(back.visual.data == task.visual.data);
  CHECK(back.text.data == task.text.data);
  CHECK(back.labels == task.labels);
  CHECK(back.seen == task.seen);
  CHECK(back.seed == task.seed);
  CHECK(back.class_names == task.class_names);
  fs::remove_all(dir);
}
