#pragma once
// Cosine-similarity cost volume between per-pixel visual embeddings and
// per-class text embeddings, its channel embedding, and a synthetic task
// generator that stands in for real encoder outputs at desk scale.

#include <nlohmann/json.hpp>

#include "pcaagg/nn.hpp"
#include "pcaagg/param_store.hpp"

namespace pcaagg {

// S[h,w,n] = cos(visual[h,w,:], text[n,:]); both sides L2-normalized with
// eps 1e-8. visual [H,W,Ce], text [N,Ce] -> [H,W,N].
template <typename T>
DiffNode<T> build_cost_volume(DiffNode<T> visual, DiffNode<T> text) {
  const Dims& vd = visual.dims();
  const Dims& td = text.dims();
  if (vd.size() != 3 || td.size() != 2)
    throw ShapeError("build_cost_volume: expected visual[H,W,Ce], text[N,Ce]");
  if (vd[2] != td[1])
    throw ShapeError("build_cost_volume: channel widths disagree (" + std::to_string(vd[2]) +
                     " vs " + std::to_string(td[1]) + ")");
  int64_t H = vd[0], W = vd[1], Ce = vd[2], N = td[0];
  DiffNode<T> vn = normalize_l2(reshape(visual, {H * W, Ce}), 1, T(1e-8));
  DiffNode<T> tn = normalize_l2(text, 1, T(1e-8));
  DiffNode<T> s = matmul(vn, permute(tn, {1, 0}));
  return reshape(s, {H, W, N});
}

template <typename T>
Tensor<T> build_cost_volume(const Tensor<T>& visual, const Tensor<T>& text) {
  Graph<T> g;
  return build_cost_volume(g.constant(visual), g.constant(text)).value();
}

// Lift S[H,W,N] to V[H,W,N,C] with a 1->C 1x1 convolution over the flattened
// H*W*N support (a per-channel affine map of the similarity scalar).
template <typename T>
DiffNode<T> embed_cost_volume(DiffNode<T> s, DiffNode<T> weight, DiffNode<T> bias) {
  const Dims& sd = s.dims();
  if (sd.size() != 3) throw ShapeError("embed_cost_volume: expected S[H,W,N]");
  int64_t H = sd[0], W = sd[1], N = sd[2];
  int64_t C = weight.dims()[0];
  DiffNode<T> x = reshape(s, {1, 1, H * W, N});
  DiffNode<T> y = conv2d(x, weight, bias);            // [1,C,H*W,N]
  DiffNode<T> y2 = reshape(y, {C, H * W, N});
  return reshape(permute(y2, {1, 2, 0}), {H, W, N, C});
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

struct TaskParams {
  int64_t height = 16;
  int64_t width = 16;
  int64_t num_classes = 8;
  int64_t enc_channels = 32;
  double sigma = 0.05;        // visual embedding noise
  double rho = 4.0;           // spatial correlation length of the partition
  double seen_fraction = 0.75;
  double text_sigma = 0.0;    // optional text-side perturbation
  int64_t upsample = 4;       // label resolution = upsample * (height, width)
};

template <typename T>
struct SyntheticTask {
  Tensor<T> visual;                     // [H,W,Ce]
  Tensor<T> text;                       // [N,Ce]
  std::vector<int> labels;              // row-major [U*H, U*W], ignore = 255
  int64_t label_h = 0, label_w = 0;
  std::vector<uint8_t> seen;            // per class
  std::vector<std::string> class_names;
  uint64_t seed = 0;
  TaskParams params;

  int64_t height() const { return visual.dims[0]; }
  int64_t width() const { return visual.dims[1]; }
  int64_t num_classes() const { return text.dims[0]; }

  // Labels are constant on upsample x upsample blocks; this is the label of
  // the block owned by aggregation-resolution pixel (i,j).
  int label_at_low_res(int64_t i, int64_t j) const {
    int64_t u = params.upsample;
    return labels[size_t((i * u + u / 2) * label_w + (j * u + u / 2))];
  }

  uint64_t content_hash() const {
    uint64_t h = visual.content_hash();
    h ^= text.content_hash() + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h = detail::fnv1a_bytes(labels.data(), labels.size() * sizeof(int), h);
    return h;
  }
};

namespace detail {

// Truncated Gaussian blur along rows then columns, weights renormalized at
// the borders. rho = 0 leaves the field untouched.
template <typename T>
void gaussian_smooth_2d(Tensor<T>& field, double rho) {
  if (rho <= 0.0) return;
  int64_t H = field.dims[0], W = field.dims[1];
  int64_t radius = int64_t(std::ceil(3.0 * rho));
  std::vector<double> kernel(size_t(2 * radius + 1));
  for (int64_t d = -radius; d <= radius; ++d)
    kernel[size_t(d + radius)] = std::exp(-double(d * d) / (2.0 * rho * rho));
  Tensor<T> tmp(field.dims);
  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j) {
      double acc = 0, wsum = 0;
      for (int64_t d = -radius; d <= radius; ++d) {
        int64_t jj = j + d;
        if (jj < 0 || jj >= W) continue;
        acc += kernel[size_t(d + radius)] * double(field(i, jj));
        wsum += kernel[size_t(d + radius)];
      }
      tmp(i, j) = T(acc / wsum);
    }
  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j) {
      double acc = 0, wsum = 0;
      for (int64_t d = -radius; d <= radius; ++d) {
        int64_t ii = i + d;
        if (ii < 0 || ii >= H) continue;
        acc += kernel[size_t(d + radius)] * double(tmp(ii, j));
        wsum += kernel[size_t(d + radius)];
      }
      field(i, j) = T(acc / wsum);
    }
}

// Orthonormal rows via modified Gram-Schmidt on Gaussian draws.
template <typename T>
Tensor<T> orthonormal_rows(int64_t n, int64_t c, Rng& rng) {
  Tensor<T> m = Tensor<T>::randn({n, c}, rng);
  for (int64_t i = 0; i < n; ++i) {
    T* ri = m.data.data() + i * c;
    for (int64_t j = 0; j < i; ++j) {
      const T* rj = m.data.data() + j * c;
      T dot = 0;
      for (int64_t k = 0; k < c; ++k) dot += ri[k] * rj[k];
      for (int64_t k = 0; k < c; ++k) ri[k] -= dot * rj[k];
    }
    T nrm = 0;
    for (int64_t k = 0; k < c; ++k) nrm += ri[k] * ri[k];
    nrm = std::sqrt(nrm);
    for (int64_t k = 0; k < c; ++k) ri[k] /= nrm;
  }
  return m;
}

}  // namespace detail

// Deterministic under seed. Class prototypes are orthonormalized Gaussian
// rows; the label partition is the argmax of per-class smoothed noise fields
// sampled at aggregation resolution and stored block-upsampled at label
// resolution; the visual embedding is the pixel's prototype plus noise.
template <typename T>
SyntheticTask<T> synthesize_task(const TaskParams& p, uint64_t seed) {
  if (p.num_classes < 2) throw ConfigError("task: num_classes must be >= 2");
  if (p.num_classes > p.enc_channels)
    throw ConfigError("task: cannot draw " + std::to_string(p.num_classes) +
                      " orthogonal prototypes in " + std::to_string(p.enc_channels) +
                      " channels (invalid-config)");
  if (p.sigma < 0 || p.rho < 0) throw ConfigError("task: sigma and rho must be >= 0");
  if (p.upsample < 1) throw ConfigError("task: upsample must be >= 1");
  if (p.height < 1 || p.width < 1) throw ConfigError("task: height/width must be >= 1");

  detail::Rng rng(seed ^ 0xc0511aULL);
  SyntheticTask<T> task;
  task.seed = seed;
  task.params = p;

  Tensor<T> prototypes = detail::orthonormal_rows<T>(p.num_classes, p.enc_channels, rng);

  // Partition at aggregation resolution.
  std::vector<Tensor<T>> fields;
  fields.reserve(size_t(p.num_classes));
  for (int64_t n = 0; n < p.num_classes; ++n) {
    Tensor<T> f = Tensor<T>::randn({p.height, p.width}, rng);
    detail::gaussian_smooth_2d(f, p.rho);
    fields.push_back(std::move(f));
  }
  std::vector<int> low_labels(size_t(p.height * p.width));
  for (int64_t i = 0; i < p.height; ++i)
    for (int64_t j = 0; j < p.width; ++j) {
      int best = 0;
      for (int64_t n = 1; n < p.num_classes; ++n)
        if (fields[size_t(n)](i, j) > fields[size_t(best)](i, j)) best = int(n);
      low_labels[size_t(i * p.width + j)] = best;
    }

  task.label_h = p.height * p.upsample;
  task.label_w = p.width * p.upsample;
  task.labels.resize(size_t(task.label_h * task.label_w));
  for (int64_t i = 0; i < task.label_h; ++i)
    for (int64_t j = 0; j < task.label_w; ++j)
      task.labels[size_t(i * task.label_w + j)] =
          low_labels[size_t((i / p.upsample) * p.width + (j / p.upsample))];

  task.visual = Tensor<T>({p.height, p.width, p.enc_channels});
  for (int64_t i = 0; i < p.height; ++i)
    for (int64_t j = 0; j < p.width; ++j) {
      int lab = low_labels[size_t(i * p.width + j)];
      const T* proto = prototypes.data.data() + int64_t(lab) * p.enc_channels;
      T* dst = task.visual.data.data() + (i * p.width + j) * p.enc_channels;
      for (int64_t c = 0; c < p.enc_channels; ++c)
        dst[c] = proto[c] + T(p.sigma) * T(rng.normal());
    }

  task.text = prototypes;
  if (p.text_sigma > 0)
    for (T& x : task.text.data) x += T(p.text_sigma) * T(rng.normal());

  // Seen split: a seeded shuffle, first k classes seen. With a real split
  // enabled both sides are non-empty.
  std::vector<int> order(size_t(p.num_classes));
  for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[size_t(rng.below(uint64_t(i)))]);
  int64_t k = p.num_classes;
  if (p.seen_fraction < 1.0) {
    k = int64_t(std::lround(p.seen_fraction * double(p.num_classes)));
    k = std::clamp<int64_t>(k, 1, p.num_classes - 1);
  }
  task.seen.assign(size_t(p.num_classes), 0);
  for (int64_t i = 0; i < k; ++i) task.seen[size_t(order[size_t(i)])] = 1;

  task.class_names.resize(size_t(p.num_classes));
  for (int64_t n = 0; n < p.num_classes; ++n)
    task.class_names[size_t(n)] = "class_" + std::to_string(n);
  return task;
}

// ---------------------------------------------------------------------------
// Task directory I/O: visual.ptns, text.ptns, labels.ptns (f32 integers),
// meta.json.
// ---------------------------------------------------------------------------

template <typename T>
void save_task(const SyntheticTask<T>& task, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_ptns(task.visual, dir / "visual.ptns");
  save_ptns(task.text, dir / "text.ptns");
  Tensor<float> lab({task.label_h, task.label_w});
  for (size_t i = 0; i < task.labels.size(); ++i) lab.data[i] = float(task.labels[i]);
  save_ptns(lab, dir / "labels.ptns");

  nlohmann::json meta;
  meta["seed"] = task.seed;
  meta["sigma"] = task.params.sigma;
  meta["rho"] = task.params.rho;
  meta["seen_fraction"] = task.params.seen_fraction;
  meta["text_sigma"] = task.params.text_sigma;
  meta["upsample"] = task.params.upsample;
  meta["seen"] = std::vector<int>(task.seen.begin(), task.seen.end());
  meta["class_names"] = task.class_names;
  std::ofstream f(dir / "meta.json");
  f << meta.dump(2) << "\n";
}

template <typename T>
SyntheticTask<T> load_task(const std::filesystem::path& dir) {
  SyntheticTask<T> task;
  task.visual = load_ptns<T>(dir / "visual.ptns");
  task.text = load_ptns<T>(dir / "text.ptns");
  Tensor<float> lab = load_ptns<float>(dir / "labels.ptns");
  task.label_h = lab.dims[0];
  task.label_w = lab.dims[1];
  task.labels.resize(lab.data.size());
  for (size_t i = 0; i < lab.data.size(); ++i) task.labels[i] = int(std::lround(lab.data[i]));
  std::ifstream f(dir / "meta.json");
  if (!f) throw IoError("missing meta.json in " + dir.string());
  nlohmann::json meta = nlohmann::json::parse(f);
  task.seed = meta.at("seed").get<uint64_t>();
  task.params.sigma = meta.at("sigma").get<double>();
  task.params.rho = meta.at("rho").get<double>();
  task.params.seen_fraction = meta.at("seen_fraction").get<double>();
  task.params.text_sigma = meta.value("text_sigma", 0.0);
  task.params.upsample = meta.at("upsample").get<int64_t>();
  task.params.height = task.visual.dims[0];
  task.params.width = task.visual.dims[1];
  task.params.num_classes = task.text.dims[0];
  task.params.enc_channels = task.text.dims[1];
  std::vector<int> seen = meta.at("seen").get<std::vector<int>>();
  task.seen.assign(seen.begin(), seen.end());
  task.class_names = meta.at("class_names").get<std::vector<std::string>>();
  return task;
}

}  // namespace pcaagg
