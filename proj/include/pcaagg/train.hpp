#pragma once
// Seeded, deterministic training loop: forward -> losses -> backward ->
// AdamW step, with a per-step trace, optional evaluation cadence / early
// stop, feature-dump hooks, and a divergence guard that keeps the last good
// parameter state.

#include <functional>

#include "pcaagg/metrics.hpp"
#include "pcaagg/model.hpp"
#include "pcaagg/optimizer.hpp"

namespace pcaagg {

struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& m) : std::runtime_error(m) {}
};

struct TrainParams {
  int64_t steps = 500;
  AdamWParams opt;
  int64_t eval_every = 25;       // 0 = never evaluate during training
  double early_stop_miou = 0.0;  // 0 = disabled; stop at first eval above
  int64_t dump_every = 0;        // 0 = no feature dumps
};

struct TraceRow {
  int64_t step = 0;
  double l_sup = 0.0;
  double l_od = 0.0;
  double total = 0.0;
  std::vector<double> mean_abs_sim;  // per block
};

template <typename T>
struct DumpSet {
  int64_t step = 0;
  // [block][expert] expert outputs, [block] stream values.
  std::vector<std::vector<Tensor<T>>> expert_outputs;
  std::vector<Tensor<T>> spatial_streams;
  std::vector<Tensor<T>> semantic_streams;
};

struct TrainResult {
  int64_t steps_run = 0;
  bool early_stopped = false;
  bool diverged = false;
  double last_eval_miou = -1.0;
  std::vector<TraceRow> trace;
};

template <typename T>
struct TrainHooks {
  std::function<void(const TraceRow&)> on_step;
  std::function<void(const DumpSet<T>&)> on_dump;
  // Called when the loss goes non-finite, with the last finite parameter
  // state, before DivergenceError is thrown.
  std::function<void(const ParamStore<T>&, int64_t last_good_step)> on_divergence;
};

template <typename T>
double train_miou_from_logits(const Tensor<T>& logits, const SyntheticTask<T>& task) {
  std::vector<int> pred = argmax_last(logits);
  ConfusionMatrix cm(task.num_classes());
  accumulate_confusion(pred, task.labels, cm);
  return compute_miou(cm).miou;
}

template <typename T>
TrainResult train(Model<T>& model, AdamW<T>& opt, const SyntheticTask<T>& task,
                  const TrainParams& tp, const TrainHooks<T>& hooks = {}) {
  TrainResult result;
  ParamStore<T> last_good = model.params;
  std::map<std::string, BatchNormState<T>> last_good_bn = model.bn_states;
  int64_t last_good_step = 0;

  bool parallel = model.cfg.architecture == Architecture::Parallel;
  for (int64_t step = 1; step <= tp.steps; ++step) {
    Graph<T> g;
    ParamBinding<T> binding(g, model.params);
    ForwardResult<T> fwd = model.forward(g, binding, task, BnMode::Train);
    DiffNode<T> l_sup = supervised_loss(fwd.logits, task.labels);
    DiffNode<T> loss = l_sup;
    double l_od_value = 0.0;
    if (parallel) {
      DiffNode<T> l_od =
          fod_loss(fwd.pairs, model.cfg.fod_per_class, model.cfg.fod_detach);
      l_od_value = double(l_od.value().data[0]);
      loss = total_loss(l_sup, l_od, T(model.cfg.lambda));
    }

    TraceRow row;
    row.step = step;
    row.l_sup = double(l_sup.value().data[0]);
    row.l_od = l_od_value;
    row.total = double(loss.value().data[0]);
    for (const auto& pair : fwd.pairs)
      row.mean_abs_sim.push_back(double(mean_abs_similarity(pair, model.cfg.fod_per_class)));

    if (!std::isfinite(row.total)) {
      result.diverged = true;
      model.params = last_good;
      model.bn_states = last_good_bn;
      if (hooks.on_divergence) hooks.on_divergence(model.params, last_good_step);
      throw DivergenceError("train: non-finite total loss at step " + std::to_string(step) +
                            "; last good checkpoint is step " + std::to_string(last_good_step));
    }

    g.backward(loss);
    model.params.zero_grads();
    binding.export_grads();
    opt.step(model.params);

    result.trace.push_back(row);
    result.steps_run = step;
    if (hooks.on_step) hooks.on_step(row);

    last_good = model.params;
    last_good_bn = model.bn_states;
    last_good_step = step;

    if (tp.dump_every > 0 && step % tp.dump_every == 0 && hooks.on_dump) {
      DumpSet<T> dump;
      dump.step = step;
      for (size_t b = 0; b < fwd.pairs.size(); ++b) {
        dump.spatial_streams.push_back(fwd.pairs[b].spatial.value());
        dump.semantic_streams.push_back(fwd.pairs[b].semantic.value());
        std::vector<Tensor<T>> experts;
        for (const auto& e : fwd.expert_outputs[b]) experts.push_back(e.value());
        dump.expert_outputs.push_back(std::move(experts));
      }
      hooks.on_dump(dump);
    }

    if (tp.eval_every > 0 && step % tp.eval_every == 0) {
      result.last_eval_miou = train_miou_from_logits(fwd.logits.value(), task);
      if (tp.early_stop_miou > 0.0 && result.last_eval_miou > tp.early_stop_miou) {
        result.early_stopped = true;
        break;
      }
    }
  }
  return result;
}

// Forward pass for reporting: eval-mode batch statistics once any training
// has initialized them, train-mode statistics otherwise (e.g. a 0-step run).
template <typename T>
ForwardResult<T> reporting_forward(Model<T>& model, Graph<T>& g, ParamBinding<T>& binding,
                                   const SyntheticTask<T>& task) {
  BnMode mode = model.bn_ready() ? BnMode::Eval : BnMode::Train;
  return model.forward(g, binding, task, mode);
}

}  // namespace pcaagg
