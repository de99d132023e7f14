#pragma once

#include <cmath>
#include <ostream>
#include <vector>

#include "revcol/data.hpp"
#include "revcol/model.hpp"
#include "revcol/optim.hpp"

namespace revcol {

enum class Precision { f32, f64 };

// ------------------------------------------------------------ schedule ---

struct SupervisionSchedule {
  std::vector<int> head_columns;  // n intermediate columns; the final column carries slot n+1
  std::vector<double> alpha;      // n+1 reconstruction weights, non-increasing
  std::vector<double> beta;       // n+1 classification weights, non-decreasing

  int n() const { return static_cast<int>(head_columns.size()); }

  void validate(int columns) const {
    if (alpha.size() != head_columns.size() + 1 || beta.size() != head_columns.size() + 1)
      throw ConfigError("supervision schedule: alpha/beta must have n+1 entries");
    for (std::size_t i = 1; i < alpha.size(); ++i) {
      if (alpha[i] > alpha[i - 1]) throw ConfigError("supervision schedule: alpha must be non-increasing");
      if (beta[i] < beta[i - 1]) throw ConfigError("supervision schedule: beta must be non-decreasing");
    }
    for (std::size_t i = 0; i < alpha.size(); ++i)
      if (alpha[i] < 0 || beta[i] < 0) throw ConfigError("supervision schedule: weights must be >= 0");
    int prev = 0;
    for (int c : head_columns) {
      if (c < 1 || c >= columns)
        throw ConfigError("supervision schedule: head column " + std::to_string(c) +
                          " outside [1," + std::to_string(columns) + ")");
      if (c <= prev) throw ConfigError("supervision schedule: head columns must be increasing");
      prev = c;
    }
  }
};

// Evenly spaced head columns: round(COL*j/(n+1)) for j = 1..n, bumped to
// stay strictly increasing, plus the final column for the terminal CE.
// Returns n+1 entries with the final column last.
inline std::vector<int> place_heads(int columns, int n) {
  if (n < 0 || n > columns) throw ConfigError("place_heads: need 0 <= n <= columns");
  std::vector<int> cols;
  int prev = 0;
  for (int j = 1; j <= n; ++j) {
    int c = static_cast<int>(std::llround(static_cast<double>(columns) * j / (n + 1)));
    c = std::max({c, 1, prev + 1});
    if (c >= columns)
      throw ConfigError("place_heads: cannot place " + std::to_string(n) +
                        " intermediate heads before column " + std::to_string(columns));
    cols.push_back(c);
    prev = c;
  }
  cols.push_back(columns);
  return cols;
}

// Default weights: alpha falls linearly 3 -> 0; beta rises 0.18 -> 1. For
// n = 3 beta uses the reference values (0.18, 0.35, 0.53, 1) verbatim.
inline SupervisionSchedule default_schedule(int columns, int n) {
  auto cols = place_heads(columns, n);
  SupervisionSchedule s;
  s.head_columns.assign(cols.begin(), cols.end() - 1);
  if (n == 0) {
    s.alpha = {0.0};
    s.beta = {1.0};
  } else if (n == 3) {
    s.alpha = {3.0, 2.0, 1.0, 0.0};
    s.beta = {0.18, 0.35, 0.53, 1.0};
  } else {
    for (int j = 0; j <= n; ++j) {
      s.alpha.push_back(3.0 * static_cast<double>(n - j) / n);
      s.beta.push_back(0.18 + (1.0 - 0.18) * static_cast<double>(j) / n);
    }
  }
  s.validate(columns);
  return s;
}

struct TrainConfig {
  std::int64_t epochs = 20;
  std::int64_t batch_size = 32;
  double peak_lr = 4e-3;
  std::int64_t warmup_steps = 20;
  std::int64_t total_steps = 0;  // derived from epochs when 0
  double weight_decay = 0.05;
  double label_smoothing = 0.1;
  double grad_clip = 0.0;  // disabled by default
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  ExecMode mode = ExecMode::reversible;
  int supervision_n = 3;
};

// --------------------------------------------------------------- losses ---

// Per-image min-max normalization of the reconstruction targets; a constant
// image maps to all zeros.
template <class T>
Tensor<T> minmax_targets(const Tensor<T>& images) {
  auto out = Tensor<T>::zeros(images.dims());
  const std::int64_t n = images.dim(0);
  const std::int64_t chw = images.numel() / n;
  const T* in = images.data();
  T* op = out.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const T* row = in + i * chw;
    T lo = row[0], hi = row[0];
    for (std::int64_t j = 1; j < chw; ++j) {
      lo = std::min(lo, row[j]);
      hi = std::max(hi, row[j]);
    }
    const T range = hi - lo;
    T* orow = op + i * chw;
    if (static_cast<double>(range) < 1e-12) continue;
    for (std::int64_t j = 0; j < chw; ++j) orow[j] = (row[j] - lo) / range;
  }
  return out;
}

struct LossBreakdown {
  double total = 0;
  std::vector<double> bce, ce;  // per schedule slot

  void check_finite() const {
    for (std::size_t i = 0; i < bce.size(); ++i) {
      if (!std::isfinite(bce[i]))
        throw ValueError("non-finite bce term at schedule slot " + std::to_string(i + 1));
      if (!std::isfinite(ce[i]))
        throw ValueError("non-finite ce term at schedule slot " + std::to_string(i + 1));
    }
    if (!std::isfinite(total)) throw ValueError("non-finite total loss");
  }
};

// Weighted sum over head columns of alpha*BCE(recon, target) + beta*CE.
// Head outputs must be ordered like the schedule slots (ascending columns,
// final column last).
template <class T>
Value<T> compound_loss(Tape<T>& tape, const std::vector<HeadOutput<T>>& heads,
                       const Tensor<T>& recon_target, const std::vector<std::int64_t>& labels,
                       const SupervisionSchedule& sched, double smoothing,
                       LossBreakdown* breakdown = nullptr) {
  if (heads.size() != sched.alpha.size())
    throw ConfigError("compound_loss: " + std::to_string(heads.size()) + " head outputs vs " +
                      std::to_string(sched.alpha.size()) + " schedule slots");
  Value<T> total;
  if (breakdown) {
    breakdown->bce.clear();
    breakdown->ce.clear();
  }
  for (std::size_t i = 0; i < heads.size(); ++i) {
    Value<T> bce = tape.sigmoid_bce(heads[i].recon_logits, recon_target);
    Value<T> ce = tape.softmax_cross_entropy(heads[i].class_logits, labels, smoothing);
    if (breakdown) {
      breakdown->bce.push_back(static_cast<double>(bce.v.item()));
      breakdown->ce.push_back(static_cast<double>(ce.v.item()));
    }
    Value<T> term = tape.add(tape.scale(bce, static_cast<T>(sched.alpha[i])),
                             tape.scale(ce, static_cast<T>(sched.beta[i])));
    total = total.v.defined() ? tape.add(total, term) : term;
  }
  if (breakdown) {
    breakdown->total = static_cast<double>(total.v.item());
    breakdown->check_finite();
  }
  return total;
}

// ---------------------------------------------------------- train step ---

struct StepMetrics {
  std::int64_t step = 0;
  double lr = 0;
  double loss = 0;
  std::vector<double> bce, ce;
  double grad_norm = 0;
};

namespace detail {

// Gradients of one column's supervision terms, used as tap gradients during
// the reversible sweep. Zero-weighted branches are skipped: their gradient
// contribution is exactly zero either way.
template <class T>
std::vector<Tensor<T>> head_tap_grads(RevColModel<T>& model, int col,
                                      const std::vector<Tensor<T>>& state,
                                      const Tensor<T>& recon_target,
                                      const std::vector<std::int64_t>& labels,
                                      const SupervisionSchedule& sched, double smoothing,
                                      GradSink<T>& sink) {
  std::size_t slot = sched.alpha.size();
  for (std::size_t i = 0; i < model.heads.size(); ++i)
    if (model.heads[i].column == col) slot = i;
  if (slot == sched.alpha.size()) return {};
  const double a = sched.alpha[slot], b = sched.beta[slot];
  if (a == 0 && b == 0) return {};

  Tape<T> tape(true);
  Value<T> lvl4 = tape.leaf(state[3]);
  Value<T> total;
  auto& head = model.heads[slot];
  if (a != 0) {
    Value<T> recon = decoder_head(model, tape, lvl4, head);
    total = tape.scale(tape.sigmoid_bce(recon, recon_target), static_cast<T>(a));
  }
  if (b != 0) {
    Value<T> cls = classifier_head(model, tape, lvl4, head);
    Value<T> ce = tape.scale(tape.softmax_cross_entropy(cls, labels, smoothing), static_cast<T>(b));
    total = total.v.defined() ? tape.add(total, ce) : ce;
  }
  tape.backward(total, &sink);
  std::vector<Tensor<T>> grads(4);
  grads[3] = tape.grad_of(lvl4);
  if (grads[3].defined() && grads[3].storage_use_count() > 1) grads[3] = grads[3].clone();
  return grads;
}

}  // namespace detail

// Forward in the requested mode, compound loss, backward (store-all tape or
// reversible reconstruction sweep). Gradients land in the sink.
template <class T>
LossBreakdown compute_gradients(RevColModel<T>& model, const Batch<T>& batch,
                                const SupervisionSchedule& sched, double label_smoothing,
                                ExecMode mode, GradSink<T>& sink) {
  const Tensor<T> recon_target = minmax_targets(batch.images);
  LossBreakdown breakdown;

  // With a single column there is nothing to reconstruct; the reversible
  // backward is the store-all backward by construction.
  if (model.cfg.columns == 1) mode = ExecMode::store_all;

  if (mode == ExecMode::store_all) {
    Tape<T> tape(true);
    Value<T> images = tape.leaf(batch.images);
    auto fr = run_forward(model, tape, images, false, true);
    Value<T> loss = compound_loss(tape, fr.heads, recon_target, batch.labels, sched,
                                  label_smoothing, &breakdown);
    tape.backward(loss, &sink);
    return breakdown;
  }

  Tape<T> paused(false);
  auto fr = run_forward(model, paused, Value<T>{batch.images, -1}, false, true);
  compound_loss(paused, fr.heads, recon_target, batch.labels, sched, label_smoothing, &breakdown);

  ColumnBank<T> bank(model);
  std::vector<Tensor<T>> last_state;
  for (auto& v : fr.last_state) last_state.push_back(v.v);
  auto tap = [&](int col, const std::vector<Tensor<T>>& state, GradSink<T>& s) {
    return detail::head_tap_grads(model, col, state, recon_target, batch.labels, sched,
                                  label_smoothing, s);
  };
  auto result =
      reversible_backward(bank, model.cfg.columns, &fr.stem_out.v, last_state, {}, tap, sink);
  // Stem segment: re-run on the images with recording to collect its
  // parameter gradients from the accumulated level-0 gradient.
  if (result.level0_grad.defined()) {
    Tape<T> tape(true);
    Value<T> images = tape.leaf(batch.images);
    Value<T> so = stem_forward(model, tape, images);
    tape.seed(so, std::move(result.level0_grad));
    tape.run_backward(&sink);
  }
  return breakdown;
}

// One optimization step: gradients per the mode, optional clip, AdamW
// update, gamma re-clamp.
template <class T>
StepMetrics train_step(RevColModel<T>& model, AdamW<T>& opt, const Batch<T>& batch,
                       const SupervisionSchedule& sched, const TrainConfig& tc, double lr,
                       ExecMode mode) {
  StepMetrics metrics;
  metrics.lr = lr;
  GradSink<T> sink(model.params.size());
  LossBreakdown breakdown = compute_gradients(model, batch, sched, tc.label_smoothing, mode, sink);
  metrics.loss = breakdown.total;
  metrics.bce = breakdown.bce;
  metrics.ce = breakdown.ce;
  metrics.grad_norm = global_grad_norm(sink.all());
  if (tc.grad_clip > 0) clip_grad_norm(sink.all(), tc.grad_clip);
  opt.config().lr = lr;
  opt.config().weight_decay = tc.weight_decay;
  opt.step(model.params.values, sink.all());
  model.clamp_gammas();
  return metrics;
}

// --------------------------------------------------------------- loops ---

template <class T>
double dataset_accuracy(RevColModel<T>& model, const Dataset<T>& ds, std::int64_t batch_size) {
  std::int64_t correct = 0;
  std::vector<std::int64_t> order(static_cast<std::size_t>(ds.size()));
  for (std::int64_t i = 0; i < ds.size(); ++i) order[static_cast<std::size_t>(i)] = i;
  for (std::int64_t start = 0; start < ds.size(); start += batch_size) {
    auto b = gather_batch(ds, order, start, batch_size);
    Tensor<T> logits = forward_logits(model, b.images);
    const std::int64_t n = logits.dim(0), k = logits.dim(1);
    for (std::int64_t i = 0; i < n; ++i) {
      const T* row = logits.data() + i * k;
      std::int64_t best = 0;
      for (std::int64_t j = 1; j < k; ++j)
        if (row[j] > row[best]) best = j;
      if (best == b.labels[static_cast<std::size_t>(i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

inline void emit_metrics(std::ostream& os, const StepMetrics& m) {
  os << "step=" << m.step << " lr=" << m.lr << " loss=" << m.loss;
  for (std::size_t i = 0; i < m.bce.size(); ++i) os << " bce_" << (i + 1) << "=" << m.bce[i];
  for (std::size_t i = 0; i < m.ce.size(); ++i) os << " ce_" << (i + 1) << "=" << m.ce[i];
  os << " gnorm=" << m.grad_norm << "\n";
}

template <class T>
struct TrainResult {
  std::vector<StepMetrics> log;
  std::int64_t steps = 0;
};

template <class T>
TrainResult<T> train_loop(RevColModel<T>& model, AdamW<T>& opt, const Dataset<T>& ds,
                          const SupervisionSchedule& sched, const TrainConfig& tc,
                          std::ostream* metrics_out = nullptr) {
  TrainResult<T> result;
  const std::int64_t steps_per_epoch = (ds.size() + tc.batch_size - 1) / tc.batch_size;
  const std::int64_t total =
      tc.total_steps > 0 ? tc.total_steps : tc.epochs * steps_per_epoch;
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; epoch < tc.epochs && step < total; ++epoch) {
    auto order = epoch_order(ds.size(), tc.seed, epoch);
    for (std::int64_t start = 0; start < ds.size() && step < total; start += tc.batch_size) {
      auto batch = gather_batch(ds, order, start, tc.batch_size);
      const double lr = cosine_lr(step, tc.warmup_steps, total, tc.peak_lr);
      auto m = train_step(model, opt, batch, sched, tc, lr, tc.mode);
      m.step = step;
      result.log.push_back(m);
      if (metrics_out) emit_metrics(*metrics_out, m);
      ++step;
    }
  }
  result.steps = step;
  return result;
}

}  // namespace revcol
