#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "revcol/memtrack.hpp"
#include "revcol/train.hpp"

namespace revcol {

struct MemoryRecord {
  int columns = 0;
  ExecMode mode = ExecMode::store_all;
  std::size_t act_bytes = 0;    // peak live activation storage during the step
  std::size_t param_bytes = 0;  // parameters + their gradients + optimizer moments
  double ms = 0;
};

inline const char* mode_name(ExecMode m) {
  return m == ExecMode::store_all ? "store_all" : "reversible";
}

// Per-column fixture for the memory sweep: the column structure stays fixed
// while the column count varies.
struct MemBenchFixture {
  std::array<std::int64_t, 4> channels{16, 32, 64, 128};
  std::array<std::int64_t, 4> blocks{2, 2, 3, 2};
  std::int64_t input = 64;
  std::int64_t batch = 2;
  std::int64_t num_classes = 10;
  std::uint64_t seed = 0;
};

// One instrumented train step per (columns, mode). The activation figure is
// the tracker's peak of live non-parameter storage; an allocation failure is
// reported for that configuration without aborting the sweep.
template <class T>
std::vector<MemoryRecord> bench_memory(const MemBenchFixture& fx, const std::vector<int>& col_list,
                                       const std::vector<ExecMode>& modes) {
  std::vector<MemoryRecord> out;
  for (int cols : col_list)
    for (ExecMode mode : modes) {
      MemoryRecord rec;
      rec.columns = cols;
      rec.mode = mode;
      try {
        ModelConfig cfg;
        cfg.channels = fx.channels;
        cfg.blocks = fx.blocks;
        cfg.columns = cols;
        cfg.num_classes = fx.num_classes;
        cfg.input_h = cfg.input_w = fx.input;
        cfg.head_columns = {};  // terminal classifier only
        Rng rng(fx.seed);
        auto model = build_model<T>(cfg, rng);
        auto sched = default_schedule(cols, 0);
        TrainConfig tc;
        tc.label_smoothing = 0.1;
        AdamW<T> opt;

        Batch<T> batch;
        batch.images = Tensor<T>::zeros({fx.batch, 3, fx.input, fx.input});
        rng.fill_uniform(batch.images, 0.0, 1.0);
        batch.labels.resize(static_cast<std::size_t>(fx.batch));
        for (std::size_t i = 0; i < batch.labels.size(); ++i)
          batch.labels[i] = static_cast<std::int64_t>(rng.next_below(
              static_cast<std::uint64_t>(fx.num_classes)));

        // Warm the optimizer state so moments land in the parameter figure.
        train_step(model, opt, batch, sched, tc, 1e-4, mode);

        auto& tracker = MemoryTracker::instance();
        tracker.reset_peak();
        const auto t0 = std::chrono::steady_clock::now();
        train_step(model, opt, batch, sched, tc, 1e-4, mode);
        const auto t1 = std::chrono::steady_clock::now();
        rec.ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        rec.act_bytes = tracker.peak_activation_bytes();
        rec.param_bytes = tracker.live_parameter_bytes();
      } catch (const std::bad_alloc&) {
        rec.act_bytes = rec.param_bytes = 0;
        rec.ms = -1;
      }
      out.push_back(rec);
    }
  return out;
}

// Runs the activation-free forward, then reconstructs column 1 back from
// the last column and reports the max-abs error against the directly
// computed column 1.
template <class T>
double invert_check_error(RevColModel<T>& model, const Tensor<T>& images) {
  Tape<T> paused(false);
  auto fr = run_forward(model, paused, Value<T>{images, -1}, true, false);
  ColumnBank<T> bank(model);
  ColumnState<T> cur;
  for (auto& v : fr.last_state) cur.push_back(v.v);
  bank.unit_config(images.dim(0)).check_state(cur);
  for (int col = model.cfg.columns; col >= 2; --col)
    cur = reconstruct_column(bank, col, cur, &fr.stem_out.v);
  double err = 0;
  for (int s = 0; s < 4; ++s)
    err = std::max(err, max_abs_diff(cur[static_cast<std::size_t>(s)],
                                     fr.all_states[0][static_cast<std::size_t>(s)].v));
  return err;
}

// Largest relative disagreement between reversible and store-all gradients
// over every parameter, on one batch.
template <class T>
double grad_check_error(RevColModel<T>& model, const Batch<T>& batch,
                        const SupervisionSchedule& sched, double label_smoothing) {
  GradSink<T> a(model.params.size()), b(model.params.size());
  compute_gradients(model, batch, sched, label_smoothing, ExecMode::store_all, a);
  compute_gradients(model, batch, sched, label_smoothing, ExecMode::reversible, b);
  double err = 0;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    if (!a.grad(i).defined() && !b.grad(i).defined()) continue;
    if (a.grad(i).defined() != b.grad(i).defined()) {
      // Zero-weighted loss branches are skipped by the reversible sweep but
      // contribute exact zeros on the store-all tape; both mean "no grad".
      const auto& present = a.grad(i).defined() ? a.grad(i) : b.grad(i);
      double mx = 0;
      for (std::int64_t j = 0; j < present.numel(); ++j)
        mx = std::max(mx, std::abs(static_cast<double>(present.data()[j])));
      if (mx != 0)
        throw ValueError("gradient presence mismatch for parameter " + model.params.names[i]);
      continue;
    }
    err = std::max(err, max_rel_diff(a.grad(i), b.grad(i), 1e-6));
  }
  return err;
}

// ------------------------------------------------------- model reports ---

struct ModelReport {
  std::string name;
  std::int64_t params = 0;        // inference parameters
  std::int64_t params_total = 0;  // including supervision heads
  std::int64_t flops = 0;         // conv/linear MACs at the config input size
  double flops_per_column = 0;
};

template <class T>
ModelReport report_model(const ModelConfig& cfg, const std::string& name = "") {
  Rng rng(0);
  auto model = build_model<T>(cfg, rng);
  ModelReport r;
  r.name = name;
  r.params = count_params(model, false);
  r.params_total = count_params(model, true);
  r.flops = estimate_flops(cfg, cfg.input_h, cfg.input_w);
  r.flops_per_column = static_cast<double>(r.flops) / cfg.columns;
  return r;
}

// Column-count sweep at a fixed ~4.5G budget: the per-column structure for
// each entry is part of the harness configuration.
inline ModelConfig column_sweep_config(int columns) {
  ModelConfig cfg;
  cfg.columns = columns;
  cfg.num_classes = 1000;
  cfg.input_h = cfg.input_w = 224;
  cfg.head_columns = {};
  switch (columns) {
    case 1:
      cfg.channels = {96, 192, 384, 768};
      cfg.blocks = {3, 3, 9, 3};
      break;
    case 4:
      cfg.channels = {64, 128, 256, 512};
      cfg.blocks = {2, 2, 4, 2};
      break;
    case 8:
      cfg.channels = {48, 96, 192, 384};
      cfg.blocks = {2, 2, 4, 2};
      break;
    case 12:
      cfg.channels = {40, 80, 160, 320};
      cfg.blocks = {1, 2, 3, 2};
      break;
    case 20:
      cfg.channels = {35, 70, 140, 280};
      cfg.blocks = {2, 1, 1, 2};
      break;
    default:
      throw ConfigError("column sweep: no fixture for " + std::to_string(columns) + " columns");
  }
  return cfg;
}

template <class T>
std::vector<ModelReport> sweep_columns(const std::vector<int>& cols = {1, 4, 8, 12, 20}) {
  std::vector<ModelReport> out;
  for (int c : cols)
    out.push_back(report_model<T>(column_sweep_config(c), std::to_string(c) + "-column"));
  return out;
}

template <class T>
std::vector<ModelReport> sweep_kernel(ModelConfig cfg,
                                      const std::vector<std::int64_t>& kernels = {3, 5, 7, 11}) {
  std::vector<ModelReport> out;
  for (auto k : kernels) {
    cfg.kernel_size = k;
    out.push_back(report_model<T>(cfg, "k" + std::to_string(k)));
  }
  return out;
}

// ----------------------------------------------------------------- CSV ---

inline std::string memory_csv(const std::vector<MemoryRecord>& records) {
  std::string out = "col,mode,act_bytes,param_bytes,ms\n";
  char line[160];
  for (const auto& r : records) {
    std::snprintf(line, sizeof line, "%d,%s,%zu,%zu,%.3f\n", r.columns, mode_name(r.mode),
                  r.act_bytes, r.param_bytes, r.ms);
    out += line;
  }
  return out;
}

inline std::string reports_csv(const std::vector<ModelReport>& reports) {
  std::string out = "name,params,params_total,flops,flops_per_column\n";
  char line[200];
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%s,%lld,%lld,%lld,%.4g\n", r.name.c_str(),
                  static_cast<long long>(r.params), static_cast<long long>(r.params_total),
                  static_cast<long long>(r.flops), r.flops_per_column);
    out += line;
  }
  return out;
}

}  // namespace revcol
