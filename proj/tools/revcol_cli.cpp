// Command-line surface: training, evaluation, invertibility and gradient
// verification, activation-memory benchmarking, parameter/FLOP reporting,
// column/kernel sweeps and CKA analysis.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <set>

#include "revcol/revcol.hpp"

namespace {

using namespace revcol;

struct Options {
  std::string config_path;
  std::string preset;
  std::string data = "synthetic:textures";
  std::uint64_t seed = 0;
  std::string mode;       // store_all | reversible (config override)
  std::string precision;  // f32 | f64 (config override)
  std::string out;
  std::string csv;
  std::string ckpt;
  std::int64_t samples = 256;
  std::int64_t classes = 0;  // 0: from config
  std::int64_t image_size = 0;
  std::vector<int> cols{2, 4, 8};
  std::vector<std::int64_t> kernels{3, 5, 7, 11};
};

void write_csv(const std::string& path, const std::string& body) {
  if (path.empty()) return;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open CSV output " + path);
  os << body;
}

ParsedConfig resolve_config(const Options& opt, const std::string& fallback_preset = "") {
  ParsedConfig pc;
  if (!opt.config_path.empty())
    pc = parse_config(opt.config_path);
  else if (!opt.preset.empty())
    pc = preset_config(opt.preset);
  else if (!fallback_preset.empty())
    pc = preset_config(fallback_preset);
  else
    throw ConfigError("need --config or --preset");
  if (!opt.mode.empty()) {
    if (opt.mode != "store_all" && opt.mode != "reversible")
      throw ConfigError("--mode must be store_all or reversible");
    pc.train.mode = opt.mode == "store_all" ? ExecMode::store_all : ExecMode::reversible;
  }
  if (!opt.precision.empty()) {
    if (opt.precision != "f32" && opt.precision != "f64")
      throw ConfigError("--precision must be f32 or f64");
    pc.train.precision = opt.precision == "f32" ? Precision::f32 : Precision::f64;
  }
  pc.train.seed = opt.seed;
  if (opt.classes > 0) pc.model.num_classes = opt.classes;
  if (opt.image_size > 0) pc.model.input_h = pc.model.input_w = opt.image_size;
  return pc;
}

template <class T>
Dataset<T> resolve_dataset(const Options& opt, const ModelConfig& cfg) {
  const auto colon = opt.data.find(':');
  const std::string scheme = opt.data.substr(0, colon);
  const std::string rest = colon == std::string::npos ? "" : opt.data.substr(colon + 1);
  if (scheme == "idx") {
    const auto comma = rest.find(',');
    if (comma == std::string::npos)
      throw ConfigError("--data idx needs two paths: idx:<images>,<labels>");
    auto ds = load_idx<T>(rest.substr(0, comma), rest.substr(comma + 1));
    if (ds.height() != cfg.input_h || ds.width() != cfg.input_w)
      throw ConfigError("dataset is " + std::to_string(ds.height()) + "x" +
                        std::to_string(ds.width()) + " but the model expects " +
                        std::to_string(cfg.input_h) + "x" + std::to_string(cfg.input_w) +
                        " (set input_size)");
    return ds;
  }
  if (scheme == "synthetic") {
    const auto kind = parse_synth_kind(rest.empty() ? "textures" : rest);
    return synth_dataset<T>(kind, cfg.num_classes, opt.samples, cfg.input_h, opt.seed);
  }
  throw ConfigError("unknown --data scheme '" + scheme + "' (expected idx: or synthetic:)");
}

template <class T>
int run_train(const Options& opt) {
  auto pc = resolve_config(opt, "tiny-desk");
  auto ds = resolve_dataset<T>(opt, pc.model);
  Rng rng(pc.train.seed);
  auto model = build_model<T>(pc.model, rng);
  AdamW<T> adamw;
  adamw.config().weight_decay = pc.train.weight_decay;
  std::cout << "training " << (pc.train.mode == ExecMode::reversible ? "reversible" : "store_all")
            << " model: " << count_params(model, true) << " parameters, " << ds.size()
            << " samples\n";
  auto result = train_loop(model, adamw, ds, pc.schedule, pc.train, &std::cout);
  const double acc = dataset_accuracy(model, ds, pc.train.batch_size);
  std::cout << "train_accuracy=" << acc << "\n";
  if (!opt.out.empty()) {
    save_checkpoint(model, &adamw, pc.schedule, opt.out);
    std::cout << "checkpoint written to " << opt.out << "\n";
  }
  if (!opt.csv.empty()) {
    std::string body = "step,lr,loss,gnorm\n";
    char line[128];
    for (const auto& m : result.log) {
      std::snprintf(line, sizeof line, "%lld,%.8g,%.8g,%.8g\n", static_cast<long long>(m.step),
                    m.lr, m.loss, m.grad_norm);
      body += line;
    }
    write_csv(opt.csv, body);
  }
  return 0;
}

template <class T>
int run_eval(const Options& opt) {
  if (opt.ckpt.empty()) throw ConfigError("eval needs --ckpt");
  auto loaded = load_checkpoint<T>(opt.ckpt);
  auto ds = resolve_dataset<T>(opt, loaded.model.cfg);
  const double acc = dataset_accuracy(loaded.model, ds, 32);
  std::cout << "samples=" << ds.size() << " accuracy=" << acc << "\n";
  return 0;
}

template <class T>
int run_invert_check(const Options& opt) {
  auto pc = resolve_config(opt, "tiny-desk");
  Rng rng(opt.seed);
  auto model = build_model<T>(pc.model, rng);
  auto images = Tensor<T>::zeros({2, 3, pc.model.input_h, pc.model.input_w});
  rng.fill_uniform(images, 0.0, 1.0);
  const double err = invert_check_error(model, images);
  const double tol = sizeof(T) == 8 ? 1e-9 : 1e-3;
  std::cout << "columns=" << pc.model.columns << " max_abs_roundtrip_error=" << err
            << " tolerance=" << tol << "\n";
  if (!(err <= tol)) {
    std::cerr << "invert-check FAILED: " << err << " > " << tol << "\n";
    return 1;
  }
  return 0;
}

template <class T>
int run_grad_check(const Options& opt) {
  auto pc = resolve_config(opt, "tiny-desk");
  Rng rng(opt.seed);
  auto model = build_model<T>(pc.model, rng);
  Rng drng(opt.seed + 1);
  Batch<T> batch;
  batch.images = Tensor<T>::zeros({2, 3, pc.model.input_h, pc.model.input_w});
  drng.fill_uniform(batch.images, 0.0, 1.0);
  for (int i = 0; i < 2; ++i)
    batch.labels.push_back(static_cast<std::int64_t>(
        drng.next_below(static_cast<std::uint64_t>(pc.model.num_classes))));
  const double err = grad_check_error(model, batch, pc.schedule, pc.train.label_smoothing);
  const double tol = sizeof(T) == 8 ? 1e-9 : 1e-3;
  std::cout << "max_rel_gradient_error=" << err << " tolerance=" << tol << "\n";
  if (!(err <= tol)) {
    std::cerr << "grad-check FAILED: " << err << " > " << tol << "\n";
    return 1;
  }
  return 0;
}

template <class T>
int run_bench_mem(const Options& opt) {
  MemBenchFixture fx;
  fx.seed = opt.seed;
  auto records = bench_memory<T>(fx, opt.cols, {ExecMode::store_all, ExecMode::reversible});
  const auto body = memory_csv(records);
  std::cout << body;
  write_csv(opt.csv, body);
  // Cross-check the two instrumentation paths.
  auto& tr = MemoryTracker::instance();
  const double counter = static_cast<double>(tr.live_activation_bytes());
  const double registry = static_cast<double>(tr.registry_bytes(MemTag::activation));
  if (std::abs(counter - registry) > 0.01 * std::max(1.0, counter)) {
    std::cerr << "instrumentation drift exceeds 1%\n";
    return 1;
  }
  return 0;
}

template <class T>
int run_report_model(const Options& opt) {
  auto pc = resolve_config(opt);
  auto r = report_model<T>(pc.model, opt.preset.empty() ? "model" : opt.preset);
  std::cout << "params=" << r.params << " params_with_heads=" << r.params_total
            << " flops=" << r.flops << " flops_per_column=" << r.flops_per_column << "\n";
  if (!opt.csv.empty()) write_csv(opt.csv, reports_csv({r}));
  return 0;
}

template <class T>
int run_sweep_columns(const Options& opt) {
  auto reports = sweep_columns<T>();
  const auto body = reports_csv(reports);
  std::cout << body;
  write_csv(opt.csv, body);
  return 0;
}

template <class T>
int run_sweep_kernel(const Options& opt) {
  auto pc = resolve_config(opt, "revcol-t");
  auto reports = sweep_kernel<T>(pc.model, opt.kernels);
  const auto body = reports_csv(reports);
  std::cout << body;
  write_csv(opt.csv, body);
  return 0;
}

template <class T>
int run_cka(const Options& opt) {
  RevColModel<T> model;
  if (!opt.ckpt.empty()) {
    model = load_checkpoint<T>(opt.ckpt).model;
  } else {
    auto pc = resolve_config(opt, "tiny-desk");
    Rng rng(opt.seed);
    model = build_model<T>(pc.model, rng);
  }
  auto ds = resolve_dataset<T>(opt, model.cfg);
  auto result = cka_by_column(model, ds, opt.samples);
  const auto body = cka_csv(result);
  std::cout << body;
  write_csv(opt.csv, body);
  return 0;
}

template <class T>
int dispatch(const std::string& cmd, const Options& opt) {
  if (cmd == "train") return run_train<T>(opt);
  if (cmd == "eval") return run_eval<T>(opt);
  if (cmd == "invert-check") return run_invert_check<T>(opt);
  if (cmd == "grad-check") return run_grad_check<T>(opt);
  if (cmd == "bench-mem") return run_bench_mem<T>(opt);
  if (cmd == "report-model") return run_report_model<T>(opt);
  if (cmd == "sweep-columns") return run_sweep_columns<T>(opt);
  if (cmd == "sweep-kernel") return run_sweep_kernel<T>(opt);
  if (cmd == "cka") return run_cka<T>(opt);
  return 64;
}

constexpr const char* kUsage =
    "usage: revcol <subcommand> [flags]\n"
    "subcommands:\n"
    "  train          train a model (--config|--preset, --data, --mode, --out, --csv)\n"
    "  eval           evaluate a checkpoint (--ckpt, --data)\n"
    "  invert-check   chained column reconstruction error (--preset, --seed)\n"
    "  grad-check     reversible vs store-all gradients (--preset, --seed)\n"
    "  bench-mem      activation-memory sweep over column counts (--cols, --csv)\n"
    "  report-model   parameter and FLOP report (--preset|--config)\n"
    "  sweep-columns  column-count variants at a fixed budget (--csv)\n"
    "  sweep-kernel   kernel-size variants of a preset (--kernels, --csv)\n"
    "  cka            per-(column, level) CKA against images and labels\n"
    "flags: --config <path> --preset <name> --data <idx:<img>,<lbl>|synthetic:<kind>>\n"
    "       --seed <u64> --mode <store_all|reversible> --precision <f32|f64>\n"
    "       --out <path> --csv <path> --ckpt <path> --samples <n> --classes <n>\n";

}  // namespace

int main(int argc, char** argv) {
  const std::set<std::string> known{"train",         "eval",         "invert-check",
                                    "grad-check",    "bench-mem",    "report-model",
                                    "sweep-columns", "sweep-kernel", "cka"};
  if (argc < 2 || !known.count(argv[1])) {
    std::cerr << kUsage;
    return 64;
  }
  const std::string cmd = argv[1];

  Options opt;
  CLI::App app{"reversible column network toolkit"};
  app.add_option("--config", opt.config_path, "configuration file (key = value lines)");
  app.add_option("--preset", opt.preset, "named model preset");
  app.add_option("--data", opt.data, "idx:<images>,<labels> or synthetic:<blobs|textures>");
  app.add_option("--seed", opt.seed, "RNG seed");
  app.add_option("--mode", opt.mode, "store_all or reversible");
  app.add_option("--precision", opt.precision, "f32 or f64");
  app.add_option("--out", opt.out, "output checkpoint path");
  app.add_option("--csv", opt.csv, "CSV output path");
  app.add_option("--ckpt", opt.ckpt, "input checkpoint path");
  app.add_option("--samples", opt.samples, "synthetic dataset size / CKA sample count");
  app.add_option("--classes", opt.classes, "class count override");
  app.add_option("--image-size", opt.image_size, "input size override");
  app.add_option("--cols", opt.cols, "column counts for bench-mem")->delimiter(',');
  app.add_option("--kernels", opt.kernels, "kernel sizes for sweep-kernel")->delimiter(',');

  try {
    app.parse(argc - 1, argv + 1);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << kUsage;
    return 1;
  }

  try {
    Precision precision = Precision::f32;
    if (cmd == "invert-check" || cmd == "grad-check") precision = Precision::f64;
    if (!opt.config_path.empty()) precision = parse_config(opt.config_path).train.precision;
    if (opt.precision == "f64") precision = Precision::f64;
    if (opt.precision == "f32") precision = Precision::f32;
    return precision == Precision::f64 ? dispatch<double>(cmd, opt) : dispatch<float>(cmd, opt);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
