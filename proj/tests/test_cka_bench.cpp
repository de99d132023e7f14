#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "revcol/bench.hpp"
#include "revcol/cka.hpp"

using namespace revcol;

namespace {

Tensor<double> random_features(Rng& rng, std::int64_t n, std::int64_t d) {
  auto t = Tensor<double>::zeros({n, d});
  rng.fill_normal(t, 0.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("cka identity, scaling and orthogonal invariance", "[cka]") {
  Rng rng(1);
  auto x = random_features(rng, 12, 5);
  REQUIRE(compute_cka(x, x) == Catch::Approx(1.0).epsilon(1e-12));

  // Scaling invariance.
  auto cx = kernels::scale_fwd(x, -3.7);
  REQUIRE(compute_cka(x, cx) == Catch::Approx(1.0).epsilon(1e-12));

  // Orthogonal invariance: rotate 2-D features by an arbitrary angle.
  auto x2 = random_features(rng, 10, 2);
  const double th = 0.77;
  auto q = Tensor<double>::from({2, 2}, {std::cos(th), -std::sin(th), std::sin(th), std::cos(th)});
  auto xq = kernels::linear_fwd(x2, q, nullptr);
  REQUIRE(compute_cka(x2, xq) == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cka hand-computed small case and range", "[cka]") {
  // 2 samples, 1 feature: centered vectors are (d,-d) and (e,-e), so the
  // formula gives (2de)^2 / (2d^2 * 2e^2) = 1.
  auto x = Tensor<double>::from({2, 1}, {1.0, 3.0});
  auto y = Tensor<double>::from({2, 1}, {-2.0, 5.0});
  const double d = -1.0, e = -3.5;
  const double want = (2 * d * e) * (2 * d * e) / ((2 * d * d) * (2 * e * e));
  REQUIRE(compute_cka(x, y) == Catch::Approx(want).epsilon(1e-12));

  Rng rng(2);
  for (int it = 0; it < 20; ++it) {
    auto a = random_features(rng, 8, 3);
    auto b = random_features(rng, 8, 6);
    const double v = compute_cka(a, b);
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0 + 1e-9);
  }
}

TEST_CASE("cka symmetry and degenerate inputs", "[cka]") {
  Rng rng(3);
  auto a = random_features(rng, 9, 4);
  auto b = random_features(rng, 9, 7);
  REQUIRE(std::abs(compute_cka(a, b) - compute_cka(b, a)) <= 1e-12);

  auto flat = Tensor<double>::full({9, 4}, 2.0);  // zero variance
  REQUIRE_THROWS_AS(compute_cka(flat, b), ValueError);
  REQUIRE_THROWS_AS(compute_cka(a, flat), ValueError);
  auto one = Tensor<double>::full({1, 4}, 2.0);
  REQUIRE_THROWS_AS(compute_cka(one, one), ValueError);
}

TEST_CASE("per-column cka trends on an untrained model", "[cka]") {
  ModelConfig cfg;
  cfg.channels = {8, 16, 32, 64};
  cfg.blocks = {1, 1, 1, 1};
  cfg.columns = 4;
  cfg.num_classes = 4;
  cfg.input_h = cfg.input_w = 32;
  Rng rng(4);
  auto model = build_model<float>(cfg, rng);
  auto ds = synth_dataset<float>(SynthKind::striped_textures, 4, 48, 32, 9);
  auto result = cka_by_column(model, ds, 48);
  REQUIRE(result.columns == 4);
  REQUIRE(result.image.size() == 16);
  for (double v : result.image) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0 + 1e-9);
  }
  for (double v : result.label) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0 + 1e-9);
  }
  // Early low-level features track the images more than the deepest ones.
  REQUIRE(result.image_at(1, 1) > result.image_at(4, 4));

  auto csv = cka_csv(result);
  REQUIRE(csv.rfind("column,level,cka_image,cka_label\n", 0) == 0);
  REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 17);
  // Deterministic: same model + data give identical bytes.
  REQUIRE(csv == cka_csv(cka_by_column(model, ds, 48)));
}

TEST_CASE("memory tracker keeps its two accountings consistent", "[bench]") {
  auto& tr = MemoryTracker::instance();
  {
    auto a = Tensor<float>::zeros({128, 128});
    auto b = Tensor<float>::zeros({64, 64});
    auto p = Tensor<float>::zeros({32, 32}, MemTag::parameter);
    REQUIRE(tr.live_activation_bytes() == tr.registry_bytes(MemTag::activation));
    REQUIRE(tr.live_parameter_bytes() == tr.registry_bytes(MemTag::parameter));
    REQUIRE(tr.live_activation_bytes() >= 128 * 128 * 4 + 64 * 64 * 4);
    // Retagging moves bytes between the pools.
    const auto act_before = tr.live_activation_bytes();
    b.mark_parameter();
    REQUIRE(tr.live_activation_bytes() == act_before - 64 * 64 * 4);
    REQUIRE(tr.live_activation_bytes() == tr.registry_bytes(MemTag::activation));
    REQUIRE(tr.live_parameter_bytes() == tr.registry_bytes(MemTag::parameter));
  }
  REQUIRE(tr.live_activation_bytes() == tr.registry_bytes(MemTag::activation));
}

TEST_CASE("peak activation tracking", "[bench]") {
  auto& tr = MemoryTracker::instance();
  tr.reset_peak();
  const auto base = tr.peak_activation_bytes();
  {
    auto big = Tensor<float>::zeros({256, 256});
    REQUIRE(tr.peak_activation_bytes() >= base + 256 * 256 * 4);
  }
  const auto peak = tr.peak_activation_bytes();
  REQUIRE(peak >= base + 256 * 256 * 4);  // persists after the buffer dies
  tr.reset_peak();
  REQUIRE(tr.peak_activation_bytes() < peak);
}

TEST_CASE("single-column memory benchmark: both modes within 5%", "[bench]") {
  MemBenchFixture fx;
  fx.channels = {8, 16, 32, 64};
  fx.blocks = {1, 1, 1, 1};
  fx.input = 32;
  fx.batch = 2;
  auto records = bench_memory<float>(fx, {1}, {ExecMode::store_all, ExecMode::reversible});
  REQUIRE(records.size() == 2);
  const double a = static_cast<double>(records[0].act_bytes);
  const double b = static_cast<double>(records[1].act_bytes);
  INFO("store_all=" << a << " reversible=" << b);
  REQUIRE(std::abs(a - b) / std::max(a, b) <= 0.05);
  REQUIRE(records[0].param_bytes > 0);
}

TEST_CASE("memory benchmark act bytes are deterministic", "[bench]") {
  MemBenchFixture fx;
  fx.channels = {8, 16, 32, 64};
  fx.blocks = {1, 1, 1, 1};
  fx.input = 32;
  fx.batch = 2;
  auto r1 = bench_memory<float>(fx, {2}, {ExecMode::reversible});
  auto r2 = bench_memory<float>(fx, {2}, {ExecMode::reversible});
  REQUIRE(r1[0].act_bytes == r2[0].act_bytes);
  REQUIRE(r1[0].param_bytes == r2[0].param_bytes);
  // CSV bytes identical apart from the wall-time column.
  auto strip_ms = [](std::string csv) {
    std::string out;
    std::size_t pos = 0;
    while (pos < csv.size()) {
      auto eol = csv.find('\n', pos);
      auto line = csv.substr(pos, eol - pos);
      out += line.substr(0, line.rfind(','));
      out += '\n';
      pos = eol + 1;
    }
    return out;
  };
  REQUIRE(strip_ms(memory_csv(r1)) == strip_ms(memory_csv(r2)));
}

TEST_CASE("model report csv shape", "[bench]") {
  auto reports = sweep_kernel<float>(column_sweep_config(4), {3, 5});
  REQUIRE(reports.size() == 2);
  REQUIRE(reports[0].name == "k3");
  REQUIRE(reports[1].params > reports[0].params);  // bigger depthwise kernels
  auto csv = reports_csv(reports);
  REQUIRE(csv.rfind("name,params,params_total,flops,flops_per_column\n", 0) == 0);
  REQUIRE(csv == reports_csv(sweep_kernel<float>(column_sweep_config(4), {3, 5})));
}
