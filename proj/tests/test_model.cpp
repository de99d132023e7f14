#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "revcol/bench.hpp"
#include "revcol/config.hpp"
#include "revcol/model.hpp"

using namespace revcol;

namespace {

ModelConfig tiny_desk() {
  ModelConfig cfg;
  cfg.channels = {8, 16, 32, 64};
  cfg.blocks = {1, 1, 1, 1};
  cfg.columns = 4;
  cfg.num_classes = 4;
  cfg.input_h = cfg.input_w = 32;
  cfg.head_columns = {1, 2, 3};
  return cfg;
}

template <class T>
Tensor<T> random_images(Rng& rng, std::int64_t n, std::int64_t hw) {
  auto t = Tensor<T>::zeros({n, 3, hw, hw});
  rng.fill_uniform(t, 0.0, 1.0);
  return t;
}

bool within(double value, double target, double frac) {
  return value >= target * (1 - frac) && value <= target * (1 + frac);
}

}  // namespace

TEST_CASE("level shapes follow the stride contract", "[model]") {
  Rng rng(1);
  auto model = build_model<double>(tiny_desk(), rng);
  auto images = random_images<double>(rng, 2, 32);
  Tape<double> tape(false);
  auto fr = run_forward(model, tape, Value<double>{images, -1}, true, false);
  REQUIRE(fr.all_states.size() == 4);
  for (const auto& state : fr.all_states) {
    REQUIRE(state[0].v.dims() == Shape{2, 8, 8, 8});
    REQUIRE(state[1].v.dims() == Shape{2, 16, 4, 4});
    REQUIRE(state[2].v.dims() == Shape{2, 32, 2, 2});
    REQUIRE(state[3].v.dims() == Shape{2, 64, 1, 1});
  }
}

TEST_CASE("fusion branch shapes agree across random valid configs", "[model]") {
  Rng rng(2);
  for (std::int64_t c1 : {4, 8, 12})
    for (int columns : {1, 2, 3}) {
      ModelConfig cfg;
      cfg.channels = {c1, 2 * c1, 4 * c1, 8 * c1};
      cfg.blocks = {1, static_cast<std::int64_t>(1 + rng.next_below(2)), 1, 1};
      cfg.columns = columns;
      cfg.num_classes = 3;
      cfg.input_h = cfg.input_w = 32;
      auto model = build_model<double>(cfg, rng);
      auto images = random_images<double>(rng, 1, 32);
      Tape<double> tape(false);
      auto fr = run_forward(model, tape, Value<double>{images, -1}, false, true);
      for (int l = 0; l < 4; ++l)
        REQUIRE(fr.last_state[static_cast<std::size_t>(l)].v.dims() ==
                Shape{1, cfg.channels[static_cast<std::size_t>(l)], 32 >> (l + 2), 32 >> (l + 2)});
    }
}

TEST_CASE("single column degenerates to a plain feed-forward net", "[model]") {
  ModelConfig cfg = tiny_desk();
  cfg.columns = 1;
  cfg.head_columns = {};
  Rng rng(3);
  auto model = build_model<double>(cfg, rng);
  REQUIRE(model.gamma_param_ids().empty());
  for (const auto& col : model.columns)
    for (const auto& lvl : col.levels) REQUIRE(!lvl.fusion.has_up);
  auto images = random_images<double>(rng, 1, 32);
  auto logits = forward_logits(model, images);
  REQUIRE(logits.dims() == Shape{1, 4});
  REQUIRE(logits.all_finite());
}

TEST_CASE("store-all and paused forward produce bitwise identical logits", "[model]") {
  Rng rng(4);
  auto model = build_model<double>(tiny_desk(), rng);
  auto images = random_images<double>(rng, 2, 32);

  Tape<double> rec(true);
  auto img_leaf = rec.leaf(images);
  auto fr1 = run_forward(model, rec, img_leaf, false, true);
  auto logits1 = classifier_head(model, rec, fr1.last_state[3], model.final_head());

  Tape<double> paused(false);
  auto fr2 = run_forward(model, paused, Value<double>{images, -1}, false, true);
  auto logits2 = classifier_head(model, paused, fr2.last_state[3], model.final_head());

  REQUIRE(bitwise_equal(logits1.v, logits2.v));
  for (std::size_t h = 0; h < fr1.heads.size(); ++h) {
    REQUIRE(bitwise_equal(fr1.heads[h].class_logits.v, fr2.heads[h].class_logits.v));
    REQUIRE(bitwise_equal(fr1.heads[h].recon_logits.v, fr2.heads[h].recon_logits.v));
  }
}

TEST_CASE("permuting the batch permutes the outputs", "[model]") {
  Rng rng(5);
  auto model = build_model<double>(tiny_desk(), rng);
  auto images = random_images<double>(rng, 3, 32);
  auto logits = forward_logits(model, images);
  // Reverse the batch.
  auto rev = Tensor<double>::zeros(images.dims());
  const std::int64_t chw = images.numel() / 3;
  for (std::int64_t i = 0; i < 3; ++i)
    std::copy(images.data() + i * chw, images.data() + (i + 1) * chw,
              rev.data() + (2 - i) * chw);
  auto rlogits = forward_logits(model, rev);
  const std::int64_t k = logits.dim(1);
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t j = 0; j < k; ++j)
      REQUIRE(logits.data()[i * k + j] == rlogits.data()[(2 - i) * k + j]);
}

TEST_CASE("classifier head behavior", "[model]") {
  ModelConfig cfg = tiny_desk();
  cfg.head_columns = {};
  cfg.num_classes = 2;
  Rng rng(6);
  auto model = build_model<double>(cfg, rng);
  auto& head = model.heads.back();

  // Constant feature map: layer norm collapses to the shift path (zero),
  // so the logits are exactly the classifier bias.
  {
    auto f = Tensor<double>::full({2, 64, 1, 1}, 3.25);
    Tape<double> tape(false);
    auto logits = classifier_head(model, tape, Value<double>{f, -1}, head);
    const auto& bias = model.params[head.cls_fc.b];
    for (std::int64_t i = 0; i < 2; ++i)
      for (std::int64_t j = 0; j < 2; ++j)
        REQUIRE(logits.v.data()[i * 2 + j] == bias.data()[j]);
  }

  // Hand-computed 2-class case at 1x1 spatial extent.
  {
    auto f = Tensor<double>::zeros({1, 64, 1, 1});
    Rng r2(7);
    r2.fill_uniform(f, -1.0, 1.0);
    Tape<double> tape(false);
    auto logits = classifier_head(model, tape, Value<double>{f, -1}, head);
    // Independent recomputation.
    const double c = 64;
    double mean = 0;
    for (int i = 0; i < 64; ++i) mean += f.data()[i];
    mean /= c;
    double var = 0;
    for (int i = 0; i < 64; ++i) var += (f.data()[i] - mean) * (f.data()[i] - mean);
    var /= c;
    const auto& gain = model.params[head.cls_norm.gain];
    const auto& shift = model.params[head.cls_norm.shift];
    const auto& w = model.params[head.cls_fc.w];
    const auto& b = model.params[head.cls_fc.b];
    for (int j = 0; j < 2; ++j) {
      double acc = b.data()[j];
      for (int i = 0; i < 64; ++i) {
        const double xh = gain.data()[i] * (f.data()[i] - mean) / std::sqrt(var + 1e-6) + shift.data()[i];
        acc += w.data()[j * 64 + i] * xh;
      }
      REQUIRE(oracle::rel_err(logits.v.data()[j], acc) <= 1e-12);
    }
  }

  // Mean pooling: replicating the spatial extent leaves logits unchanged.
  {
    Rng r3(8);
    auto f = Tensor<double>::zeros({1, 64, 2, 2});
    r3.fill_uniform(f, -1.0, 1.0);
    Tape<double> tape(false);
    auto lo = classifier_head(model, tape, Value<double>{f, -1}, head);
    auto up = kernels::nearest_upsample_fwd(f, 3);
    auto lo2 = classifier_head(model, tape, Value<double>{up, -1}, head);
    REQUIRE(max_abs_diff(lo.v, lo2.v) <= 1e-12);
  }
}

TEST_CASE("decoder head shape and stability", "[model]") {
  ModelConfig cfg;
  cfg.channels = {1, 2, 4, 8};
  cfg.blocks = {1, 1, 1, 1};
  cfg.columns = 2;
  cfg.num_classes = 2;
  cfg.input_h = cfg.input_w = 32;
  cfg.head_columns = {};
  Rng rng(9);
  auto model = build_model<double>(cfg, rng);
  auto& head = model.heads.back();

  auto lvl4 = Tensor<double>::zeros({2, 8, 1, 1});
  rng.fill_uniform(lvl4, -1.0, 1.0);
  Tape<double> tape(false);
  auto recon = decoder_head(model, tape, Value<double>{lvl4, -1}, head);
  REQUIRE(recon.v.dims() == Shape{2, 3, 32, 32});

  // Zero weights: constant-bias logits, finite BCE against any target.
  for (auto& h : model.heads)
    for (const auto& st : h.decoder.stages) {
      std::fill(model.params[st.dw.w].data(), model.params[st.dw.w].data() + model.params[st.dw.w].numel(), 0.0);
      std::fill(model.params[st.pw.w].data(), model.params[st.pw.w].data() + model.params[st.pw.w].numel(), 0.0);
    }
  auto recon0 = decoder_head(model, tape, Value<double>{lvl4, -1}, head);
  auto target = Tensor<double>::full({2, 3, 32, 32}, 0.7);
  REQUIRE(std::isfinite(kernels::sigmoid_bce_fwd(recon0.v, target)));
}

TEST_CASE("decoder gradients match finite differences", "[model]") {
  ModelConfig cfg;
  cfg.channels = {1, 2, 4, 8};
  cfg.blocks = {1, 1, 1, 1};
  cfg.columns = 1;
  cfg.num_classes = 2;
  cfg.input_h = cfg.input_w = 32;
  cfg.head_columns = {};
  Rng rng(10);
  auto model = build_model<double>(cfg, rng);
  auto& head = model.heads.back();
  auto lvl4 = Tensor<double>::zeros({1, 8, 1, 1});
  rng.fill_uniform(lvl4, -1.0, 1.0);
  auto target = Tensor<double>::zeros({1, 3, 32, 32});
  rng.fill_uniform(target, 0.0, 1.0);

  auto eval = [&]() {
    Tape<double> t(false);
    auto recon = decoder_head(model, t, Value<double>{lvl4, -1}, head);
    return kernels::sigmoid_bce_fwd(recon.v, target);
  };
  Tape<double> tape(true);
  auto recon = decoder_head(model, tape, Value<double>{lvl4, -1}, head);
  auto loss = tape.sigmoid_bce(recon, target);
  GradSink<double> sink(model.params.size());
  tape.backward(loss, &sink);

  // Check a few decoder parameters against finite differences.
  std::vector<std::int32_t> ids{head.decoder.stages[0].pw.w, head.decoder.stages[2].dw.w,
                                head.decoder.proj.w, head.decoder.proj.b};
  for (auto id : ids) {
    auto want = oracle::finite_diff(model.params[id], eval);
    REQUIRE(sink.grad(static_cast<std::size_t>(id)).defined());
    REQUIRE(max_rel_diff(sink.grad(static_cast<std::size_t>(id)), want, 1e-3) <= 1e-5);
  }
}

TEST_CASE("reference variant parameter and flop budgets", "[model]") {
  // 4-column reference variant: ~30M inference parameters, ~4.5G MACs.
  {
    auto cfg = preset_config("revcol-t").model;
    Rng rng(11);
    auto model = build_model<float>(cfg, rng);
    const auto params = count_params(model, false);
    REQUIRE(within(static_cast<double>(params), 30e6, 0.05));
    const auto flops = estimate_flops(cfg, 224, 224);
    REQUIRE(within(static_cast<double>(flops), 4.5e9, 0.10));
  }
  // 8-column reference variant: ~60M / ~9.0G.
  {
    auto cfg = preset_config("revcol-s").model;
    Rng rng(12);
    auto model = build_model<float>(cfg, rng);
    REQUIRE(within(static_cast<double>(count_params(model, false)), 60e6, 0.05));
    REQUIRE(within(static_cast<double>(estimate_flops(cfg, 224, 224)), 9.0e9, 0.10));
  }
}

TEST_CASE("column sweep fixtures stay inside the reference budgets", "[model]") {
  const struct {
    int col;
    double params, flops;
  } rows[] = {{1, 28e6, 4.4e9}, {4, 30e6, 4.5e9}, {8, 34e6, 4.7e9}, {12, 33e6, 4.4e9},
              {20, 35e6, 4.2e9}};
  for (const auto& row : rows) {
    auto cfg = column_sweep_config(row.col);
    Rng rng(13);
    auto model = build_model<float>(cfg, rng);
    const auto params = static_cast<double>(count_params(model, false));
    const auto flops = static_cast<double>(estimate_flops(cfg, 224, 224));
    INFO("columns=" << row.col << " params=" << params << " flops=" << flops);
    REQUIRE(within(params, row.params, 0.05));
    REQUIRE(within(flops, row.flops, 0.10));
  }
}

TEST_CASE("classifier size scales as D*K + K", "[model]") {
  ModelConfig a = tiny_desk();
  a.head_columns = {};
  ModelConfig b = a;
  b.num_classes = 12;
  Rng rng(14);
  auto ma = build_model<double>(a, rng);
  auto mb = build_model<double>(b, rng);
  const std::int64_t diff = count_params(mb, false) - count_params(ma, false);
  REQUIRE(diff == (12 - 4) * (64 + 1));
}

TEST_CASE("kernel padding with zero std is a bitwise no-op", "[model]") {
  Rng rng(15);
  auto model = build_model<double>(tiny_desk(), rng);
  Rng pad_rng(16);
  auto padded = kernel_pad(model, 7, pad_rng, 0.0);
  REQUIRE(padded.cfg.kernel_size == 7);
  auto images = random_images<double>(rng, 2, 32);
  auto a = forward_logits(model, images);
  auto b = forward_logits(padded, images);
  REQUIRE(bitwise_equal(a, b));

  // Center slice of a depthwise kernel equals the original exactly.
  const auto& src = model.params[model.columns[0].levels[0].blocks[0].dw.w];
  const auto& dst = padded.params[padded.columns[0].levels[0].blocks[0].dw.w];
  REQUIRE(dst.dims() == Shape{8, 1, 7, 7});
  for (std::int64_t c = 0; c < 8; ++c)
    for (std::int64_t y = 0; y < 3; ++y)
      for (std::int64_t x = 0; x < 3; ++x)
        REQUIRE(dst.data()[c * 49 + (y + 2) * 7 + (x + 2)] == src.data()[c * 9 + y * 3 + x]);
}

TEST_CASE("kernel padding with tiny std drifts logits negligibly", "[model]") {
  Rng rng(17);
  auto model = build_model<double>(tiny_desk(), rng);
  Rng pad_rng(18);
  auto padded = kernel_pad(model, 7, pad_rng, 1e-7);
  for (int it = 0; it < 10; ++it) {
    auto images = random_images<double>(rng, 2, 32);
    auto a = forward_logits(model, images);
    auto b = forward_logits(padded, images);
    REQUIRE(max_abs_diff(a, b) <= 1e-3);
  }
  Rng r2(19);
  REQUIRE_THROWS_AS(kernel_pad(model, 8, r2, 0.0), ValueError);
  REQUIRE_THROWS_AS(kernel_pad(model, 3, r2, 0.0), ValueError);
}

TEST_CASE("invalid configurations are rejected", "[model]") {
  Rng rng(20);
  {
    ModelConfig cfg = tiny_desk();
    cfg.channels = {8, 12, 24, 48};
    REQUIRE_THROWS_AS(build_model<double>(cfg, rng), ConfigError);
  }
  {
    ModelConfig cfg = tiny_desk();
    cfg.kernel_size = 4;
    REQUIRE_THROWS_AS(build_model<double>(cfg, rng), ConfigError);
  }
  {
    ModelConfig cfg = tiny_desk();
    cfg.input_h = 33;
    REQUIRE_THROWS_AS(build_model<double>(cfg, rng), ConfigError);
  }
  {
    ModelConfig cfg = tiny_desk();
    cfg.head_columns = {4};  // collides with the final column
    REQUIRE_THROWS_AS(build_model<double>(cfg, rng), ConfigError);
  }
  {
    ModelConfig cfg = tiny_desk();
    auto model = build_model<double>(cfg, rng);
    auto bad = Tensor<double>::zeros({1, 3, 64, 64});
    REQUIRE_THROWS_AS(forward_logits(model, bad), ShapeError);
  }
}
