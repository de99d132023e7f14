#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "oracles.hpp"
#include "revcol/config.hpp"
#include "revcol/train.hpp"

using namespace revcol;

namespace {

ModelConfig tiny_desk(int columns = 4, int heads_n = 3) {
  ModelConfig cfg;
  cfg.channels = {8, 16, 32, 64};
  cfg.blocks = {1, 1, 1, 1};
  cfg.columns = columns;
  cfg.num_classes = 4;
  cfg.input_h = cfg.input_w = 32;
  auto placed = place_heads(columns, heads_n);
  cfg.head_columns.assign(placed.begin(), placed.end() - 1);
  return cfg;
}

template <class T>
Batch<T> random_batch(Rng& rng, std::int64_t n, std::int64_t hw, std::int64_t classes) {
  Batch<T> b;
  b.images = Tensor<T>::zeros({n, 3, hw, hw});
  rng.fill_uniform(b.images, 0.0, 1.0);
  for (std::int64_t i = 0; i < n; ++i)
    b.labels.push_back(static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(classes))));
  return b;
}

template <class T>
double max_param_rel_diff(const RevColModel<T>& a, const RevColModel<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.params.size(); ++i)
    m = std::max(m, max_rel_diff(a.params.values[i], b.params.values[i], 1e-6));
  return m;
}

}  // namespace

TEST_CASE("head placement", "[train]") {
  REQUIRE(place_heads(8, 3) == std::vector<int>{2, 4, 6, 8});
  REQUIRE(place_heads(4, 1) == std::vector<int>{2, 4});
  REQUIRE(place_heads(4, 3) == std::vector<int>{1, 2, 3, 4});
  REQUIRE(place_heads(5, 0) == std::vector<int>{5});
  REQUIRE_THROWS_AS(place_heads(4, 5), ConfigError);
  REQUIRE_THROWS_AS(place_heads(2, 2), ConfigError);  // bumped head reaches the final column
}

TEST_CASE("default schedule weights", "[train]") {
  auto s = default_schedule(8, 3);
  REQUIRE(s.head_columns == std::vector<int>{2, 4, 6});
  REQUIRE(s.alpha == std::vector<double>{3.0, 2.0, 1.0, 0.0});
  REQUIRE(s.beta == std::vector<double>{0.18, 0.35, 0.53, 1.0});
  auto s0 = default_schedule(4, 0);
  REQUIRE(s0.alpha == std::vector<double>{0.0});
  REQUIRE(s0.beta == std::vector<double>{1.0});
  auto s2 = default_schedule(8, 2);
  REQUIRE(s2.alpha.front() == 3.0);
  REQUIRE(s2.alpha.back() == 0.0);
  REQUIRE(s2.beta.front() == Catch::Approx(0.18));
  REQUIRE(s2.beta.back() == 1.0);
  // Monotone by construction.
  SupervisionSchedule bad = s;
  bad.alpha = {1.0, 2.0, 1.0, 0.0};
  REQUIRE_THROWS_AS(bad.validate(8), ConfigError);
}

TEST_CASE("compound loss identities", "[train]") {
  // One slot with known term values: recon logits 0 against target 0.5
  // gives ln 2, uniform class logits give ln 4.
  std::vector<HeadOutput<double>> heads(1);
  heads[0].column = 1;
  heads[0].recon_logits = Value<double>{Tensor<double>::zeros({2, 3, 4, 4}), -1};
  heads[0].class_logits = Value<double>{Tensor<double>::zeros({2, 4}), -1};
  auto target = Tensor<double>::full({2, 3, 4, 4}, 0.5);
  std::vector<std::int64_t> labels{0, 2};
  Tape<double> tape(false);

  SupervisionSchedule one;
  one.head_columns = {};
  one.alpha = {1.0};
  one.beta = {1.0};
  LossBreakdown bd;
  auto loss = compound_loss(tape, heads, target, labels, one, 0.0, &bd);
  REQUIRE(loss.v.item() == Catch::Approx(std::log(2.0) + std::log(4.0)).epsilon(1e-12));
  REQUIRE(bd.bce[0] == Catch::Approx(std::log(2.0)).epsilon(1e-12));
  REQUIRE(bd.ce[0] == Catch::Approx(std::log(4.0)).epsilon(1e-12));

  // All alpha zero: only the beta-weighted CE terms remain.
  SupervisionSchedule ce_only = one;
  ce_only.alpha = {0.0};
  ce_only.beta = {0.7};
  auto loss2 = compound_loss(tape, heads, target, labels, ce_only, 0.0, &bd);
  REQUIRE(loss2.v.item() == Catch::Approx(0.7 * std::log(4.0)).epsilon(1e-12));

  // Default 4-slot schedule: weighted sum of the measured terms.
  std::vector<HeadOutput<double>> four(4, heads[0]);
  auto sched = default_schedule(8, 3);
  LossBreakdown bd4;
  auto loss4 = compound_loss(tape, four, target, labels, sched, 0.0, &bd4);
  double want = 0;
  for (int i = 0; i < 4; ++i) want += sched.alpha[static_cast<std::size_t>(i)] * bd4.bce[static_cast<std::size_t>(i)] +
                                      sched.beta[static_cast<std::size_t>(i)] * bd4.ce[static_cast<std::size_t>(i)];
  REQUIRE(loss4.v.item() == Catch::Approx(want).epsilon(1e-12));

  SupervisionSchedule wrong = sched;
  wrong.alpha.pop_back();
  wrong.beta.pop_back();
  REQUIRE_THROWS_AS(compound_loss(tape, four, target, labels, wrong, 0.0, nullptr), ConfigError);
}

TEST_CASE("minmax reconstruction targets", "[train]") {
  auto images = Tensor<double>::from({2, 1, 1, 3}, {1.0, 2.0, 3.0, 5.0, 5.0, 5.0});
  auto t = minmax_targets(images);
  REQUIRE(t.data()[0] == 0.0);
  REQUIRE(t.data()[1] == 0.5);
  REQUIRE(t.data()[2] == 1.0);
  // Constant image maps to zeros.
  REQUIRE(t.data()[3] == 0.0);
  REQUIRE(t.data()[4] == 0.0);
  REQUIRE(t.data()[5] == 0.0);
}

TEST_CASE("zero learning rate leaves parameters unchanged", "[train]") {
  Rng rng(1);
  auto model = build_model<double>(tiny_desk(), rng);
  auto before = model.params.values;
  for (auto& t : before) t = t.clone();
  AdamW<double> opt;
  auto sched = default_schedule(4, 3);
  TrainConfig tc;
  tc.weight_decay = 0.0;
  Rng drng(2);
  auto batch = random_batch<double>(drng, 4, 32, 4);
  auto m = train_step(model, opt, batch, sched, tc, 0.0, ExecMode::reversible);
  REQUIRE(std::isfinite(m.loss));
  REQUIRE(m.grad_norm > 0);
  for (std::size_t i = 0; i < before.size(); ++i)
    REQUIRE(max_abs_diff(before[i], model.params.values[i]) == 0.0);
}

TEST_CASE("store-all and reversible modes agree through the optimizer", "[train]") {
  auto cfg = tiny_desk();
  Rng rng_a(7), rng_b(7);
  auto ma = build_model<double>(cfg, rng_a);
  auto mb = build_model<double>(cfg, rng_b);
  AdamW<double> oa, ob;
  auto sched = default_schedule(4, 3);
  TrainConfig tc;
  tc.label_smoothing = 0.1;

  Rng drng(3);
  auto batch = random_batch<double>(drng, 4, 32, 4);

  // Single step: post-step parameters agree to 1e-9 relative.
  auto m1 = train_step(ma, oa, batch, sched, tc, 1e-3, ExecMode::store_all);
  auto m2 = train_step(mb, ob, batch, sched, tc, 1e-3, ExecMode::reversible);
  REQUIRE(oracle::rel_err(m1.loss, m2.loss) <= 1e-12);  // identical forward
  REQUIRE(max_param_rel_diff(ma, mb) <= 1e-9);

  // Ten steps: divergence stays within 1e-7 relative.
  for (int step = 1; step < 10; ++step) {
    auto b = random_batch<double>(drng, 4, 32, 4);
    train_step(ma, oa, b, sched, tc, 1e-3, ExecMode::store_all);
    train_step(mb, ob, b, sched, tc, 1e-3, ExecMode::reversible);
  }
  REQUIRE(max_param_rel_diff(ma, mb) <= 1e-7);
}

TEST_CASE("gamma floor holds after training steps", "[train]") {
  Rng rng(4);
  auto model = build_model<double>(tiny_desk(), rng);
  AdamW<double> opt;
  auto sched = default_schedule(4, 3);
  TrainConfig tc;
  Rng drng(5);
  for (int i = 0; i < 5; ++i) {
    auto batch = random_batch<double>(drng, 4, 32, 4);
    train_step(model, opt, batch, sched, tc, 0.05, ExecMode::reversible);
  }
  for (auto id : model.gamma_param_ids()) {
    const auto& g = model.params[id];
    for (std::int64_t i = 0; i < g.numel(); ++i)
      REQUIRE(std::abs(g.data()[i]) >= model.cfg.gamma_floor);
  }
}

TEST_CASE("gamma clamp survives adversarial updates", "[train]") {
  Rng rng(6);
  auto model = build_model<double>(tiny_desk(), rng);
  AdamW<double> opt;
  opt.config().lr = 0.5;
  Rng grng(7);
  for (int it = 0; it < 100; ++it) {
    std::vector<Tensor<double>> grads(model.params.size());
    for (auto id : model.gamma_param_ids()) {
      const auto& g = model.params[id];
      auto grad = Tensor<double>::zeros(g.dims());
      // Push every channel toward (and across) zero.
      for (std::int64_t i = 0; i < g.numel(); ++i)
        grad.data()[i] = (g.data()[i] > 0 ? 1.0 : -1.0) * (1.0 + grng.uniform());
      grads[static_cast<std::size_t>(id)] = std::move(grad);
    }
    opt.step(model.params.values, grads);
    model.clamp_gammas();
    for (auto id : model.gamma_param_ids()) {
      const auto& g = model.params[id];
      for (std::int64_t i = 0; i < g.numel(); ++i)
        REQUIRE(std::abs(g.data()[i]) >= model.cfg.gamma_floor);
    }
  }
}

TEST_CASE("loss stays finite on degenerate inputs", "[train]") {
  Rng rng(8);
  auto model = build_model<double>(tiny_desk(), rng);
  AdamW<double> opt;
  auto sched = default_schedule(4, 3);
  TrainConfig tc;
  for (double fill : {0.0, 1.0}) {
    Batch<double> batch;
    batch.images = Tensor<double>::full({2, 3, 32, 32}, fill);
    batch.labels = {0, 1};
    auto m = train_step(model, opt, batch, sched, tc, 1e-4, ExecMode::reversible);
    REQUIRE(std::isfinite(m.loss));
    for (double v : m.bce) REQUIRE(std::isfinite(v));
    for (double v : m.ce) REQUIRE(std::isfinite(v));
  }
}

TEST_CASE("single column with no heads is plain supervised training", "[train]") {
  auto cfg = tiny_desk(1, 0);
  Rng rng(9);
  auto model = build_model<double>(cfg, rng);
  REQUIRE(model.heads.size() == 1);
  REQUIRE(model.gamma_param_ids().empty());
  AdamW<double> opt;
  auto sched = default_schedule(1, 0);
  TrainConfig tc;
  Rng drng(10);
  auto batch = random_batch<double>(drng, 4, 32, 4);
  double prev = 1e300;
  for (int i = 0; i < 3; ++i) {
    auto m = train_step(model, opt, batch, sched, tc, 1e-3, ExecMode::reversible);
    REQUIRE(std::isfinite(m.loss));
    prev = m.loss;
  }
  REQUIRE(std::isfinite(prev));
}

TEST_CASE("loss decreases on a separable synthetic set", "[train]") {
  auto ds = synth_dataset<float>(SynthKind::gaussian_blobs, 2, 64, 32, 11);
  auto cfg = tiny_desk(4, 3);
  cfg.num_classes = 2;
  Rng rng(12);
  auto model = build_model<float>(cfg, rng);
  AdamW<float> opt;
  auto sched = default_schedule(4, 3);
  TrainConfig tc;
  tc.batch_size = 16;
  tc.epochs = 13;
  tc.total_steps = 50;
  tc.warmup_steps = 5;
  tc.peak_lr = 4e-3;
  tc.seed = 13;
  tc.mode = ExecMode::reversible;
  auto result = train_loop(model, opt, ds, sched, tc, nullptr);
  REQUIRE(result.steps == 50);
  double first = 0, last = 0;
  for (int i = 0; i < 5; ++i) {
    first += result.log[static_cast<std::size_t>(i)].loss;
    last += result.log[result.log.size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  REQUIRE(last < first * 0.95);
}

TEST_CASE("metrics line format", "[train]") {
  StepMetrics m;
  m.step = 3;
  m.lr = 0.01;
  m.loss = 1.5;
  m.bce = {0.5, 0.25};
  m.ce = {1.0, 0.75};
  m.grad_norm = 2.0;
  std::ostringstream os;
  emit_metrics(os, m);
  REQUIRE(os.str() == "step=3 lr=0.01 loss=1.5 bce_1=0.5 bce_2=0.25 ce_1=1 ce_2=0.75 gnorm=2\n");
}
