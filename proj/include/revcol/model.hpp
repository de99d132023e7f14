#pragma once

#include <array>
#include <string>
#include <vector>

#include "revcol/reversible.hpp"
#include "revcol/rng.hpp"

namespace revcol {

struct ModelConfig {
  std::array<std::int64_t, 4> channels{64, 128, 256, 512};  // per level
  std::array<std::int64_t, 4> blocks{2, 2, 4, 2};           // per level
  int columns = 4;
  std::int64_t kernel_size = 3;  // depthwise kernel, odd
  std::int64_t num_classes = 1000;
  std::int64_t input_h = 224;
  std::int64_t input_w = 224;
  std::vector<int> head_columns;  // intermediate supervision columns; the final column always carries the classifier
  double gamma_floor = 1e-3;

  void validate() const {
    for (int l = 1; l < 4; ++l)
      if (channels[l] != 2 * channels[l - 1])
        throw ConfigError("channels must double between adjacent levels, got " +
                          std::to_string(channels[l - 1]) + " -> " + std::to_string(channels[l]));
    for (auto b : blocks)
      if (b < 1) throw ConfigError("block count must be >= 1");
    if (channels[0] < 1) throw ConfigError("channels must be positive");
    if (columns < 1) throw ConfigError("columns must be >= 1");
    if (kernel_size < 1 || kernel_size % 2 == 0)
      throw ConfigError("kernel_size must be odd, got " + std::to_string(kernel_size));
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (input_h % 32 != 0 || input_w % 32 != 0)
      throw ConfigError("input size must be divisible by 32, got " + std::to_string(input_h) + "x" +
                        std::to_string(input_w));
    if (channels[3] % 8 != 0)
      throw ConfigError("level-4 channels must be divisible by 8 for the decoder stages");
    if (gamma_floor <= 0) throw ConfigError("gamma_floor must be > 0");
    int prev = 0;
    for (int c : head_columns) {
      if (c < 1 || c > columns)
        throw ConfigError("head column " + std::to_string(c) + " outside [1," +
                          std::to_string(columns) + "]");
      if (c == columns)
        throw ConfigError("head column " + std::to_string(c) + " collides with the final column");
      if (c <= prev) throw ConfigError("head columns must be strictly increasing");
      prev = c;
    }
  }
};

template <class T>
struct ParamStore {
  std::vector<std::string> names;
  std::vector<Tensor<T>> values;

  std::int32_t add(std::string name, Tensor<T> t) {
    t.mark_parameter();
    names.push_back(std::move(name));
    values.push_back(std::move(t));
    return static_cast<std::int32_t>(values.size()) - 1;
  }
  std::size_t size() const { return values.size(); }
  Tensor<T>& operator[](std::int32_t id) { return values.at(static_cast<std::size_t>(id)); }
  const Tensor<T>& operator[](std::int32_t id) const { return values.at(static_cast<std::size_t>(id)); }
};

struct ConvP {
  std::int32_t w = -1, b = -1;
};
struct NormP {
  std::int32_t gain = -1, shift = -1;
};
struct BlockP {
  ConvP dw;
  NormP norm;
  ConvP pw_expand, pw_contract;
  std::int32_t res_scale = -1;
};
struct FusionP {
  bool has_down = false;  // level 1 reads the stem output directly
  ConvP down;
  NormP down_norm;
  bool has_up = false;  // absent for level 4 and for column 1
  ConvP up;
  NormP up_norm;
};
struct LevelP {
  FusionP fusion;
  std::vector<BlockP> blocks;
};

template <class T>
struct ColumnP {
  std::array<LevelP, 4> levels;
  std::array<GammaScale<T>, 4> gammas;  // only set for columns >= 2
  bool has_gamma = false;
};

struct DecoderStageP {
  ConvP dw;
  NormP norm;
  ConvP pw;  // halves the channels
};
struct DecoderP {
  std::array<DecoderStageP, 3> stages;
  ConvP proj;  // pointwise to 3 channels
};
template <class T>
struct HeadP {
  int column = 0;
  NormP cls_norm;
  ConvP cls_fc;
  DecoderP decoder;
};

inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kResScaleInit = 1e-6;
inline constexpr double kWeightInitStd = 0.02;

template <class T>
struct RevColModel {
  ModelConfig cfg;
  ParamStore<T> params;
  std::vector<bool> aux_param;  // decoder + intermediate-classifier parameters

  ConvP stem_conv;
  NormP stem_norm;
  std::vector<ColumnP<T>> columns;
  std::vector<HeadP<T>> heads;  // intermediate heads ascending; final head last

  const HeadP<T>& final_head() const { return heads.back(); }

  void clamp_gammas() {
    for (auto& col : columns)
      if (col.has_gamma)
        for (auto& g : col.gammas) g.clamp();
  }

  std::vector<std::int32_t> gamma_param_ids() const {
    std::vector<std::int32_t> ids;
    for (const auto& col : columns)
      if (col.has_gamma)
        for (const auto& g : col.gammas) ids.push_back(g.param_id);
    return ids;
  }
};

// ------------------------------------------------------------- builder ---

namespace detail {

template <class T>
ConvP make_conv(RevColModel<T>& m, const std::string& name, Shape wdims, Rng& rng, bool aux) {
  auto w = Tensor<T>::zeros(wdims, MemTag::parameter);
  rng.fill_normal(w, 0.0, kWeightInitStd);
  ConvP p;
  p.w = m.params.add(name + ".w", std::move(w));
  p.b = m.params.add(name + ".b", Tensor<T>::zeros({wdims[0]}, MemTag::parameter));
  m.aux_param.resize(m.params.size(), aux);
  return p;
}

template <class T>
NormP make_norm(RevColModel<T>& m, const std::string& name, std::int64_t c, bool aux) {
  NormP p;
  p.gain = m.params.add(name + ".gain", Tensor<T>::full({c}, T(1), MemTag::parameter));
  p.shift = m.params.add(name + ".shift", Tensor<T>::zeros({c}, MemTag::parameter));
  m.aux_param.resize(m.params.size(), aux);
  return p;
}

template <class T>
BlockP make_block(RevColModel<T>& m, const std::string& name, std::int64_t c, std::int64_t k,
                  Rng& rng, bool aux) {
  BlockP b;
  b.dw = make_conv(m, name + ".dw", {c, 1, k, k}, rng, aux);
  b.norm = make_norm(m, name + ".norm", c, aux);
  b.pw_expand = make_conv(m, name + ".pw1", {4 * c, c, 1, 1}, rng, aux);
  b.pw_contract = make_conv(m, name + ".pw2", {c, 4 * c, 1, 1}, rng, aux);
  b.res_scale = m.params.add(name + ".scale",
                             Tensor<T>::full({c}, static_cast<T>(kResScaleInit), MemTag::parameter));
  m.aux_param.resize(m.params.size(), aux);
  return b;
}

template <class T>
DecoderP make_decoder(RevColModel<T>& m, const std::string& name, std::int64_t c4, Rng& rng) {
  DecoderP d;
  std::int64_t c = c4;
  for (int s = 0; s < 3; ++s) {
    const std::string sn = name + ".stage" + std::to_string(s + 1);
    d.stages[static_cast<std::size_t>(s)].dw = make_conv(m, sn + ".dw", {c, 1, 3, 3}, rng, true);
    d.stages[static_cast<std::size_t>(s)].norm = make_norm<T>(m, sn + ".norm", c, true);
    d.stages[static_cast<std::size_t>(s)].pw = make_conv(m, sn + ".pw", {c / 2, c, 1, 1}, rng, true);
    c /= 2;
  }
  d.proj = make_conv(m, name + ".proj", {3, c, 1, 1}, rng, true);
  return d;
}

}  // namespace detail

template <class T>
RevColModel<T> build_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  RevColModel<T> m;
  m.cfg = cfg;
  const auto& C = cfg.channels;
  const std::int64_t k = cfg.kernel_size;

  m.stem_conv = detail::make_conv(m, "stem.conv", {C[0], 3, 4, 4}, rng, false);
  m.stem_norm = detail::make_norm<T>(m, "stem.norm", C[0], false);

  m.columns.resize(static_cast<std::size_t>(cfg.columns));
  for (int col = 1; col <= cfg.columns; ++col) {
    auto& cp = m.columns[static_cast<std::size_t>(col - 1)];
    cp.has_gamma = col >= 2;
    for (int lvl = 1; lvl <= 4; ++lvl) {
      auto& lp = cp.levels[static_cast<std::size_t>(lvl - 1)];
      const std::string base = "col" + std::to_string(col) + ".lv" + std::to_string(lvl);
      if (lvl >= 2) {
        lp.fusion.has_down = true;
        lp.fusion.down = detail::make_conv(m, base + ".down", {C[lvl - 1], C[lvl - 2], 2, 2}, rng, false);
        lp.fusion.down_norm = detail::make_norm<T>(m, base + ".down_norm", C[lvl - 1], false);
      }
      if (col >= 2 && lvl <= 3) {
        lp.fusion.has_up = true;
        lp.fusion.up = detail::make_conv(m, base + ".up", {C[lvl - 1], C[lvl], 1, 1}, rng, false);
        lp.fusion.up_norm = detail::make_norm<T>(m, base + ".up_norm", C[lvl - 1], false);
      }
      for (std::int64_t b = 0; b < cfg.blocks[lvl - 1]; ++b)
        lp.blocks.push_back(
            detail::make_block(m, base + ".blk" + std::to_string(b + 1), C[lvl - 1], k, rng, false));
      if (cp.has_gamma) {
        auto g = GammaScale<T>::ones(C[lvl - 1], static_cast<T>(cfg.gamma_floor));
        g.param_id = m.params.add(base + ".gamma", g.values);
        m.aux_param.resize(m.params.size(), false);
        cp.gammas[static_cast<std::size_t>(lvl - 1)] = std::move(g);
      }
    }
  }

  auto add_head = [&](int col, bool final) {
    HeadP<T> h;
    h.column = col;
    const std::string base = (final ? std::string("head.final") : "head.col" + std::to_string(col));
    // The final classifier is the model's inference output; everything else
    // (intermediate classifiers, all decoders) is training-only.
    h.cls_norm = detail::make_norm<T>(m, base + ".cls_norm", C[3], !final);
    auto w = Tensor<T>::zeros({cfg.num_classes, C[3]}, MemTag::parameter);
    rng.fill_normal(w, 0.0, kWeightInitStd);
    h.cls_fc.w = m.params.add(base + ".cls_fc.w", std::move(w));
    h.cls_fc.b = m.params.add(base + ".cls_fc.b", Tensor<T>::zeros({cfg.num_classes}, MemTag::parameter));
    m.aux_param.resize(m.params.size(), !final);
    h.decoder = detail::make_decoder(m, base + ".dec", C[3], rng);
    m.heads.push_back(std::move(h));
  };
  for (int col : cfg.head_columns) add_head(col, false);
  add_head(cfg.columns, true);
  return m;
}

// --------------------------------------------------------- column bank ---

// F for slot s of column `col`: fusion of the current column's lower level
// (patch-merge conv + norm; the stem output passes through unchanged at
// level 1) with the previous column's next-higher level (pointwise channel
// map, norm, nearest 2x), then the residual block body.
template <class T>
class ColumnBank {
 public:
  explicit ColumnBank(RevColModel<T>& model) : m_(model) {}

  int order() const { return 4; }
  UnitArity arity() const { return UnitArity::simplified; }
  bool first_column_plain() const { return true; }
  bool has_level0() const { return true; }

  ReversibleUnitConfig unit_config(std::int64_t batch) const {
    ReversibleUnitConfig cfg;
    cfg.order = 4;
    cfg.arity = UnitArity::simplified;
    for (int lvl = 1; lvl <= 4; ++lvl)
      cfg.slot_shapes.push_back({batch, m_.cfg.channels[static_cast<std::size_t>(lvl - 1)],
                                 m_.cfg.input_h >> (lvl + 1), m_.cfg.input_w >> (lvl + 1)});
    return cfg;
  }

  GammaScale<T>& gamma(int col, int slot) {
    return m_.columns.at(static_cast<std::size_t>(col - 1)).gammas.at(static_cast<std::size_t>(slot - 1));
  }

  Value<T> eval(Tape<T>& tape, int col, int slot, std::span<const Value<T>> inputs) {
    const auto& lp = m_.columns.at(static_cast<std::size_t>(col - 1))
                         .levels.at(static_cast<std::size_t>(slot - 1));
    Value<T> x;
    if (lp.fusion.has_down) {
      Value<T> w = leaf(tape, lp.fusion.down.w);
      Value<T> b = leaf(tape, lp.fusion.down.b);
      x = tape.conv2d(inputs[0], w, &b, {2, 0, 1});
      x = norm(tape, x, lp.fusion.down_norm);
    } else {
      x = inputs[0];
    }
    if (lp.fusion.has_up) {
      if (inputs.size() < 2) throw ValueError("column bank: missing up-branch input");
      Value<T> w = leaf(tape, lp.fusion.up.w);
      Value<T> b = leaf(tape, lp.fusion.up.b);
      Value<T> u = tape.conv2d(inputs[1], w, &b, {1, 0, 1});
      u = norm(tape, u, lp.fusion.up_norm);
      u = tape.nearest_upsample(u, 2);
      x = tape.add(x, u);
    }
    for (const auto& bp : lp.blocks) x = block(tape, x, bp);
    return x;
  }

  Value<T> block(Tape<T>& tape, const Value<T>& x, const BlockP& bp) {
    const auto& wdw = m_.params[bp.dw.w];
    const std::int64_t k = wdw.dim(2);
    const std::int64_t c = wdw.dim(0);
    Value<T> w = leaf(tape, bp.dw.w);
    Value<T> b = leaf(tape, bp.dw.b);
    Value<T> y = tape.conv2d(x, w, &b, {1, (k - 1) / 2, c});
    y = norm(tape, y, bp.norm);
    Value<T> w1 = leaf(tape, bp.pw_expand.w);
    Value<T> b1 = leaf(tape, bp.pw_expand.b);
    y = tape.conv2d(y, w1, &b1, {1, 0, 1});
    y = tape.gelu(y);
    Value<T> w2 = leaf(tape, bp.pw_contract.w);
    Value<T> b2 = leaf(tape, bp.pw_contract.b);
    y = tape.conv2d(y, w2, &b2, {1, 0, 1});
    Value<T> s = leaf(tape, bp.res_scale);
    y = tape.mul_channel(y, s);
    return tape.add(x, y);
  }

  Value<T> leaf(Tape<T>& tape, std::int32_t pid) { return tape.leaf(m_.params[pid], pid); }
  Value<T> norm(Tape<T>& tape, const Value<T>& x, const NormP& np) {
    Value<T> g = leaf(tape, np.gain);
    Value<T> s = leaf(tape, np.shift);
    return tape.layer_norm(x, g, s, kLayerNormEps);
  }

 private:
  RevColModel<T>& m_;
};

// ---------------------------------------------------------------- heads ---

template <class T>
Value<T> stem_forward(RevColModel<T>& m, Tape<T>& tape, const Value<T>& images) {
  ColumnBank<T> bank(m);
  Value<T> w = bank.leaf(tape, m.stem_conv.w);
  Value<T> b = bank.leaf(tape, m.stem_conv.b);
  Value<T> x = tape.conv2d(images, w, &b, {4, 0, 1});
  return bank.norm(tape, x, m.stem_norm);
}

// Global average pool over the spatial axes, layer norm, linear classifier.
template <class T>
Value<T> classifier_head(RevColModel<T>& m, Tape<T>& tape, const Value<T>& level4,
                         const HeadP<T>& head) {
  ColumnBank<T> bank(m);
  Value<T> x = tape.global_avg_pool(level4);
  x = bank.norm(tape, x, head.cls_norm);
  Value<T> w = bank.leaf(tape, head.cls_fc.w);
  Value<T> b = bank.leaf(tape, head.cls_fc.b);
  return tape.linear(x, w, &b);
}

// Three stages of [nearest 2x, depthwise conv, norm, channel-halving
// pointwise, gelu] from H/32 up to H/4, then a pointwise projection to 3
// channels and a nearest 4x back to full resolution. Outputs are logits for
// the reconstruction BCE.
template <class T>
Value<T> decoder_head(RevColModel<T>& m, Tape<T>& tape, const Value<T>& level4,
                      const HeadP<T>& head) {
  ColumnBank<T> bank(m);
  Value<T> x = level4;
  for (const auto& st : head.decoder.stages) {
    x = tape.nearest_upsample(x, 2);
    const std::int64_t c = m.params[st.dw.w].dim(0);
    Value<T> w = bank.leaf(tape, st.dw.w);
    Value<T> b = bank.leaf(tape, st.dw.b);
    x = tape.conv2d(x, w, &b, {1, 1, c});
    x = bank.norm(tape, x, st.norm);
    Value<T> pw = bank.leaf(tape, st.pw.w);
    Value<T> pb = bank.leaf(tape, st.pw.b);
    x = tape.conv2d(x, pw, &pb, {1, 0, 1});
    x = tape.gelu(x);
  }
  Value<T> pw = bank.leaf(tape, head.decoder.proj.w);
  Value<T> pb = bank.leaf(tape, head.decoder.proj.b);
  x = tape.conv2d(x, pw, &pb, {1, 0, 1});
  return tape.nearest_upsample(x, 4);
}

// ------------------------------------------------------------- forward ---

enum class ExecMode { store_all, reversible };

template <class T>
struct HeadOutput {
  int column = 0;
  Value<T> class_logits;
  Value<T> recon_logits;
};

template <class T>
struct ForwardResult {
  Value<T> stem_out;
  std::vector<Value<T>> last_state;
  std::vector<HeadOutput<T>> heads;               // ascending columns; final head last
  std::vector<std::vector<Value<T>>> all_states;  // populated when keep_states
};

// Runs the whole network on the given tape. With a recording tape this is
// the store-all path; with a paused tape it is the activation-free forward
// used by reversible training and inference (identical arithmetic either
// way, only retention differs).
template <class T>
ForwardResult<T> run_forward(RevColModel<T>& m, Tape<T>& tape, const Value<T>& images,
                             bool keep_states = false, bool with_heads = true) {
  if (images.v.rank() != 4) throw ShapeError("forward: images must be N,C,H,W");
  if (images.v.dim(2) != m.cfg.input_h || images.v.dim(3) != m.cfg.input_w)
    throw ShapeError("forward: input " + shape_str(images.v.dims()) + " does not match configured " +
                     std::to_string(m.cfg.input_h) + "x" + std::to_string(m.cfg.input_w));
  ColumnBank<T> bank(m);
  ForwardResult<T> out;
  out.stem_out = stem_forward(m, tape, images);

  std::size_t next_head = 0;
  auto maybe_head = [&](int col, const std::vector<Value<T>>& state) {
    if (!with_heads) return;
    while (next_head < m.heads.size() && m.heads[next_head].column == col) {
      HeadOutput<T> h;
      h.column = col;
      h.class_logits = classifier_head(m, tape, state[3], m.heads[next_head]);
      h.recon_logits = decoder_head(m, tape, state[3], m.heads[next_head]);
      out.heads.push_back(std::move(h));
      ++next_head;
    }
  };

  std::vector<Value<T>> state = column_forward_first(tape, bank, out.stem_out);
  if (keep_states) out.all_states.push_back(state);
  maybe_head(1, state);
  for (int col = 2; col <= m.cfg.columns; ++col) {
    state = column_forward(tape, bank, col, state, &out.stem_out);
    if (keep_states) out.all_states.push_back(state);
    maybe_head(col, state);
  }
  out.last_state = std::move(state);
  return out;
}

// Paused-tape forward; returns the final classifier logits.
template <class T>
Tensor<T> forward_logits(RevColModel<T>& m, const Tensor<T>& images) {
  Tape<T> tape(false);
  auto fr = run_forward(m, tape, Value<T>{images, -1}, false, false);
  return classifier_head(m, tape, fr.last_state[3], m.final_head()).v;
}

// ------------------------------------------------------------ counting ---

template <class T>
std::int64_t count_params(const RevColModel<T>& m, bool include_aux = false) {
  std::int64_t total = 0;
  for (std::size_t i = 0; i < m.params.size(); ++i)
    if (include_aux || !m.aux_param[i]) total += m.params.values[i].numel();
  return total;
}

// Multiply-accumulates of the conv and linear layers on the inference path
// (the convention the architecture tables use; normalizations, activations
// and the training-only heads are not counted).
inline std::int64_t estimate_flops(const ModelConfig& cfg, std::int64_t h, std::int64_t w) {
  const auto& C = cfg.channels;
  auto spatial = [&](int lvl) { return (h >> (lvl + 1)) * (w >> (lvl + 1)); };
  std::int64_t macs = (h / 4) * (w / 4) * 16 * 3 * C[0];  // stem
  for (int col = 1; col <= cfg.columns; ++col)
    for (int lvl = 1; lvl <= 4; ++lvl) {
      const std::int64_t s = spatial(lvl);
      const std::int64_t c = C[lvl - 1];
      if (lvl >= 2) macs += s * 4 * C[lvl - 2] * c;                       // patch-merge conv
      if (col >= 2 && lvl <= 3) macs += spatial(lvl + 1) * C[lvl] * c;    // up-branch channel map
      macs += cfg.blocks[lvl - 1] * s * (cfg.kernel_size * cfg.kernel_size * c + 8 * c * c);
    }
  macs += C[3] * cfg.num_classes;
  return macs;
}

template <class T>
std::int64_t estimate_flops(const RevColModel<T>& m, std::int64_t h, std::int64_t w) {
  return estimate_flops(m.cfg, h, w);
}

// --------------------------------------------------------- kernel pad ---

// Grows every depthwise kernel from k x k to new_k x new_k: the original
// kernel sits exactly in the center, the border is Gaussian(0, std). With
// std = 0 the border is exactly +0.0, and because convolution accumulates
// bias-first in tap order the padded model's outputs are bit-identical.
template <class T>
RevColModel<T> kernel_pad(const RevColModel<T>& src, std::int64_t new_k, Rng& rng, double std = 1e-7) {
  if (new_k % 2 == 0) throw ValueError("kernel_pad: new kernel size must be odd");
  if (new_k <= src.cfg.kernel_size)
    throw ValueError("kernel_pad: new kernel size must exceed the current one");
  ModelConfig cfg = src.cfg;
  cfg.kernel_size = new_k;
  Rng build_rng(0);
  RevColModel<T> dst = build_model<T>(cfg, build_rng);
  const std::int64_t k = src.cfg.kernel_size;
  const std::int64_t off = (new_k - k) / 2;
  for (std::size_t i = 0; i < src.params.size(); ++i) {
    const auto& sp = src.params.values[i];
    auto& dp = dst.params.values[i];
    if (sp.dims() == dp.dims()) {
      std::copy(sp.data(), sp.data() + sp.numel(), dp.data());
      continue;
    }
    // Depthwise kernel: [C,1,k,k] -> [C,1,new_k,new_k].
    if (std == 0.0)
      std::fill(dp.data(), dp.data() + dp.numel(), T(0));
    else
      rng.fill_normal(dp, 0.0, std);
    const std::int64_t c = sp.dim(0);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < k; ++y)
        for (std::int64_t x = 0; x < k; ++x)
          dp.data()[ch * new_k * new_k + (y + off) * new_k + (x + off)] =
              sp.data()[ch * k * k + y * k + x];
  }
  return dst;
}

}  // namespace revcol
