#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "revcol/kernels.hpp"
#include "revcol/tensor.hpp"

namespace revcol {

template <class T>
struct Value {
  Tensor<T> v;
  std::int32_t id = -1;

  bool recorded() const { return id >= 0; }
};

// Collects parameter gradients across one or more backward sweeps. Slots
// are addressed by parameter id; buffers are tagged as parameter storage so
// they stay out of the activation accounting.
template <class T>
class GradSink {
 public:
  explicit GradSink(std::size_t param_count) : grads_(param_count) {}

  void add(std::size_t param_id, Tensor<T>&& g) {
    auto& slot = grads_.at(param_id);
    if (!slot.defined()) {
      slot = std::move(g);
      if (slot.storage_use_count() > 1) slot = slot.clone();
      slot.mark_parameter();
    } else {
      slot.add_(g);
    }
  }

  const Tensor<T>& grad(std::size_t param_id) const { return grads_.at(param_id); }
  std::vector<Tensor<T>>& all() { return grads_; }
  const std::vector<Tensor<T>>& all() const { return grads_; }

 private:
  std::vector<Tensor<T>> grads_;
};

// Reverse-mode tape. Ops append nodes in execution order (which is a valid
// topological order), each node holding the saved tensors its gradient rule
// needs. When paused, ops only compute values: nothing is appended, nothing
// is saved. Confined to one logical execution thread.
template <class T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }
  std::size_t size() const { return nodes_.size(); }

  // ------------------------------------------------------------ leaves ---

  Value<T> leaf(Tensor<T> t, std::int32_t param_id = -1) {
    if (!recording_) return {std::move(t), -1};
    const auto id = append(t, {}, nullptr, param_id);
    return {std::move(t), id};
  }

  // ---------------------------------------------------------------- ops ---

  Value<T> conv2d(const Value<T>& x, const Value<T>& w, const Value<T>* bias,
                  const kernels::ConvSpec& spec) {
    Tensor<T> out = kernels::conv2d_fwd(x.v, w.v, bias ? &bias->v : nullptr, spec);
    if (!recording_) return {std::move(out), -1};
    Tensor<T> xs = x.v, ws = w.v;
    const bool has_bias = bias != nullptr;
    const Shape xdims = x.v.dims(), wdims = w.v.dims();
    auto id = append(out, {x.id, w.id, has_bias ? bias->id : -1},
                     [xs, ws, xdims, wdims, spec, has_bias](Tape& tp, const Node& nd,
                                                            const Tensor<T>& g) {
                       tp.accumulate(nd.inputs[0], kernels::conv2d_bwd_input(g, ws, xdims, spec));
                       tp.accumulate(nd.inputs[1], kernels::conv2d_bwd_weight(g, xs, wdims, spec));
                       if (has_bias) tp.accumulate(nd.inputs[2], kernels::conv2d_bwd_bias(g));
                     });
    return {std::move(out), id};
  }

  Value<T> linear(const Value<T>& x, const Value<T>& w, const Value<T>* bias) {
    Tensor<T> out = kernels::linear_fwd(x.v, w.v, bias ? &bias->v : nullptr);
    if (!recording_) return {std::move(out), -1};
    Tensor<T> xs = x.v, ws = w.v;
    const bool has_bias = bias != nullptr;
    const Shape xdims = x.v.dims(), wdims = w.v.dims();
    const std::int64_t dout = w.v.dim(0);
    auto id = append(out, {x.id, w.id, has_bias ? bias->id : -1},
                     [xs, ws, xdims, wdims, dout, has_bias](Tape& tp, const Node& nd,
                                                            const Tensor<T>& g) {
                       tp.accumulate(nd.inputs[0], kernels::linear_bwd_input(g, ws, xdims));
                       tp.accumulate(nd.inputs[1], kernels::linear_bwd_weight(g, xs, wdims));
                       if (has_bias) tp.accumulate(nd.inputs[2], kernels::linear_bwd_bias(g, dout));
                     });
    return {std::move(out), id};
  }

  Value<T> layer_norm(const Value<T>& x, const Value<T>& gain, const Value<T>& shift, double eps) {
    Tensor<T> out = kernels::layer_norm_fwd(x.v, gain.v, shift.v, eps);
    if (!recording_) return {std::move(out), -1};
    Tensor<T> xs = x.v, gs = gain.v;
    auto id = append(out, {x.id, gain.id, shift.id},
                     [xs, gs, eps](Tape& tp, const Node& nd, const Tensor<T>& g) {
                       auto grads = kernels::layer_norm_bwd(g, xs, gs, eps);
                       tp.accumulate(nd.inputs[0], std::move(grads.input));
                       tp.accumulate(nd.inputs[1], std::move(grads.gain));
                       tp.accumulate(nd.inputs[2], std::move(grads.shift));
                     });
    return {std::move(out), id};
  }

  Value<T> gelu(const Value<T>& x) {
    Tensor<T> out = kernels::gelu_fwd(x.v);
    if (!recording_) return {std::move(out), -1};
    Tensor<T> xs = x.v;
    auto id = append(out, {x.id}, [xs](Tape& tp, const Node& nd, const Tensor<T>& g) {
      tp.accumulate(nd.inputs[0], kernels::gelu_bwd(g, xs));
    });
    return {std::move(out), id};
  }

  Value<T> nearest_upsample(const Value<T>& x, std::int64_t factor) {
    Tensor<T> out = kernels::nearest_upsample_fwd(x.v, factor);
    if (!recording_) return {std::move(out), -1};
    const Shape xdims = x.v.dims();
    auto id = append(out, {x.id}, [xdims, factor](Tape& tp, const Node& nd, const Tensor<T>& g) {
      tp.accumulate(nd.inputs[0], kernels::nearest_upsample_bwd(g, xdims, factor));
    });
    return {std::move(out), id};
  }

  Value<T> global_avg_pool(const Value<T>& x) {
    Tensor<T> out = kernels::global_avg_pool_fwd(x.v);
    if (!recording_) return {std::move(out), -1};
    const Shape xdims = x.v.dims();
    auto id = append(out, {x.id}, [xdims](Tape& tp, const Node& nd, const Tensor<T>& g) {
      tp.accumulate(nd.inputs[0], kernels::global_avg_pool_bwd(g, xdims));
    });
    return {std::move(out), id};
  }

  Value<T> add(const Value<T>& a, const Value<T>& b) {
    Tensor<T> out = kernels::add_fwd(a.v, b.v);
    if (!recording_) return {std::move(out), -1};
    auto id = append(out, {a.id, b.id}, [](Tape& tp, const Node& nd, const Tensor<T>& g) {
      tp.accumulate(nd.inputs[0], Tensor<T>(g));
      tp.accumulate(nd.inputs[1], Tensor<T>(g));
    });
    return {std::move(out), id};
  }

  Value<T> mul(const Value<T>& a, const Value<T>& b) {
    Tensor<T> out = kernels::mul_fwd(a.v, b.v);
    if (!recording_) return {std::move(out), -1};
    Tensor<T> as = a.v, bs = b.v;
    auto id = append(out, {a.id, b.id}, [as, bs](Tape& tp, const Node& nd, const Tensor<T>& g) {
      tp.accumulate(nd.inputs[0], kernels::mul_fwd(g, bs));
      tp.accumulate(nd.inputs[1], kernels::mul_fwd(g, as));
    });
    return {std::move(out), id};
  }

  Value<T> mul_channel(const Value<T>& x, const Value<T>& s) {
    Tensor<T> out = kernels::mul_channel_fwd(x.v, s.v);
    if (!recording_) return {std::move(out), -1};
    Tensor<T> xs = x.v, ss = s.v;
    auto id = append(out, {x.id, s.id}, [xs, ss](Tape& tp, const Node& nd, const Tensor<T>& g) {
      tp.accumulate(nd.inputs[0], kernels::mul_channel_fwd(g, ss));
      tp.accumulate(nd.inputs[1], kernels::mul_channel_bwd_scale(g, xs));
    });
    return {std::move(out), id};
  }

  Value<T> scale(const Value<T>& x, T s) {
    Tensor<T> out = kernels::scale_fwd(x.v, s);
    if (!recording_) return {std::move(out), -1};
    auto id = append(out, {x.id}, [s](Tape& tp, const Node& nd, const Tensor<T>& g) {
      tp.accumulate(nd.inputs[0], kernels::scale_fwd(g, s));
    });
    return {std::move(out), id};
  }

  Value<T> sum(const Value<T>& x) {
    Tensor<T> out = Tensor<T>::scalar(kernels::sum_all(x.v));
    if (!recording_) return {std::move(out), -1};
    const Shape xdims = x.v.dims();
    auto id = append(out, {x.id}, [xdims](Tape& tp, const Node& nd, const Tensor<T>& g) {
      tp.accumulate(nd.inputs[0], Tensor<T>::full(xdims, g.item()));
    });
    return {std::move(out), id};
  }

  Value<T> softmax_cross_entropy(const Value<T>& logits, std::vector<std::int64_t> targets,
                                 double smoothing) {
    Tensor<T> out = Tensor<T>::scalar(kernels::softmax_ce_fwd(logits.v, targets, smoothing));
    if (!recording_) return {std::move(out), -1};
    Tensor<T> ls = logits.v;
    auto id = append(out, {logits.id},
                     [ls, targets = std::move(targets), smoothing](Tape& tp, const Node& nd,
                                                                   const Tensor<T>& g) {
                       tp.accumulate(nd.inputs[0],
                                     kernels::softmax_ce_bwd(ls, targets, smoothing, g.item()));
                     });
    return {std::move(out), id};
  }

  Value<T> sigmoid_bce(const Value<T>& logits, Tensor<T> target) {
    Tensor<T> out = Tensor<T>::scalar(kernels::sigmoid_bce_fwd(logits.v, target));
    if (!recording_) return {std::move(out), -1};
    Tensor<T> ls = logits.v;
    auto id = append(out, {logits.id},
                     [ls, target = std::move(target)](Tape& tp, const Node& nd, const Tensor<T>& g) {
                       tp.accumulate(nd.inputs[0], kernels::sigmoid_bce_bwd(ls, target, g.item()));
                     });
    return {std::move(out), id};
  }

  // ------------------------------------------------------ backward pass ---

  void seed(const Value<T>& v, Tensor<T> grad) {
    if (!v.recorded()) throw ValueError("tape: cannot seed a value that was not recorded");
    v.v.check_same_shape(grad, "tape seed");
    ensure_grad_slots();
    accumulate(v.id, std::move(grad));
  }

  // Replays gradient rules in reverse recording order. Each node's rule
  // fires once; fan-out merges by summation in accumulate(). A non-leaf
  // gradient buffer is released as soon as its rule has fired; leaf
  // gradients stay queryable through grad_of().
  void run_backward(GradSink<T>* sink = nullptr) {
    ensure_grad_slots();
    for (std::int64_t i = static_cast<std::int64_t>(nodes_.size()) - 1; i >= 0; --i) {
      auto& node = nodes_[static_cast<std::size_t>(i)];
      auto& grad = grads_[static_cast<std::size_t>(i)];
      if (!grad.defined()) continue;
      if (node.bwd) {
        node.bwd(*this, node, grad);
        grad = Tensor<T>{};
      } else if (sink && node.param_id >= 0) {
        sink->add(static_cast<std::size_t>(node.param_id), std::move(grad));
      }
    }
  }

  void backward(const Value<T>& loss, GradSink<T>* sink = nullptr) {
    if (!loss.recorded()) throw ValueError("tape: loss is not on the tape");
    if (loss.v.numel() != 1) throw ShapeError("tape: backward root must be scalar");
    seed(loss, Tensor<T>::scalar(T(1)));
    run_backward(sink);
  }

  Tensor<T> grad_of(const Value<T>& v) const {
    if (!v.recorded() || grads_.size() <= static_cast<std::size_t>(v.id) ||
        !grads_[static_cast<std::size_t>(v.id)].defined())
      return {};
    return grads_[static_cast<std::size_t>(v.id)];
  }

 private:
  struct Node {
    std::vector<std::int32_t> inputs;
    std::function<void(Tape&, const Node&, const Tensor<T>&)> bwd;
    Tensor<T> out;
    std::int32_t param_id = -1;
  };

  std::int32_t append(const Tensor<T>& out, std::vector<std::int32_t> inputs,
                      std::function<void(Tape&, const Node&, const Tensor<T>&)> bwd,
                      std::int32_t param_id = -1) {
    Node n;
    n.inputs = std::move(inputs);
    n.bwd = std::move(bwd);
    n.out = out;
    n.param_id = param_id;
    nodes_.push_back(std::move(n));
    return static_cast<std::int32_t>(nodes_.size()) - 1;
  }

  void ensure_grad_slots() {
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
  }

  void accumulate(std::int32_t id, Tensor<T> g) {
    if (id < 0) return;
    ensure_grad_slots();
    auto& slot = grads_[static_cast<std::size_t>(id)];
    if (!slot.defined()) {
      slot = std::move(g);
      return;
    }
    // Copy-on-write: the first accumulation may share the incoming buffer.
    if (slot.storage_use_count() > 1) slot = slot.clone();
    slot.add_(g);
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
  bool recording_;
};

}  // namespace revcol
