#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation.
// Values are NCHW row-major. Gradients are recorded on an explicit Tape that
// is made current with a TapeScope; without an active tape every op is a plain
// value computation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace granatt {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // persistent; sized lazily on first accumulation
};

class Tensor;
class GradStore;
namespace detail {
void record_node(const Tensor& out, std::function<void(GradStore&)> fn);
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data.assign(numel(impl->shape), 0.0);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false) {
    require(numel(shape) == values.size(),
            "tensor: value count " + std::to_string(values.size()) +
                " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t size() const { return impl_->data.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }

  const std::vector<double>& values() const { return impl_->data; }
  std::vector<double>& mutable_values() { return impl_->data; }
  double value(std::size_t flat) const { return impl_->data.at(flat); }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  const std::vector<double>& grad() const {
    require(has_grad(), "tensor: gradient has not been accumulated");
    return impl_->grad;
  }
  void zero_grad() {
    if (impl_) impl_->grad.assign(impl_->data.size(), 0.0);
  }
  void clear_grad() {
    if (impl_) impl_->grad.clear();
  }

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

  Tensor reshaped(Shape new_shape) const;

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend void detail::record_node(const Tensor&, std::function<void(GradStore&)>);
  friend Tensor wrap_impl(std::shared_ptr<TensorImpl>);
};

inline Tensor wrap_impl(std::shared_ptr<TensorImpl> impl) {
  return Tensor(std::move(impl));
}

// Scratch gradient buffers for one backward sweep, keyed by tensor identity.
class GradStore {
 public:
  const std::vector<double>* find(const TensorImpl* t) const {
    auto it = bufs_.find(t);
    return it == bufs_.end() ? nullptr : &it->second;
  }
  std::vector<double>& acc(const std::shared_ptr<TensorImpl>& t) {
    auto it = bufs_.find(t.get());
    if (it == bufs_.end())
      it = bufs_.emplace(t.get(), std::vector<double>(t->data.size(), 0.0))
               .first;
    return it->second;
  }
  auto begin() const { return bufs_.begin(); }
  auto end() const { return bufs_.end(); }

 private:
  std::unordered_map<const TensorImpl*, std::vector<double>> bufs_;
};

class Tape {
 public:
  struct Node {
    std::shared_ptr<TensorImpl> out;
    std::function<void(GradStore&)> backward;
  };

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }
  std::vector<Node> nodes_;
};

namespace detail {

inline Tape*& active_tape() {
  thread_local Tape* tape = nullptr;
  return tape;
}

inline bool recording() { return active_tape() != nullptr; }

inline void record_node(const Tensor& out, std::function<void(GradStore&)> fn) {
  active_tape()->nodes_.push_back(Tape::Node{out.impl_, std::move(fn)});
}

}  // namespace detail

class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(detail::active_tape()) {
    detail::active_tape() = &tape;
  }
  ~TapeScope() { detail::active_tape() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

inline void backward(Tape& tape, const Tensor& loss) {
  require(loss.defined() && loss.size() == 1,
          "backward: loss must be a defined scalar tensor");
  require(std::isfinite(loss.value(0)), "backward: loss is not finite");
  GradStore gs;
  gs.acc(loss.impl_ptr())[0] = 1.0;
  for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it)
    it->backward(gs);
  for (const auto& [impl, buf] : gs) {
    auto* t = const_cast<TensorImpl*>(impl);
    if (!t->requires_grad) continue;
    if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
    for (std::size_t i = 0; i < buf.size(); ++i) t->grad[i] += buf[i];
  }
}

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

// Flags the output and records the node when a tape is active and some input
// participates in differentiation.
inline void finish(Tensor& out, std::initializer_list<const Tensor*> ins,
                   std::function<void(GradStore&)> fn) {
  if (!any_requires_grad(ins)) return;
  out.set_requires_grad(true);
  if (recording()) record_node(out, std::move(fn));
}

inline Shape left_pad(const Shape& s, std::size_t rank) {
  Shape out(rank, 1);
  std::copy(s.begin(), s.end(), out.begin() + (rank - s.size()));
  return out;
}

struct BroadcastPlan {
  Shape out_shape;
  std::vector<std::size_t> a_stride, b_stride, out_stride;
  bool same_shape = false;
};

// Axis-1 broadcasting after left-padding the lower-rank operand with ones.
inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b,
                                    const char* op) {
  BroadcastPlan p;
  std::size_t rank = std::max(a.size(), b.size());
  Shape ap = left_pad(a, rank), bp = left_pad(b, rank);
  p.out_shape.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (ap[i] == bp[i])
      p.out_shape[i] = ap[i];
    else if (ap[i] == 1)
      p.out_shape[i] = bp[i];
    else if (bp[i] == 1)
      p.out_shape[i] = ap[i];
    else
      fail(std::string(op) + ": shapes " + shape_str(a) + " and " +
           shape_str(b) + " are not broadcast-compatible");
  }
  p.same_shape = (a == b);
  p.a_stride.assign(rank, 0);
  p.b_stride.assign(rank, 0);
  p.out_stride.assign(rank, 0);
  std::size_t as = 1, bs = 1, os = 1;
  for (std::size_t i = rank; i-- > 0;) {
    p.out_stride[i] = os;
    if (ap[i] != 1) p.a_stride[i] = as;
    if (bp[i] != 1) p.b_stride[i] = bs;
    as *= ap[i];
    bs *= bp[i];
    os *= p.out_shape[i];
  }
  return p;
}

template <class Fn>
inline void for_broadcast(const BroadcastPlan& p, Fn&& fn) {
  std::size_t total = numel(p.out_shape);
  std::size_t rank = p.out_shape.size();
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t rem = flat, ai = 0, bi = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      std::size_t idx = rem / p.out_stride[d];
      rem %= p.out_stride[d];
      ai += idx * p.a_stride[d];
      bi += idx * p.b_stride[d];
    }
    fn(flat, ai, bi);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  auto plan = detail::broadcast_plan(a.shape(), b.shape(), "add");
  Tensor out = Tensor::zeros(plan.out_shape);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.mutable_values().data();
  if (plan.same_shape) {
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
  } else {
    detail::for_broadcast(plan, [&](std::size_t o, std::size_t ai,
                                    std::size_t bi) { po[o] = pa[ai] + pb[bi]; });
  }
  detail::finish(out, {&a, &b}, [out, a, b, plan](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    if (a.requires_grad()) {
      auto& ga = gs.acc(a.impl_ptr());
      if (plan.same_shape)
        for (std::size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i];
      else
        detail::for_broadcast(plan, [&](std::size_t o, std::size_t ai,
                                        std::size_t) { ga[ai] += (*go)[o]; });
    }
    if (b.requires_grad()) {
      auto& gb = gs.acc(b.impl_ptr());
      if (plan.same_shape)
        for (std::size_t i = 0; i < go->size(); ++i) gb[i] += (*go)[i];
      else
        detail::for_broadcast(plan, [&](std::size_t o, std::size_t,
                                        std::size_t bi) { gb[bi] += (*go)[o]; });
    }
  });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  auto plan = detail::broadcast_plan(a.shape(), b.shape(), "mul");
  Tensor out = Tensor::zeros(plan.out_shape);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.mutable_values().data();
  if (plan.same_shape) {
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];
  } else {
    detail::for_broadcast(plan, [&](std::size_t o, std::size_t ai,
                                    std::size_t bi) { po[o] = pa[ai] * pb[bi]; });
  }
  detail::finish(out, {&a, &b}, [out, a, b, plan](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    if (a.requires_grad()) {
      auto& ga = gs.acc(a.impl_ptr());
      if (plan.same_shape)
        for (std::size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i] * pb[i];
      else
        detail::for_broadcast(plan,
                              [&](std::size_t o, std::size_t ai, std::size_t bi) {
                                ga[ai] += (*go)[o] * pb[bi];
                              });
    }
    if (b.requires_grad()) {
      auto& gb = gs.acc(b.impl_ptr());
      if (plan.same_shape)
        for (std::size_t i = 0; i < go->size(); ++i) gb[i] += (*go)[i] * pa[i];
      else
        detail::for_broadcast(plan,
                              [&](std::size_t o, std::size_t ai, std::size_t bi) {
                                gb[bi] += (*go)[o] * pa[ai];
                              });
    }
  });
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "sub: shapes " + shape_str(a.shape()) +
                                      " and " + shape_str(b.shape()) +
                                      " differ");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.mutable_values()[i] = a.value(i) - b.value(i);
  detail::finish(out, {&a, &b}, [out, a, b](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    if (a.requires_grad()) {
      auto& ga = gs.acc(a.impl_ptr());
      for (std::size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i];
    }
    if (b.requires_grad()) {
      auto& gb = gs.acc(b.impl_ptr());
      for (std::size_t i = 0; i < go->size(); ++i) gb[i] -= (*go)[i];
    }
  });
  return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "div: shapes " + shape_str(a.shape()) +
                                      " and " + shape_str(b.shape()) +
                                      " differ");
  for (double v : b.values())
    require(v != 0.0, "div: divisor contains a zero");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.mutable_values()[i] = a.value(i) / b.value(i);
  detail::finish(out, {&a, &b}, [out, a, b](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    const auto& pa = a.values();
    const auto& pb = b.values();
    if (a.requires_grad()) {
      auto& ga = gs.acc(a.impl_ptr());
      for (std::size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i] / pb[i];
    }
    if (b.requires_grad()) {
      auto& gb = gs.acc(b.impl_ptr());
      for (std::size_t i = 0; i < go->size(); ++i)
        gb[i] -= (*go)[i] * pa[i] / (pb[i] * pb[i]);
    }
  });
  return out;
}

inline Tensor add_scalar(const Tensor& x, double c) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.mutable_values()[i] = x.value(i) + c;
  detail::finish(out, {&x}, [out, x](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    auto& gx = gs.acc(x.impl_ptr());
    for (std::size_t i = 0; i < go->size(); ++i) gx[i] += (*go)[i];
  });
  return out;
}

inline Tensor mul_scalar(const Tensor& x, double c) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.mutable_values()[i] = x.value(i) * c;
  detail::finish(out, {&x}, [out, x, c](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    auto& gx = gs.acc(x.impl_ptr());
    for (std::size_t i = 0; i < go->size(); ++i) gx[i] += (*go)[i] * c;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

inline double sigmoid_scalar(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.mutable_values()[i] = sigmoid_scalar(x.value(i));
  detail::finish(out, {&x}, [out, x](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    auto& gx = gs.acc(x.impl_ptr());
    const auto& y = out.values();
    for (std::size_t i = 0; i < go->size(); ++i)
      gx[i] += (*go)[i] * y[i] * (1.0 - y[i]);
  });
  return out;
}

inline Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.mutable_values()[i] = x.value(i) > 0.0 ? x.value(i) : 0.0;
  detail::finish(out, {&x}, [out, x](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    auto& gx = gs.acc(x.impl_ptr());
    const auto& v = x.values();
    for (std::size_t i = 0; i < go->size(); ++i)
      if (v[i] > 0.0) gx[i] += (*go)[i];
  });
  return out;
}

inline Tensor log(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    require(x.value(i) > 0.0,
            "log: non-positive input at flat index " + std::to_string(i));
    out.mutable_values()[i] = std::log(x.value(i));
  }
  detail::finish(out, {&x}, [out, x](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    auto& gx = gs.acc(x.impl_ptr());
    const auto& v = x.values();
    for (std::size_t i = 0; i < go->size(); ++i) gx[i] += (*go)[i] / v[i];
  });
  return out;
}

// Gradient passes through wherever lo <= x <= hi (bounds inclusive).
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  require(lo <= hi, "clamp: lower bound exceeds upper bound");
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.mutable_values()[i] = std::min(hi, std::max(lo, x.value(i)));
  detail::finish(out, {&x}, [out, x, lo, hi](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    auto& gx = gs.acc(x.impl_ptr());
    const auto& v = x.values();
    for (std::size_t i = 0; i < go->size(); ++i)
      if (v[i] >= lo && v[i] <= hi) gx[i] += (*go)[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and shape ops

inline Tensor sum(const Tensor& x) {
  Tensor out = Tensor::zeros({1});
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  out.mutable_values()[0] = acc;
  detail::finish(out, {&x}, [out, x](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    auto& gx = gs.acc(x.impl_ptr());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*go)[0];
  });
  return out;
}

inline Tensor Tensor::reshaped(Shape new_shape) const {
  require(numel(new_shape) == size(),
          "reshape: element count mismatch between " + shape_str(shape()) +
              " and " + shape_str(new_shape));
  Tensor out = Tensor::zeros(std::move(new_shape));
  out.mutable_values() = values();
  const Tensor& self = *this;
  detail::finish(out, {&self}, [out, self](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    auto& gx = gs.acc(self.impl_ptr());
    for (std::size_t i = 0; i < go->size(); ++i) gx[i] += (*go)[i];
  });
  return out;
}

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  for (const Tensor& p : parts)
    require(p.rank() == 4, "concat_channels: inputs must be rank-4, got " +
                               shape_str(p.shape()));
  std::size_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::size_t ctotal = 0;
  for (const Tensor& p : parts) {
    require(p.dim(0) == n && p.dim(2) == h && p.dim(3) == w,
            "concat_channels: non-channel dimensions differ: " +
                shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    ctotal += p.dim(1);
  }
  Tensor out = Tensor::zeros({n, ctotal, h, w});
  std::size_t hw = h * w;
  double* po = out.mutable_values().data();
  std::size_t coff = 0;
  for (const Tensor& p : parts) {
    std::size_t c = p.dim(1);
    const double* pp = p.values().data();
    for (std::size_t in = 0; in < n; ++in)
      std::copy(pp + in * c * hw, pp + (in + 1) * c * hw,
                po + (in * ctotal + coff) * hw);
    coff += c;
  }
  std::vector<Tensor> held = parts;
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (any) {
    out.set_requires_grad(true);
    if (detail::recording())
      detail::record_node(out, [out, held, n, ctotal, hw](GradStore& gs) {
        const auto* go = gs.find(out.impl());
        if (!go) return;
        std::size_t coff = 0;
        for (const Tensor& p : held) {
          std::size_t c = p.dim(1);
          if (p.requires_grad()) {
            auto& gp = gs.acc(p.impl_ptr());
            for (std::size_t in = 0; in < n; ++in)
              for (std::size_t i = 0; i < c * hw; ++i)
                gp[in * c * hw + i] += (*go)[(in * ctotal + coff) * hw + i];
          }
          coff += c;
        }
      });
  }
  return out;
}

inline Tensor slice_channels(const Tensor& x, std::size_t begin,
                             std::size_t count) {
  require(x.rank() == 4,
          "slice_channels: input must be rank-4, got " + shape_str(x.shape()));
  require(count > 0 && begin + count <= x.dim(1),
          "slice_channels: range [" + std::to_string(begin) + "," +
              std::to_string(begin + count) + ") outside channel count " +
              std::to_string(x.dim(1)));
  std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::size_t hw = h * w;
  Tensor out = Tensor::zeros({n, count, h, w});
  const double* px = x.values().data();
  double* po = out.mutable_values().data();
  for (std::size_t in = 0; in < n; ++in)
    std::copy(px + (in * c + begin) * hw, px + (in * c + begin + count) * hw,
              po + in * count * hw);
  detail::finish(out, {&x}, [out, x, begin, count, n, c, hw](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    auto& gx = gs.acc(x.impl_ptr());
    for (std::size_t in = 0; in < n; ++in)
      for (std::size_t i = 0; i < count * hw; ++i)
        gx[(in * c + begin) * hw + i] += (*go)[in * count * hw + i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions

// 2-D cross-correlation, NCHW input, OIHW kernel, zero padding, no bias.
inline Tensor conv2d(const Tensor& x, const Tensor& k, std::size_t stride = 1,
                     std::size_t pad = 0) {
  require(x.rank() == 4,
          "conv2d: input must be rank-4 NCHW, got " + shape_str(x.shape()));
  require(k.rank() == 4,
          "conv2d: kernel must be rank-4 OIHW, got " + shape_str(k.shape()));
  require(stride >= 1, "conv2d: stride must be positive");
  std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::size_t co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  require(k.dim(1) == ci, "conv2d: kernel expects " + std::to_string(k.dim(1)) +
                              " input channels, input has " +
                              std::to_string(ci));
  require(h + 2 * pad >= kh && w + 2 * pad >= kw,
          "conv2d: kernel " + shape_str(k.shape()) +
              " larger than padded input " + shape_str(x.shape()));
  std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  std::size_t ow = (w + 2 * pad - kw) / stride + 1;
  Tensor out = Tensor::zeros({n, co, oh, ow});
  const double* px = x.values().data();
  const double* pk = k.values().data();
  double* po = out.mutable_values().data();
  long p = static_cast<long>(pad);
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t i = 0; i < ci; ++i) {
        const double* xc = px + (in * ci + i) * h * w;
        const double* kc = pk + (o * ci + i) * kh * kw;
        double* oc = po + (in * co + o) * oh * ow;
        for (std::size_t r = 0; r < kh; ++r)
          for (std::size_t s = 0; s < kw; ++s) {
            double kv = kc[r * kw + s];
            if (kv == 0.0) continue;
            for (std::size_t y = 0; y < oh; ++y) {
              long iy = static_cast<long>(y * stride + r) - p;
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              const double* xrow = xc + iy * w;
              double* orow = oc + y * ow;
              for (std::size_t z = 0; z < ow; ++z) {
                long ix = static_cast<long>(z * stride + s) - p;
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                orow[z] += kv * xrow[ix];
              }
            }
          }
      }
  detail::finish(out, {&x, &k}, [out, x, k, stride, pad](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::size_t co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    std::size_t oh = out.dim(2), ow = out.dim(3);
    long p = static_cast<long>(pad);
    const double* px = x.values().data();
    const double* pk = k.values().data();
    std::vector<double>* gx = x.requires_grad() ? &gs.acc(x.impl_ptr()) : nullptr;
    std::vector<double>* gk = k.requires_grad() ? &gs.acc(k.impl_ptr()) : nullptr;
    for (std::size_t in = 0; in < n; ++in)
      for (std::size_t o = 0; o < co; ++o)
        for (std::size_t i = 0; i < ci; ++i) {
          const double* xc = px + (in * ci + i) * h * w;
          const double* kc = pk + (o * ci + i) * kh * kw;
          const double* goc = go->data() + (in * co + o) * oh * ow;
          double* gxc = gx ? gx->data() + (in * ci + i) * h * w : nullptr;
          double* gkc = gk ? gk->data() + (o * ci + i) * kh * kw : nullptr;
          for (std::size_t r = 0; r < kh; ++r)
            for (std::size_t s = 0; s < kw; ++s) {
              double kv = kc[r * kw + s];
              double kacc = 0.0;
              for (std::size_t y = 0; y < oh; ++y) {
                long iy = static_cast<long>(y * stride + r) - p;
                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                const double* xrow = xc + iy * w;
                double* gxrow = gxc ? gxc + iy * w : nullptr;
                const double* gorow = goc + y * ow;
                for (std::size_t z = 0; z < ow; ++z) {
                  long ix = static_cast<long>(z * stride + s) - p;
                  if (ix < 0 || ix >= static_cast<long>(w)) continue;
                  double g = gorow[z];
                  if (gxrow) gxrow[ix] += g * kv;
                  if (gkc) kacc += g * xrow[ix];
                }
              }
              if (gkc) gkc[r * kw + s] += kacc;
            }
        }
  });
  return out;
}

// 1-D cross-correlation over the channel axis with zero padding (same size).
// Accepts a channel vector (C) or a pooled descriptor (N,C,1,1); the kernel
// is a flat odd-length vector shared across batch entries.
inline Tensor conv1d_channels(const Tensor& x, const Tensor& k) {
  require(k.rank() == 1 && k.dim(0) % 2 == 1,
          "conv1d_channels: kernel must be a flat odd-length vector, got " +
              shape_str(k.shape()));
  bool vec = x.rank() == 1;
  require(vec || (x.rank() == 4 && x.dim(2) == 1 && x.dim(3) == 1),
          "conv1d_channels: input must be shaped (C) or (N,C,1,1), got " +
              shape_str(x.shape()));
  std::size_t n = vec ? 1 : x.dim(0);
  std::size_t c = vec ? x.dim(0) : x.dim(1);
  std::size_t ksz = k.dim(0);
  long halo = static_cast<long>(ksz / 2);
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.values().data();
  const double* pk = k.values().data();
  double* po = out.mutable_values().data();
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t ci = 0; ci < c; ++ci) {
      double acc = 0.0;
      for (std::size_t j = 0; j < ksz; ++j) {
        long src = static_cast<long>(ci) + static_cast<long>(j) - halo;
        if (src < 0 || src >= static_cast<long>(c)) continue;
        acc += pk[j] * px[in * c + src];
      }
      po[in * c + ci] = acc;
    }
  detail::finish(out, {&x, &k}, [out, x, k, n, c, ksz, halo](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    const double* px = x.values().data();
    const double* pk = k.values().data();
    std::vector<double>* gx = x.requires_grad() ? &gs.acc(x.impl_ptr()) : nullptr;
    std::vector<double>* gk = k.requires_grad() ? &gs.acc(k.impl_ptr()) : nullptr;
    for (std::size_t in = 0; in < n; ++in)
      for (std::size_t ci = 0; ci < c; ++ci) {
        double g = (*go)[in * c + ci];
        for (std::size_t j = 0; j < ksz; ++j) {
          long src = static_cast<long>(ci) + static_cast<long>(j) - halo;
          if (src < 0 || src >= static_cast<long>(c)) continue;
          if (gx) (*gx)[in * c + src] += g * pk[j];
          if (gk) (*gk)[j] += g * px[in * c + src];
        }
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Pooling

enum class PoolMode { GAP, GMP, CAP, CMP, LAP };

inline const char* pool_mode_name(PoolMode m) {
  switch (m) {
    case PoolMode::GAP: return "GAP";
    case PoolMode::GMP: return "GMP";
    case PoolMode::CAP: return "CAP";
    case PoolMode::CMP: return "CMP";
    case PoolMode::LAP: return "LAP";
  }
  return "?";
}

// GAP/GMP/LAP reduce over space to (N,C,1,1); CAP/CMP reduce over channels to
// (N,1,H,W). LAP averages over mask positions with value 1 and yields an
// all-zero descriptor for an all-zero mask. Max-pool gradients flow to the
// first maximum in row-major order.
inline Tensor pool(const Tensor& x, PoolMode mode,
                   const Tensor* mask = nullptr) {
  require(x.rank() == 4, std::string("pool: input must be rank-4 NCHW, got ") +
                             shape_str(x.shape()));
  std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::size_t hw = h * w;
  const double* px = x.values().data();
  if (mode == PoolMode::LAP) {
    require(mask != nullptr, "pool: LAP requires a mask");
    require(mask->rank() == 2 && mask->dim(0) == h && mask->dim(1) == w,
            "pool: mask shape " + shape_str(mask->shape()) +
                " does not match spatial size " + shape_str({h, w}));
    for (double v : mask->values())
      require(v == 0.0 || v == 1.0, "pool: mask must be binary");
  } else {
    require(mask == nullptr,
            std::string("pool: mask only applies to LAP, got ") +
                pool_mode_name(mode));
  }
  if (mode == PoolMode::GAP || mode == PoolMode::LAP) {
    Tensor out = Tensor::zeros({n, c, 1, 1});
    double* po = out.mutable_values().data();
    std::vector<std::size_t> idx;
    if (mode == PoolMode::LAP) {
      const double* pm = mask->values().data();
      for (std::size_t i = 0; i < hw; ++i)
        if (pm[i] == 1.0) idx.push_back(i);
    }
    double denom = mode == PoolMode::GAP ? static_cast<double>(hw)
                                         : static_cast<double>(idx.size());
    for (std::size_t in = 0; in < n; ++in)
      for (std::size_t ci = 0; ci < c; ++ci) {
        const double* xc = px + (in * c + ci) * hw;
        double acc = 0.0;
        if (mode == PoolMode::GAP) {
          for (std::size_t i = 0; i < hw; ++i) acc += xc[i];
        } else {
          for (std::size_t i : idx) acc += xc[i];
        }
        po[in * c + ci] = denom > 0.0 ? acc / denom : 0.0;
      }
    detail::finish(out, {&x}, [out, x, n, c, hw, idx, denom,
                               mode](GradStore& gs) {
      const auto* go = gs.find(out.impl());
      if (!go) return;
      if (denom == 0.0) return;
      auto& gx = gs.acc(x.impl_ptr());
      for (std::size_t in = 0; in < n; ++in)
        for (std::size_t ci = 0; ci < c; ++ci) {
          double g = (*go)[in * c + ci] / denom;
          double* gc = gx.data() + (in * c + ci) * hw;
          if (mode == PoolMode::GAP) {
            for (std::size_t i = 0; i < hw; ++i) gc[i] += g;
          } else {
            for (std::size_t i : idx) gc[i] += g;
          }
        }
    });
    return out;
  }
  if (mode == PoolMode::GMP) {
    Tensor out = Tensor::zeros({n, c, 1, 1});
    double* po = out.mutable_values().data();
    std::vector<std::size_t> arg(n * c);
    for (std::size_t in = 0; in < n; ++in)
      for (std::size_t ci = 0; ci < c; ++ci) {
        const double* xc = px + (in * c + ci) * hw;
        std::size_t best = 0;
        for (std::size_t i = 1; i < hw; ++i)
          if (xc[i] > xc[best]) best = i;
        arg[in * c + ci] = best;
        po[in * c + ci] = xc[best];
      }
    detail::finish(out, {&x}, [out, x, n, c, hw, arg](GradStore& gs) {
      const auto* go = gs.find(out.impl());
      if (!go) return;
      auto& gx = gs.acc(x.impl_ptr());
      for (std::size_t i = 0; i < n * c; ++i)
        gx[i * hw + arg[i]] += (*go)[i];
    });
    return out;
  }
  // CAP / CMP reduce across channels.
  Tensor out = Tensor::zeros({n, 1, h, w});
  double* po = out.mutable_values().data();
  if (mode == PoolMode::CAP) {
    for (std::size_t in = 0; in < n; ++in)
      for (std::size_t i = 0; i < hw; ++i) {
        double acc = 0.0;
        for (std::size_t ci = 0; ci < c; ++ci) acc += px[(in * c + ci) * hw + i];
        po[in * hw + i] = acc / static_cast<double>(c);
      }
    detail::finish(out, {&x}, [out, x, n, c, hw](GradStore& gs) {
      const auto* go = gs.find(out.impl());
      if (!go) return;
      auto& gx = gs.acc(x.impl_ptr());
      for (std::size_t in = 0; in < n; ++in)
        for (std::size_t i = 0; i < hw; ++i) {
          double g = (*go)[in * hw + i] / static_cast<double>(c);
          for (std::size_t ci = 0; ci < c; ++ci)
            gx[(in * c + ci) * hw + i] += g;
        }
    });
    return out;
  }
  std::vector<std::size_t> arg(n * hw);
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t i = 0; i < hw; ++i) {
      std::size_t best = 0;
      for (std::size_t ci = 1; ci < c; ++ci)
        if (px[(in * c + ci) * hw + i] > px[(in * c + best) * hw + i]) best = ci;
      arg[in * hw + i] = best;
      po[in * hw + i] = px[(in * c + best) * hw + i];
    }
  detail::finish(out, {&x}, [out, x, n, c, hw, arg](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    auto& gx = gs.acc(x.impl_ptr());
    for (std::size_t in = 0; in < n; ++in)
      for (std::size_t i = 0; i < hw; ++i)
        gx[(in * c + arg[in * hw + i]) * hw + i] += (*go)[in * hw + i];
  });
  return out;
}

// 2x2 stride-2 max pooling with ceil-mode partial windows at the edges, so the
// output size matches a stride-2 padded 3x3 convolution at every input size.
inline Tensor maxpool2x2(const Tensor& x) {
  require(x.rank() == 4, "maxpool2x2: input must be rank-4 NCHW, got " +
                             shape_str(x.shape()));
  std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  Tensor out = Tensor::zeros({n, c, oh, ow});
  const double* px = x.values().data();
  double* po = out.mutable_values().data();
  std::vector<std::size_t> arg(out.size());
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const double* xc = px + nc * h * w;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t z = 0; z < ow; ++z) {
        std::size_t y1 = std::min(2 * y + 2, h), z1 = std::min(2 * z + 2, w);
        std::size_t best = 2 * y * w + 2 * z;
        for (std::size_t iy = 2 * y; iy < y1; ++iy)
          for (std::size_t iz = 2 * z; iz < z1; ++iz)
            if (xc[iy * w + iz] > xc[best]) best = iy * w + iz;
        arg[nc * oh * ow + y * ow + z] = best;
        po[nc * oh * ow + y * ow + z] = xc[best];
      }
  }
  detail::finish(out, {&x}, [out, x, n, c, h, w, arg](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    auto& gx = gs.acc(x.impl_ptr());
    std::size_t hw = h * w, ohw = out.dim(2) * out.dim(3);
    for (std::size_t nc = 0; nc < n * c; ++nc)
      for (std::size_t i = 0; i < ohw; ++i)
        gx[nc * hw + arg[nc * ohw + i]] += (*go)[nc * ohw + i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Resampling

// Bilinear resize without corner alignment (pixel centers at (i+0.5)/size).
// Resizing to the input size reproduces it exactly.
inline Tensor upsample_bilinear(const Tensor& x, std::size_t oh,
                                std::size_t ow) {
  require(x.rank() == 4, "upsample_bilinear: input must be rank-4 NCHW, got " +
                             shape_str(x.shape()));
  require(oh > 0 && ow > 0, "upsample_bilinear: output size must be positive");
  std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  struct Axis {
    std::size_t lo, hi;
    double wlo, whi;
  };
  auto make_axis = [](std::size_t in, std::size_t out) {
    std::vector<Axis> ax(out);
    double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      double f = std::floor(src);
      double t = src - f;
      long lo = static_cast<long>(f);
      long hi = lo + 1;
      if (lo < 0) {
        lo = 0;
        hi = 0;
        t = 0.0;
      }
      if (hi >= static_cast<long>(in)) {
        hi = static_cast<long>(in) - 1;
        if (lo > hi) lo = hi;
        if (lo == hi) t = 0.0;
      }
      ax[o] = Axis{static_cast<std::size_t>(lo), static_cast<std::size_t>(hi),
                   1.0 - t, t};
    }
    return ax;
  };
  auto ay = make_axis(h, oh), az = make_axis(w, ow);
  Tensor out = Tensor::zeros({n, c, oh, ow});
  const double* px = x.values().data();
  double* po = out.mutable_values().data();
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const double* xc = px + nc * h * w;
    double* oc = po + nc * oh * ow;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t z = 0; z < ow; ++z) {
        const Axis& ry = ay[y];
        const Axis& rz = az[z];
        oc[y * ow + z] = ry.wlo * (rz.wlo * xc[ry.lo * w + rz.lo] +
                                   rz.whi * xc[ry.lo * w + rz.hi]) +
                         ry.whi * (rz.wlo * xc[ry.hi * w + rz.lo] +
                                   rz.whi * xc[ry.hi * w + rz.hi]);
      }
  }
  detail::finish(out, {&x}, [out, x, n, c, h, w, oh, ow, ay, az](GradStore& gs) {
    const auto* go = gs.find(out.impl());
    if (!go) return;
    auto& gx = gs.acc(x.impl_ptr());
    for (std::size_t nc = 0; nc < n * c; ++nc) {
      double* gc = gx.data() + nc * h * w;
      const double* goc = go->data() + nc * oh * ow;
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t z = 0; z < ow; ++z) {
          const Axis& ry = ay[y];
          const Axis& rz = az[z];
          double g = goc[y * ow + z];
          gc[ry.lo * w + rz.lo] += g * ry.wlo * rz.wlo;
          gc[ry.lo * w + rz.hi] += g * ry.wlo * rz.whi;
          gc[ry.hi * w + rz.lo] += g * ry.whi * rz.wlo;
          gc[ry.hi * w + rz.hi] += g * ry.whi * rz.whi;
        }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Affine map

// y = W x + b with W shaped (Cout,Cin) and b shaped (Cout). Accepts x shaped
// (Cin) or (N,Cin,1,1), producing (Cout) or (N,Cout,1,1).
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(weight.rank() == 2, "linear: weight must be rank-2, got " +
                                  shape_str(weight.shape()));
  std::size_t cout = weight.dim(0), cin = weight.dim(1);
  require(bias.rank() == 1 && bias.dim(0) == cout,
          "linear: bias shape " + shape_str(bias.shape()) +
              " does not match output width " + std::to_string(cout));
  bool vec = x.rank() == 1;
  require(vec || (x.rank() == 4 && x.dim(2) == 1 && x.dim(3) == 1),
          "linear: input must be shaped (Cin) or (N,Cin,1,1), got " +
              shape_str(x.shape()));
  std::size_t n = vec ? 1 : x.dim(0);
  std::size_t xc = vec ? x.dim(0) : x.dim(1);
  require(xc == cin, "linear: input width " + std::to_string(xc) +
                         " does not match weight width " + std::to_string(cin));
  Shape oshape = vec ? Shape{cout} : Shape{n, cout, 1, 1};
  Tensor out = Tensor::zeros(oshape);
  const double* px = x.values().data();
  const double* pw = weight.values().data();
  const double* pb = bias.values().data();
  double* po = out.mutable_values().data();
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t o = 0; o < cout; ++o) {
      double acc = pb[o];
      for (std::size_t i = 0; i < cin; ++i)
        acc += pw[o * cin + i] * px[in * cin + i];
      po[in * cout + o] = acc;
    }
  detail::finish(out, {&x, &weight, &bias},
                 [out, x, weight, bias, n, cin, cout](GradStore& gs) {
                   const auto* go = gs.find(out.impl());
                   if (!go) return;
                   const double* px = x.values().data();
                   const double* pw = weight.values().data();
                   std::vector<double>* gx =
                       x.requires_grad() ? &gs.acc(x.impl_ptr()) : nullptr;
                   std::vector<double>* gw =
                       weight.requires_grad() ? &gs.acc(weight.impl_ptr())
                                              : nullptr;
                   std::vector<double>* gb =
                       bias.requires_grad() ? &gs.acc(bias.impl_ptr()) : nullptr;
                   for (std::size_t in = 0; in < n; ++in)
                     for (std::size_t o = 0; o < cout; ++o) {
                       double g = (*go)[in * cout + o];
                       if (gb) (*gb)[o] += g;
                       for (std::size_t i = 0; i < cin; ++i) {
                         if (gx) (*gx)[in * cin + i] += g * pw[o * cin + i];
                         if (gw) (*gw)[o * cin + i] += g * px[in * cin + i];
                       }
                     }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Numerical gradient verification

// Central differences against one reverse-mode sweep. Returns the maximum
// relative error max |a-n| / max(1e-8, |a|+|n|) over every coordinate of every
// input. Throws if the function value or any gradient fails to be finite.
inline double grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    const std::vector<Tensor>& inputs, double eps = 1e-5) {
  require(!inputs.empty(), "grad_check: no inputs");
  require(eps > 0.0, "grad_check: step must be positive");
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) {
    Tensor leaf = Tensor::from(t.shape(), t.values(), true);
    leaves.push_back(leaf);
  }
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = f(leaves);
  }
  require(loss.defined() && loss.size() == 1,
          "grad_check: function must return a scalar tensor");
  require(std::isfinite(loss.value(0)),
          "grad_check: function value is not finite");
  backward(tape, loss);
  auto eval = [&](const std::vector<Tensor>& args) {
    Tensor v = f(args);
    require(v.defined() && v.size() == 1,
            "grad_check: function must return a scalar tensor");
    return v.value(0);
  };
  double worst = 0.0;
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    std::vector<double> analytic(leaves[t].size(), 0.0);
    if (leaves[t].has_grad()) analytic = leaves[t].grad();
    std::vector<Tensor> probe;
    probe.reserve(leaves.size());
    for (const Tensor& l : leaves) probe.push_back(Tensor::from(l.shape(), l.values()));
    for (std::size_t i = 0; i < leaves[t].size(); ++i) {
      double base = leaves[t].value(i);
      probe[t].mutable_values()[i] = base + eps;
      double up = eval(probe);
      probe[t].mutable_values()[i] = base - eps;
      double down = eval(probe);
      probe[t].mutable_values()[i] = base;
      double numeric = (up - down) / (2.0 * eps);
      double a = analytic[i];
      if (!std::isfinite(a) || !std::isfinite(numeric))
        throw std::runtime_error(
            "grad_check: non-finite gradient at input " + std::to_string(t) +
            " flat index " + std::to_string(i));
      double rel = std::abs(a - numeric) /
                   std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace granatt
