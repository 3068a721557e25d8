#include "setgen/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

#include "setgen/kernels.hpp"

namespace setgen {

namespace detail {

struct Node {
  Array value;
  Array grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

}  // namespace detail

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::atomic<std::uint64_t> next_id{1};
thread_local bool recording = true;

Array& grad_of(Node& n) {
  if (n.grad.empty()) n.grad = Array::zeros(n.value.shape());
  return n.grad;
}

NodePtr make_leaf(Array value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->id = next_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

#ifndef NDEBUG
void check_finite(const char* op, const Array& out, const std::vector<NodePtr>& parents) {
  for (const auto& p : parents)
    if (!p->value.data().allFinite()) return;
  if (!out.data().allFinite()) throw NumericalError(std::string(op) + ": non-finite output from finite inputs");
}
#endif

Tensor make_result(const char* op, Array value, std::vector<NodePtr> parents,
                   std::function<void(Node&)> rule) {
#ifndef NDEBUG
  check_finite(op, value, parents);
#else
  (void)op;
#endif
  const bool needs = recording && std::any_of(parents.begin(), parents.end(),
                                              [](const NodePtr& p) { return p->requires_grad; });
  auto n = make_leaf(std::move(value), needs);
  if (needs) {
    n->parents = std::move(parents);
    n->backward = std::move(rule);
  }
  return Tensor(std::move(n));
}

const NodePtr& node_of(const Tensor& t) {
  if (!t.defined()) throw Error(ErrorKind::data, "use of undefined tensor");
  return t.node();
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(op, "shape", shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::leaf(Array value, bool requires_grad) { return Tensor(make_leaf(std::move(value), requires_grad)); }

const Array& Tensor::value() const { return node_of(*this)->value; }

Array& Tensor::mutable_value() {
  if (!is_leaf()) throw Error(ErrorKind::data, "mutable_value on a non-leaf tensor");
  return node_->value;
}

double Tensor::item() const {
  const Array& v = value();
  if (v.size() != 1) throw ShapeError("item", "size", "tensor of shape " + shape_string(v.shape()) + " is not scalar");
  return v[0];
}

bool Tensor::requires_grad() const { return node_of(*this)->requires_grad; }
void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw Error(ErrorKind::data, "set_requires_grad on a non-leaf tensor");
  node_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return !node_of(*this)->backward; }
bool Tensor::has_grad() const { return !node_of(*this)->grad.empty(); }

const Array& Tensor::grad() const {
  const auto& n = node_of(*this);
  if (n->grad.empty()) n->grad = Array::zeros(n->value.shape());
  return n->grad;
}

void Tensor::zero_grad() { node_of(*this)->grad = Array(); }

std::uint64_t Tensor::id() const { return node_of(*this)->id; }

NoGradGuard::NoGradGuard() : previous_(recording) { recording = false; }
NoGradGuard::~NoGradGuard() { recording = previous_; }
bool grad_enabled() { return recording; }

// ---------------------------------------------------------------------------
// Graph traversal

DiffGraph DiffGraph::record(const Tensor& loss) {
  DiffGraph g;
  g.root_ = node_of(loss);
  if (!g.root_->requires_grad) return g;
  std::unordered_set<const Node*> seen;
  std::vector<NodePtr> stack{g.root_};
  seen.insert(g.root_.get());
  while (!stack.empty()) {
    NodePtr n = std::move(stack.back());
    stack.pop_back();
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
    }
    g.nodes_.push_back(std::move(n));
  }
  std::sort(g.nodes_.begin(), g.nodes_.end(), [](const NodePtr& a, const NodePtr& b) { return a->id > b->id; });
  return g;
}

std::vector<std::uint64_t> DiffGraph::traversal_ids() const {
  std::vector<std::uint64_t> ids;
  ids.reserve(nodes_.size());
  for (const auto& n : nodes_) ids.push_back(n->id);
  return ids;
}

void DiffGraph::backward() const {
  if (!root_) return;
  if (root_->value.size() != 1)
    throw ShapeError("backward", "size", "loss must be scalar, got " + shape_string(root_->value.shape()));
  for (const auto& n : nodes_)
    if (n->backward) n->grad = Array::zeros(n->value.shape());
  if (nodes_.empty()) return;
  grad_of(*root_).data() += 1.0;
  for (const auto& n : nodes_) {
    if (n->backward) {
      n->backward(*n);
      n->grad = Array();
    }
  }
}

void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ShapeError("backward", "size", "loss must be scalar, got " + shape_string(loss.shape()));
  DiffGraph::record(loss).backward();
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor operator+(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Array out(a.shape(), a.value().data() + b.value().data());
  return make_result("add", std::move(out), {a.node(), b.node()}, [](Node& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) grad_of(*p).data() += self.grad.data();
  });
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Array out(a.shape(), a.value().data() - b.value().data());
  return make_result("sub", std::move(out), {a.node(), b.node()}, [](Node& self) {
    if (self.parents[0]->requires_grad) grad_of(*self.parents[0]).data() += self.grad.data();
    if (self.parents[1]->requires_grad) grad_of(*self.parents[1]).data() -= self.grad.data();
  });
}

Tensor operator*(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Array out(a.shape(), a.value().data() * b.value().data());
  return make_result("mul", std::move(out), {a.node(), b.node()}, [](Node& self) {
    Node& x = *self.parents[0];
    Node& y = *self.parents[1];
    if (x.requires_grad) grad_of(x).data() += self.grad.data() * y.value.data();
    if (y.requires_grad) grad_of(y).data() += self.grad.data() * x.value.data();
  });
}

Tensor operator-(const Tensor& a) { return -1.0 * a; }

Tensor operator*(double s, const Tensor& a) {
  Array out(a.shape(), a.value().data() * s);
  return make_result("scale", std::move(out), {a.node()}, [s](Node& self) {
    grad_of(*self.parents[0]).data() += s * self.grad.data();
  });
}

Tensor operator+(const Tensor& a, double s) {
  Array out(a.shape(), a.value().data() + s);
  return make_result("add_scalar", std::move(out), {a.node()}, [](Node& self) {
    grad_of(*self.parents[0]).data() += self.grad.data();
  });
}

Tensor square(const Tensor& x) {
  Array out(x.shape(), x.value().data().square());
  return make_result("square", std::move(out), {x.node()}, [](Node& self) {
    Node& p = *self.parents[0];
    grad_of(p).data() += 2.0 * p.value.data() * self.grad.data();
  });
}

Tensor exp(const Tensor& x) {
  Array out(x.shape(), x.value().data().exp());
  return make_result("exp", std::move(out), {x.node()}, [](Node& self) {
    grad_of(*self.parents[0]).data() += self.value.data() * self.grad.data();
  });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  const auto& v = x.value().data();
  Array out(x.shape(), (v > 0.0).select(v, slope * v));
  return make_result("leaky_relu", std::move(out), {x.node()}, [slope](Node& self) {
    Node& p = *self.parents[0];
    grad_of(p).data() += (p.value.data() > 0.0).select(self.grad.data(), slope * self.grad.data());
  });
}

Tensor sigmoid(const Tensor& x) {
  Array out(x.shape());
  const Array& v = x.value();
  for (Index i = 0; i < v.size(); ++i) {
    const double t = v[i];
    if (t >= 0) {
      out[i] = 1.0 / (1.0 + std::exp(-t));
    } else {
      const double e = std::exp(t);
      out[i] = e / (1.0 + e);
    }
  }
  return make_result("sigmoid", std::move(out), {x.node()}, [](Node& self) {
    const auto& y = self.value.data();
    grad_of(*self.parents[0]).data() += self.grad.data() * y * (1.0 - y);
  });
}

Tensor sum(const Tensor& x) {
  Array out(Shape{}, x.value().data().sum());
  return make_result("sum", std::move(out), {x.node()}, [](Node& self) {
    grad_of(*self.parents[0]).data() += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.size());
  Array out(Shape{}, x.value().data().sum() / n);
  return make_result("mean", std::move(out), {x.node()}, [n](Node& self) {
    grad_of(*self.parents[0]).data() += self.grad[0] / n;
  });
}

// ---------------------------------------------------------------------------
// Layout ops

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeError("add_channel_bias", "rank", shape_string(s));
  if (bias.shape() != Shape{s[1]})
    throw ShapeError("add_channel_bias", "channels", "bias " + shape_string(bias.shape()) + " for input " + shape_string(s));
  const Index batch = s[0];
  const Index channels = s[1];
  const Index inner = x.size() / (batch * channels);
  Array out = x.value();
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c)
      out.data().segment((b * channels + c) * inner, inner) += bias.value()[c];
  return make_result("add_channel_bias", std::move(out), {x.node(), bias.node()},
                     [batch, channels, inner](Node& self) {
                       Node& xp = *self.parents[0];
                       Node& bp = *self.parents[1];
                       if (xp.requires_grad) grad_of(xp).data() += self.grad.data();
                       if (bp.requires_grad) {
                         Array& gb = grad_of(bp);
                         for (Index b = 0; b < batch; ++b)
                           for (Index c = 0; c < channels; ++c)
                             gb[c] += self.grad.data().segment((b * channels + c) * inner, inner).sum();
                       }
                     });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels", "count", "no inputs");
  const Shape& first = parts.front().shape();
  if (first.size() < 2) throw ShapeError("concat_channels", "rank", shape_string(first));
  const Index batch = first[0];
  const Index inner = parts.front().size() / (first[0] * first[1]);
  Index total = 0;
  std::vector<Index> widths;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || s[0] != batch || !std::equal(s.begin() + 2, s.end(), first.begin() + 2))
      throw ShapeError("concat_channels", "spatial", shape_string(s) + " vs " + shape_string(first));
    widths.push_back(s[1]);
    total += s[1];
    parents.push_back(p.node());
  }
  Shape out_shape = first;
  out_shape[1] = total;
  Array out(out_shape);
  for (Index b = 0; b < batch; ++b) {
    Index offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const Index n = widths[k] * inner;
      out.data().segment((b * total + offset) * inner, n) = parts[k].value().data().segment(b * n, n);
      offset += widths[k];
    }
  }
  return make_result("concat_channels", std::move(out), std::move(parents),
                     [batch, total, inner, widths](Node& self) {
                       for (Index b = 0; b < batch; ++b) {
                         Index offset = 0;
                         for (std::size_t k = 0; k < widths.size(); ++k) {
                           const Index n = widths[k] * inner;
                           Node& p = *self.parents[k];
                           if (p.requires_grad)
                             grad_of(p).data().segment(b * n, n) +=
                                 self.grad.data().segment((b * total + offset) * inner, n);
                           offset += widths[k];
                         }
                       }
                     });
}

Tensor slice_channels(const Tensor& x, Index start, Index count) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeError("slice_channels", "rank", shape_string(s));
  if (start < 0 || count <= 0 || start + count > s[1])
    throw ShapeError("slice_channels", "channels",
                     "range [" + std::to_string(start) + "," + std::to_string(start + count) + ") of " +
                         std::to_string(s[1]));
  const Index batch = s[0];
  const Index channels = s[1];
  const Index inner = x.size() / (batch * channels);
  Shape out_shape = s;
  out_shape[1] = count;
  Array out(out_shape);
  for (Index b = 0; b < batch; ++b)
    out.data().segment(b * count * inner, count * inner) =
        x.value().data().segment((b * channels + start) * inner, count * inner);
  return make_result("slice_channels", std::move(out), {x.node()},
                     [batch, channels, inner, start, count](Node& self) {
                       Array& g = grad_of(*self.parents[0]);
                       for (Index b = 0; b < batch; ++b)
                         g.data().segment((b * channels + start) * inner, count * inner) +=
                             self.grad.data().segment(b * count * inner, count * inner);
                     });
}

Tensor spatial_diff(const Tensor& x, Index spatial_axis) {
  const Shape& s = x.shape();
  const Index axis = spatial_axis + 2;
  if (axis < 2 || axis >= static_cast<Index>(s.size()))
    throw ShapeError("spatial_diff", "axis", "axis " + std::to_string(spatial_axis) + " of " + shape_string(s));
  const Index n = s[static_cast<std::size_t>(axis)];
  if (n < 2) throw ShapeError("spatial_diff", "spatial[" + std::to_string(spatial_axis) + "]", "extent < 2");
  const Index inner = x.value().stride(axis);
  const Index outer = x.size() / (n * inner);
  Shape out_shape = s;
  out_shape[static_cast<std::size_t>(axis)] = n - 1;
  Array out(out_shape);
  const double* src = x.value().ptr();
  double* dst = out.ptr();
  for (Index o = 0; o < outer; ++o)
    for (Index i = 0; i + 1 < n; ++i)
      for (Index k = 0; k < inner; ++k)
        dst[(o * (n - 1) + i) * inner + k] = src[(o * n + i + 1) * inner + k] - src[(o * n + i) * inner + k];
  return make_result("spatial_diff", std::move(out), {x.node()}, [outer, n, inner](Node& self) {
    double* g = grad_of(*self.parents[0]).ptr();
    const double* go = self.grad.ptr();
    for (Index o = 0; o < outer; ++o)
      for (Index i = 0; i + 1 < n; ++i)
        for (Index k = 0; k < inner; ++k) {
          const double v = go[(o * (n - 1) + i) * inner + k];
          g[(o * n + i + 1) * inner + k] += v;
          g[(o * n + i) * inner + k] -= v;
        }
  });
}

// ---------------------------------------------------------------------------
// Convolutions

Tensor conv_nd(const Tensor& input, const Tensor& kernel, int stride, int padding) {
  const auto g = kernels::conv_geometry(input.shape(), kernel.shape(), stride, padding);
  Array out(kernels::strided_shape(g));
  kernels::conv_forward(input.value().ptr(), kernel.value().ptr(), g, out.ptr());
  return make_result("conv_nd", std::move(out), {input.node(), kernel.node()}, [g](Node& self) {
    Node& x = *self.parents[0];
    Node& w = *self.parents[1];
    if (x.requires_grad) kernels::conv_adjoint(self.grad.ptr(), w.value.ptr(), g, grad_of(x).ptr());
    if (w.requires_grad) kernels::conv_kernel_grad(x.value.ptr(), self.grad.ptr(), g, grad_of(w).ptr());
  });
}

Tensor conv_transpose_nd(const Tensor& input, const Tensor& kernel, int stride, int padding) {
  const auto g = kernels::conv_transpose_geometry(input.shape(), kernel.shape(), stride, padding);
  Array out(kernels::dense_shape(g));
  kernels::conv_adjoint(input.value().ptr(), kernel.value().ptr(), g, out.ptr());
  return make_result("conv_transpose_nd", std::move(out), {input.node(), kernel.node()}, [g](Node& self) {
    Node& x = *self.parents[0];
    Node& w = *self.parents[1];
    if (x.requires_grad) {
      Array tmp(x.value.shape());
      kernels::conv_forward(self.grad.ptr(), w.value.ptr(), g, tmp.ptr());
      grad_of(x).data() += tmp.data();
    }
    if (w.requires_grad) kernels::conv_kernel_grad(self.grad.ptr(), x.value.ptr(), g, grad_of(w).ptr());
  });
}

// ---------------------------------------------------------------------------
// Sampling

Tensor grid_sample(const Tensor& image, const Tensor& map) {
  const auto g = kernels::sample_geometry("grid_sample", image.shape(), map.shape());
  Shape out_shape = image.shape();
  for (std::size_t a = 2; a < out_shape.size(); ++a) out_shape[a] = map.shape()[a];
  Array out(out_shape);
  kernels::grid_sample_forward(image.value().ptr(), map.value().ptr(), g, out.ptr());
  return make_result("grid_sample", std::move(out), {image.node(), map.node()}, [g](Node& self) {
    Node& img = *self.parents[0];
    Node& m = *self.parents[1];
    kernels::grid_sample_backward(img.value.ptr(), m.value.ptr(), self.grad.ptr(), g,
                                  img.requires_grad ? grad_of(img).ptr() : nullptr,
                                  m.requires_grad ? grad_of(m).ptr() : nullptr);
  });
}

}  // namespace setgen
