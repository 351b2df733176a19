#include "rffi/nn/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace rffi::nn {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline int conv_out_size(int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; }

// first output index with in-bounds source: idx*s - p + k >= 0
inline int lo_idx(int p, int k, int s) {
  int a = p - k;
  return a <= 0 ? 0 : (a + s - 1) / s;
}
// one past the last output index with idx*s - p + k <= in_size-1
inline int hi_idx(int p, int k, int s, int in_size, int out_size) {
  int a = in_size - 1 + p - k;
  if (a < 0) return 0;
  return std::min(out_size, a / s + 1);
}

}  // namespace

NodeId Graph::push(Tensor value, bool requires_grad, std::function<void(Graph&)> fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backward_fn = std::move(fn);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::input(Tensor v, bool requires_grad) {
  return push(std::move(v), requires_grad, nullptr);
}

const Tensor& Graph::grad(NodeId id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.data.empty() && n.value.numel() != 0)
    throw std::logic_error("graph: gradient was never computed for this node");
  return n.grad;
}

bool Graph::has_grad(NodeId id) const {
  return !nodes_[static_cast<size_t>(id)].grad.data.empty();
}

Tensor& Graph::grad_acc(NodeId id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.data.empty()) n.grad = Tensor(n.value.shape);
  return n.grad;
}

bool Graph::any_grad(std::initializer_list<NodeId> ids) const {
  for (NodeId id : ids)
    if (id >= 0 && requires_grad(id)) return true;
  return false;
}

void Graph::backward(NodeId loss) {
  require(val(loss).numel() == 1, "backward: loss must be scalar");
  if (!requires_grad(loss))
    throw std::logic_error("backward: loss does not reach any differentiable leaf");
  grad_acc(loss).data[0] = 1.0f;
  for (NodeId id = loss; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.data.empty() || !n.backward_fn) continue;
    n.backward_fn(*this);
  }
}

// ---------------------------------------------------------------------------
// conv2d

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* b, int stride, int pad) {
  require(x.ndim() == 4 && w.ndim() == 4, "conv2d: expects 4-D input and kernel");
  require(x.dim(1) == w.dim(1), "conv2d: channel mismatch");
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  int Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int OH = conv_out_size(H, kh, stride, pad), OW = conv_out_size(W, kw, stride, pad);
  require(OH >= 1 && OW >= 1, "conv2d: kernel larger than padded input");
  if (b) require(b->ndim() == 1 && b->dim(0) == Co, "conv2d: bias shape");
  Tensor y({N, Co, OH, OW});
  const float* xp = x.ptr();
  const float* wp = w.ptr();
  float* yp = y.ptr();
#pragma omp parallel for schedule(static)
  for (long long nc = 0; nc < static_cast<long long>(N) * Co; ++nc) {
    int n = static_cast<int>(nc / Co), co = static_cast<int>(nc % Co);
    float* out = yp + (static_cast<int64_t>(n) * Co + co) * OH * OW;
    float bias = b ? b->data[static_cast<size_t>(co)] : 0.0f;
    for (int64_t i = 0; i < static_cast<int64_t>(OH) * OW; ++i) out[i] = bias;
    for (int ci = 0; ci < Ci; ++ci)
      for (int ki = 0; ki < kh; ++ki)
        for (int kj = 0; kj < kw; ++kj) {
          float wv = wp[((static_cast<int64_t>(co) * Ci + ci) * kh + ki) * kw + kj];
          int ow0 = lo_idx(pad, kj, stride), ow1 = hi_idx(pad, kj, stride, W, OW);
          for (int oh = 0; oh < OH; ++oh) {
            int ih = oh * stride - pad + ki;
            if (ih < 0 || ih >= H) continue;
            const float* xrow = xp + ((static_cast<int64_t>(n) * Ci + ci) * H + ih) * W;
            float* yrow = out + static_cast<int64_t>(oh) * OW;
            if (stride == 1) {
              const float* xs = xrow - pad + kj;
              for (int ow = ow0; ow < ow1; ++ow) yrow[ow] += wv * xs[ow];
            } else {
              for (int ow = ow0; ow < ow1; ++ow) yrow[ow] += wv * xrow[ow * stride - pad + kj];
            }
          }
        }
  }
  return y;
}

namespace {

void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& gy, int stride, int pad,
                     Tensor* dx, Tensor* dw, Tensor* db) {
  int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  int Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int OH = gy.dim(2), OW = gy.dim(3);
  const float* xp = x.ptr();
  const float* wp = w.ptr();
  const float* gp = gy.ptr();
  if (db) {
    float* dbp = db->ptr();
#pragma omp parallel for schedule(static)
    for (int co = 0; co < Co; ++co) {
      double acc = 0.0;
      for (int n = 0; n < N; ++n)
        acc += sum_f64(gp + (static_cast<int64_t>(n) * Co + co) * OH * OW,
                       static_cast<int64_t>(OH) * OW);
      dbp[co] += static_cast<float>(acc);
    }
  }
  if (dw) {
    float* dwp = dw->ptr();
#pragma omp parallel for schedule(static)
    for (long long cc = 0; cc < static_cast<long long>(Co) * Ci; ++cc) {
      int co = static_cast<int>(cc / Ci), ci = static_cast<int>(cc % Ci);
      for (int ki = 0; ki < kh; ++ki)
        for (int kj = 0; kj < kw; ++kj) {
          int ow0 = lo_idx(pad, kj, stride), ow1 = hi_idx(pad, kj, stride, W, OW);
          double acc = 0.0;
          for (int n = 0; n < N; ++n) {
            const float* gplane = gp + (static_cast<int64_t>(n) * Co + co) * OH * OW;
            const float* xplane = xp + (static_cast<int64_t>(n) * Ci + ci) * H * W;
            for (int oh = 0; oh < OH; ++oh) {
              int ih = oh * stride - pad + ki;
              if (ih < 0 || ih >= H) continue;
              const float* grow = gplane + static_cast<int64_t>(oh) * OW;
              const float* xrow = xplane + static_cast<int64_t>(ih) * W;
              if (stride == 1) {
                acc += dot_f32(grow + ow0, xrow + ow0 - pad + kj, ow1 - ow0);
              } else {
                float part = 0.f;
                for (int ow = ow0; ow < ow1; ++ow) part += grow[ow] * xrow[ow * stride - pad + kj];
                acc += part;
              }
            }
          }
          dwp[((static_cast<int64_t>(co) * Ci + ci) * kh + ki) * kw + kj] +=
              static_cast<float>(acc);
        }
    }
  }
  if (dx) {
    float* dxp = dx->ptr();
#pragma omp parallel for schedule(static)
    for (long long nc = 0; nc < static_cast<long long>(N) * Ci; ++nc) {
      int n = static_cast<int>(nc / Ci), ci = static_cast<int>(nc % Ci);
      float* dxplane = dxp + (static_cast<int64_t>(n) * Ci + ci) * H * W;
      for (int co = 0; co < Co; ++co) {
        const float* gplane = gp + (static_cast<int64_t>(n) * Co + co) * OH * OW;
        for (int ki = 0; ki < kh; ++ki)
          for (int kj = 0; kj < kw; ++kj) {
            float wv = wp[((static_cast<int64_t>(co) * Ci + ci) * kh + ki) * kw + kj];
            int ow0 = lo_idx(pad, kj, stride), ow1 = hi_idx(pad, kj, stride, W, OW);
            for (int oh = 0; oh < OH; ++oh) {
              int ih = oh * stride - pad + ki;
              if (ih < 0 || ih >= H) continue;
              const float* grow = gplane + static_cast<int64_t>(oh) * OW;
              float* dxrow = dxplane + static_cast<int64_t>(ih) * W;
              if (stride == 1) {
                float* ds = dxrow - pad + kj;
                for (int ow = ow0; ow < ow1; ++ow) ds[ow] += wv * grow[ow];
              } else {
                for (int ow = ow0; ow < ow1; ++ow) dxrow[ow * stride - pad + kj] += wv * grow[ow];
              }
            }
          }
      }
    }
  }
}

}  // namespace

NodeId Graph::conv2d(NodeId x, NodeId w, NodeId b, int stride, int pad) {
  const Tensor* bt = b >= 0 ? &val(b) : nullptr;
  Tensor y = conv2d_forward(val(x), val(w), bt, stride, pad);
  bool rg = any_grad({x, w, b});
  std::function<void(Graph&)> fn;
  if (rg) {
    NodeId self = static_cast<NodeId>(nodes_.size());
    fn = [=](Graph& g) {
      const Tensor& gy = g.grad(self);
      Tensor* dx = g.requires_grad(x) ? &g.grad_acc(x) : nullptr;
      Tensor* dw = g.requires_grad(w) ? &g.grad_acc(w) : nullptr;
      Tensor* db = (b >= 0 && g.requires_grad(b)) ? &g.grad_acc(b) : nullptr;
      conv2d_backward(g.val(x), g.val(w), gy, stride, pad, dx, dw, db);
    };
  }
  return push(std::move(y), rg, std::move(fn));
}

// ---------------------------------------------------------------------------
// conv_transpose2d

Tensor conv_transpose2d_forward(const Tensor& x, const Tensor& w, const Tensor* b, int stride,
                                int pad) {
  require(x.ndim() == 4 && w.ndim() == 4, "conv_transpose2d: expects 4-D input and kernel");
  require(x.dim(1) == w.dim(0), "conv_transpose2d: channel mismatch");
  int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  int Co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  int OH = (H - 1) * stride - 2 * pad + kh;
  int OW = (W - 1) * stride - 2 * pad + kw;
  require(OH >= 1 && OW >= 1, "conv_transpose2d: empty output");
  if (b) require(b->ndim() == 1 && b->dim(0) == Co, "conv_transpose2d: bias shape");
  Tensor y({N, Co, OH, OW});
  const float* xp = x.ptr();
  const float* wp = w.ptr();
  float* yp = y.ptr();
#pragma omp parallel for schedule(static)
  for (long long nc = 0; nc < static_cast<long long>(N) * Co; ++nc) {
    int n = static_cast<int>(nc / Co), co = static_cast<int>(nc % Co);
    float* out = yp + (static_cast<int64_t>(n) * Co + co) * OH * OW;
    float bias = b ? b->data[static_cast<size_t>(co)] : 0.0f;
    for (int64_t i = 0; i < static_cast<int64_t>(OH) * OW; ++i) out[i] = bias;
    for (int ci = 0; ci < Ci; ++ci) {
      const float* xplane = xp + (static_cast<int64_t>(n) * Ci + ci) * H * W;
      for (int ki = 0; ki < kh; ++ki)
        for (int kj = 0; kj < kw; ++kj) {
          float wv = wp[((static_cast<int64_t>(ci) * Co + co) * kh + ki) * kw + kj];
          int iw0 = lo_idx(pad, kj, stride), iw1 = hi_idx(pad, kj, stride, OW, W);
          for (int ih = 0; ih < H; ++ih) {
            int oh = ih * stride - pad + ki;
            if (oh < 0 || oh >= OH) continue;
            const float* xrow = xplane + static_cast<int64_t>(ih) * W;
            float* yrow = out + static_cast<int64_t>(oh) * OW;
            for (int iw = iw0; iw < iw1; ++iw) yrow[iw * stride - pad + kj] += wv * xrow[iw];
          }
        }
    }
  }
  return y;
}

namespace {

void conv_transpose2d_backward(const Tensor& x, const Tensor& w, const Tensor& gy, int stride,
                               int pad, Tensor* dx, Tensor* dw, Tensor* db) {
  int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  int Co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  int OH = gy.dim(2), OW = gy.dim(3);
  const float* xp = x.ptr();
  const float* wp = w.ptr();
  const float* gp = gy.ptr();
  if (db) {
    float* dbp = db->ptr();
#pragma omp parallel for schedule(static)
    for (int co = 0; co < Co; ++co) {
      double acc = 0.0;
      for (int n = 0; n < N; ++n)
        acc += sum_f64(gp + (static_cast<int64_t>(n) * Co + co) * OH * OW,
                       static_cast<int64_t>(OH) * OW);
      dbp[co] += static_cast<float>(acc);
    }
  }
  if (dw) {
    float* dwp = dw->ptr();
#pragma omp parallel for schedule(static)
    for (long long cc = 0; cc < static_cast<long long>(Ci) * Co; ++cc) {
      int ci = static_cast<int>(cc / Co), co = static_cast<int>(cc % Co);
      for (int ki = 0; ki < kh; ++ki)
        for (int kj = 0; kj < kw; ++kj) {
          int iw0 = lo_idx(pad, kj, stride), iw1 = hi_idx(pad, kj, stride, OW, W);
          double acc = 0.0;
          for (int n = 0; n < N; ++n) {
            const float* xplane = xp + (static_cast<int64_t>(n) * Ci + ci) * H * W;
            const float* gplane = gp + (static_cast<int64_t>(n) * Co + co) * OH * OW;
            for (int ih = 0; ih < H; ++ih) {
              int oh = ih * stride - pad + ki;
              if (oh < 0 || oh >= OH) continue;
              const float* xrow = xplane + static_cast<int64_t>(ih) * W;
              const float* grow = gplane + static_cast<int64_t>(oh) * OW;
              float part = 0.f;
              for (int iw = iw0; iw < iw1; ++iw) part += xrow[iw] * grow[iw * stride - pad + kj];
              acc += part;
            }
          }
          dwp[((static_cast<int64_t>(ci) * Co + co) * kh + ki) * kw + kj] +=
              static_cast<float>(acc);
        }
    }
  }
  if (dx) {
    float* dxp = dx->ptr();
#pragma omp parallel for schedule(static)
    for (long long nc = 0; nc < static_cast<long long>(N) * Ci; ++nc) {
      int n = static_cast<int>(nc / Ci), ci = static_cast<int>(nc % Ci);
      float* dxplane = dxp + (static_cast<int64_t>(n) * Ci + ci) * H * W;
      for (int co = 0; co < Co; ++co) {
        const float* gplane = gp + (static_cast<int64_t>(n) * Co + co) * OH * OW;
        for (int ki = 0; ki < kh; ++ki)
          for (int kj = 0; kj < kw; ++kj) {
            float wv = wp[((static_cast<int64_t>(ci) * Co + co) * kh + ki) * kw + kj];
            int iw0 = lo_idx(pad, kj, stride), iw1 = hi_idx(pad, kj, stride, OW, W);
            for (int ih = 0; ih < H; ++ih) {
              int oh = ih * stride - pad + ki;
              if (oh < 0 || oh >= OH) continue;
              const float* grow = gplane + static_cast<int64_t>(oh) * OW;
              float* dxrow = dxplane + static_cast<int64_t>(ih) * W;
              for (int iw = iw0; iw < iw1; ++iw) dxrow[iw] += wv * grow[iw * stride - pad + kj];
            }
          }
      }
    }
  }
}

}  // namespace

NodeId Graph::conv_transpose2d(NodeId x, NodeId w, NodeId b, int stride, int pad) {
  const Tensor* bt = b >= 0 ? &val(b) : nullptr;
  Tensor y = conv_transpose2d_forward(val(x), val(w), bt, stride, pad);
  bool rg = any_grad({x, w, b});
  std::function<void(Graph&)> fn;
  if (rg) {
    NodeId self = static_cast<NodeId>(nodes_.size());
    fn = [=](Graph& g) {
      const Tensor& gy = g.grad(self);
      Tensor* dx = g.requires_grad(x) ? &g.grad_acc(x) : nullptr;
      Tensor* dw = g.requires_grad(w) ? &g.grad_acc(w) : nullptr;
      Tensor* db = (b >= 0 && g.requires_grad(b)) ? &g.grad_acc(b) : nullptr;
      conv_transpose2d_backward(g.val(x), g.val(w), gy, stride, pad, dx, dw, db);
    };
  }
  return push(std::move(y), rg, std::move(fn));
}

// ---------------------------------------------------------------------------
// linear

Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor* b) {
  require(x.ndim() == 2 && w.ndim() == 2, "linear: expects 2-D input and weight");
  require(x.dim(1) == w.dim(1), "linear: feature dim mismatch");
  int N = x.dim(0), F = x.dim(1), O = w.dim(0);
  if (b) require(b->ndim() == 1 && b->dim(0) == O, "linear: bias shape");
  Tensor y({N, O});
  const float* xp = x.ptr();
  const float* wp = w.ptr();
  float* yp = y.ptr();
#pragma omp parallel for schedule(static)
  for (int n = 0; n < N; ++n) {
    const float* xrow = xp + static_cast<int64_t>(n) * F;
    float* yrow = yp + static_cast<int64_t>(n) * O;
    for (int o = 0; o < O; ++o) {
      float acc = dot_f32(xrow, wp + static_cast<int64_t>(o) * F, F);
      yrow[o] = b ? acc + b->data[static_cast<size_t>(o)] : acc;
    }
  }
  return y;
}

NodeId Graph::linear(NodeId x, NodeId w, NodeId b) {
  const Tensor* bt = b >= 0 ? &val(b) : nullptr;
  Tensor y = linear_forward(val(x), val(w), bt);
  bool rg = any_grad({x, w, b});
  std::function<void(Graph&)> fn;
  if (rg) {
    NodeId self = static_cast<NodeId>(nodes_.size());
    fn = [=](Graph& g) {
      const Tensor& gy = g.grad(self);
      const Tensor& xv = g.val(x);
      const Tensor& wv = g.val(w);
      int N = xv.dim(0), F = xv.dim(1), O = wv.dim(0);
      const float* gp = gy.ptr();
      if (g.requires_grad(x)) {
        float* dxp = g.grad_acc(x).ptr();
#pragma omp parallel for schedule(static)
        for (int n = 0; n < N; ++n) {
          float* dxrow = dxp + static_cast<int64_t>(n) * F;
          const float* grow = gp + static_cast<int64_t>(n) * O;
          for (int o = 0; o < O; ++o) {
            float gv = grow[o];
            const float* wrow = wv.ptr() + static_cast<int64_t>(o) * F;
            for (int f = 0; f < F; ++f) dxrow[f] += gv * wrow[f];
          }
        }
      }
      if (g.requires_grad(w)) {
        float* dwp = g.grad_acc(w).ptr();
#pragma omp parallel for schedule(static)
        for (int o = 0; o < O; ++o) {
          float* dwrow = dwp + static_cast<int64_t>(o) * F;
          for (int n = 0; n < N; ++n) {
            float gv = gp[static_cast<int64_t>(n) * O + o];
            const float* xrow = xv.ptr() + static_cast<int64_t>(n) * F;
            for (int f = 0; f < F; ++f) dwrow[f] += gv * xrow[f];
          }
        }
      }
      if (b >= 0 && g.requires_grad(b)) {
        float* dbp = g.grad_acc(b).ptr();
        for (int o = 0; o < O; ++o) {
          double acc = 0.0;
          for (int n = 0; n < N; ++n) acc += gp[static_cast<int64_t>(n) * O + o];
          dbp[o] += static_cast<float>(acc);
        }
      }
    };
  }
  return push(std::move(y), rg, std::move(fn));
}

// ---------------------------------------------------------------------------
// elementwise and shape ops

NodeId Graph::relu(NodeId x) {
  const Tensor& xv = val(x);
  Tensor y(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) y.data[static_cast<size_t>(i)] =
      xv.data[static_cast<size_t>(i)] > 0.f ? xv.data[static_cast<size_t>(i)] : 0.f;
  bool rg = requires_grad(x);
  std::function<void(Graph&)> fn;
  if (rg) {
    NodeId self = static_cast<NodeId>(nodes_.size());
    fn = [=](Graph& g) {
      const Tensor& gy = g.grad(self);
      const Tensor& xv2 = g.val(x);
      float* dx = g.grad_acc(x).ptr();
      const float* gp = gy.ptr();
      const float* xp = xv2.ptr();
      for (int64_t i = 0; i < xv2.numel(); ++i)
        if (xp[i] > 0.f) dx[i] += gp[i];
    };
  }
  return push(std::move(y), rg, std::move(fn));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  require(av.same_shape(bv), "add: shape mismatch");
  Tensor y(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i)
    y.data[static_cast<size_t>(i)] = av.data[static_cast<size_t>(i)] + bv.data[static_cast<size_t>(i)];
  bool rg = any_grad({a, b});
  std::function<void(Graph&)> fn;
  if (rg) {
    NodeId self = static_cast<NodeId>(nodes_.size());
    fn = [=](Graph& g) {
      const Tensor& gy = g.grad(self);
      if (g.requires_grad(a)) {
        float* da = g.grad_acc(a).ptr();
        for (int64_t i = 0; i < gy.numel(); ++i) da[i] += gy.data[static_cast<size_t>(i)];
      }
      if (g.requires_grad(b)) {
        float* db = g.grad_acc(b).ptr();
        for (int64_t i = 0; i < gy.numel(); ++i) db[i] += gy.data[static_cast<size_t>(i)];
      }
    };
  }
  return push(std::move(y), rg, std::move(fn));
}

NodeId Graph::scale(NodeId x, float s) {
  const Tensor& xv = val(x);
  Tensor y(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i)
    y.data[static_cast<size_t>(i)] = s * xv.data[static_cast<size_t>(i)];
  bool rg = requires_grad(x);
  std::function<void(Graph&)> fn;
  if (rg) {
    NodeId self = static_cast<NodeId>(nodes_.size());
    fn = [=](Graph& g) {
      const Tensor& gy = g.grad(self);
      float* dx = g.grad_acc(x).ptr();
      for (int64_t i = 0; i < gy.numel(); ++i) dx[i] += s * gy.data[static_cast<size_t>(i)];
    };
  }
  return push(std::move(y), rg, std::move(fn));
}

NodeId Graph::global_avg_pool(NodeId x) {
  const Tensor& xv = val(x);
  require(xv.ndim() == 4, "global_avg_pool: expects NCHW");
  int N = xv.dim(0), C = xv.dim(1);
  int64_t hw = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
  Tensor y({N, C});
  for (int64_t i = 0; i < static_cast<int64_t>(N) * C; ++i)
    y.data[static_cast<size_t>(i)] =
        static_cast<float>(sum_f64(xv.ptr() + i * hw, hw) / static_cast<double>(hw));
  bool rg = requires_grad(x);
  std::function<void(Graph&)> fn;
  if (rg) {
    NodeId self = static_cast<NodeId>(nodes_.size());
    fn = [=](Graph& g) {
      const Tensor& gy = g.grad(self);
      float* dx = g.grad_acc(x).ptr();
      for (int64_t i = 0; i < gy.numel(); ++i) {
        float gv = gy.data[static_cast<size_t>(i)] / static_cast<float>(hw);
        float* row = dx + i * hw;
        for (int64_t j = 0; j < hw; ++j) row[j] += gv;
      }
    };
  }
  return push(std::move(y), rg, std::move(fn));
}

NodeId Graph::reshape(NodeId x, std::vector<int> shape) {
  const Tensor& xv = val(x);
  require(Tensor::numel_of(shape) == xv.numel(), "reshape: element count mismatch");
  Tensor y(std::move(shape), xv.data);
  bool rg = requires_grad(x);
  std::function<void(Graph&)> fn;
  if (rg) {
    NodeId self = static_cast<NodeId>(nodes_.size());
    fn = [=](Graph& g) {
      const Tensor& gy = g.grad(self);
      float* dx = g.grad_acc(x).ptr();
      for (int64_t i = 0; i < gy.numel(); ++i) dx[i] += gy.data[static_cast<size_t>(i)];
    };
  }
  return push(std::move(y), rg, std::move(fn));
}

namespace {

// source index for crop (center) or edge-replicate pad along one axis
inline int crop_pad_src(int out_idx, int in_size, int out_size) {
  if (out_size <= in_size) return out_idx + (in_size - out_size) / 2;
  int i = out_idx - (out_size - in_size) / 2;
  return std::clamp(i, 0, in_size - 1);
}

}  // namespace

NodeId Graph::crop_pad2d(NodeId x, int out_h, int out_w) {
  const Tensor& xv = val(x);
  require(xv.ndim() == 4, "crop_pad2d: expects NCHW");
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  Tensor y({N, C, out_h, out_w});
  const float* xp = xv.ptr();
  float* yp = y.ptr();
  for (int64_t p = 0; p < static_cast<int64_t>(N) * C; ++p) {
    const float* xplane = xp + p * H * W;
    float* yplane = yp + p * static_cast<int64_t>(out_h) * out_w;
    for (int oh = 0; oh < out_h; ++oh) {
      int ih = crop_pad_src(oh, H, out_h);
      for (int ow = 0; ow < out_w; ++ow)
        yplane[static_cast<int64_t>(oh) * out_w + ow] =
            xplane[static_cast<int64_t>(ih) * W + crop_pad_src(ow, W, out_w)];
    }
  }
  bool rg = requires_grad(x);
  std::function<void(Graph&)> fn;
  if (rg) {
    NodeId self = static_cast<NodeId>(nodes_.size());
    fn = [=](Graph& g) {
      const Tensor& gy = g.grad(self);
      float* dx = g.grad_acc(x).ptr();
      const float* gp = gy.ptr();
      for (int64_t p = 0; p < static_cast<int64_t>(N) * C; ++p) {
        float* dxplane = dx + p * H * W;
        const float* gplane = gp + p * static_cast<int64_t>(out_h) * out_w;
        for (int oh = 0; oh < out_h; ++oh) {
          int ih = crop_pad_src(oh, H, out_h);
          for (int ow = 0; ow < out_w; ++ow)
            dxplane[static_cast<int64_t>(ih) * W + crop_pad_src(ow, W, out_w)] +=
                gplane[static_cast<int64_t>(oh) * out_w + ow];
        }
      }
    };
  }
  return push(std::move(y), rg, std::move(fn));
}

NodeId Graph::gather_rows(NodeId x, std::vector<int> rows) {
  const Tensor& xv = val(x);
  require(xv.ndim() >= 1 && !rows.empty(), "gather_rows: empty selection");
  int N = xv.dim(0);
  int64_t rowlen = xv.numel() / N;
  for (int r : rows) require(r >= 0 && r < N, "gather_rows: row out of range");
  std::vector<int> oshape = xv.shape;
  oshape[0] = static_cast<int>(rows.size());
  Tensor y(oshape);
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy_n(xv.ptr() + static_cast<int64_t>(rows[i]) * rowlen, rowlen,
                y.ptr() + static_cast<int64_t>(i) * rowlen);
  bool rg = requires_grad(x);
  std::function<void(Graph&)> fn;
  if (rg) {
    NodeId self = static_cast<NodeId>(nodes_.size());
    fn = [=, rows = std::move(rows)](Graph& g) {
      const Tensor& gy = g.grad(self);
      float* dx = g.grad_acc(x).ptr();
      const float* gp = gy.ptr();
      for (size_t i = 0; i < rows.size(); ++i) {
        float* drow = dx + static_cast<int64_t>(rows[i]) * rowlen;
        const float* grow = gp + static_cast<int64_t>(i) * rowlen;
        for (int64_t j = 0; j < rowlen; ++j) drow[j] += grow[j];
      }
    };
    return push(std::move(y), rg, std::move(fn));
  }
  return push(std::move(y), rg, nullptr);
}

NodeId Graph::mean_rows(NodeId x) {
  const Tensor& xv = val(x);
  require(xv.ndim() == 2, "mean_rows: expects [N,F]");
  int N = xv.dim(0), F = xv.dim(1);
  Tensor y({F});
  for (int f = 0; f < F; ++f) {
    double acc = 0.0;
    for (int n = 0; n < N; ++n) acc += xv.data[static_cast<size_t>(n) * F + f];
    y.data[static_cast<size_t>(f)] = static_cast<float>(acc / N);
  }
  bool rg = requires_grad(x);
  std::function<void(Graph&)> fn;
  if (rg) {
    NodeId self = static_cast<NodeId>(nodes_.size());
    fn = [=](Graph& g) {
      const Tensor& gy = g.grad(self);
      float* dx = g.grad_acc(x).ptr();
      for (int n = 0; n < N; ++n)
        for (int f = 0; f < F; ++f)
          dx[static_cast<size_t>(n) * F + f] += gy.data[static_cast<size_t>(f)] / N;
    };
  }
  return push(std::move(y), rg, std::move(fn));
}

// ---------------------------------------------------------------------------
// group norm

NodeId Graph::group_norm(NodeId x, NodeId gamma, NodeId beta, int groups, float eps) {
  const Tensor& xv = val(x);
  const Tensor& gv = val(gamma);
  const Tensor& bv = val(beta);
  require(xv.ndim() == 4, "group_norm: expects NCHW");
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  require(C % groups == 0, "group_norm: channels not divisible by groups");
  require(gv.ndim() == 1 && gv.dim(0) == C && bv.same_shape(gv), "group_norm: affine shape");
  int m = C / groups;
  int64_t hw = static_cast<int64_t>(H) * W;
  int64_t glen = m * hw;
  Tensor y(xv.shape);
  std::vector<float> mean(static_cast<size_t>(N) * groups), istd(static_cast<size_t>(N) * groups);
#pragma omp parallel for schedule(static)
  for (long long ng = 0; ng < static_cast<long long>(N) * groups; ++ng) {
    int n = static_cast<int>(ng / groups), gi = static_cast<int>(ng % groups);
    const float* base = xv.ptr() + (static_cast<int64_t>(n) * C + static_cast<int64_t>(gi) * m) * hw;
    double mu = sum_f64(base, glen) / static_cast<double>(glen);
    double var = 0.0;
    for (int64_t i = 0; i < glen; ++i) {
      double d = base[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(glen);
    float r = static_cast<float>(1.0 / std::sqrt(var + eps));
    mean[static_cast<size_t>(ng)] = static_cast<float>(mu);
    istd[static_cast<size_t>(ng)] = r;
    float* out = y.ptr() + (static_cast<int64_t>(n) * C + static_cast<int64_t>(gi) * m) * hw;
    for (int c = 0; c < m; ++c) {
      float ga = gv.data[static_cast<size_t>(gi * m + c)];
      float be = bv.data[static_cast<size_t>(gi * m + c)];
      const float* xr = base + c * hw;
      float* yr = out + c * hw;
      float mu_f = mean[static_cast<size_t>(ng)];
      for (int64_t i = 0; i < hw; ++i) yr[i] = ga * ((xr[i] - mu_f) * r) + be;
    }
  }
  bool rg = any_grad({x, gamma, beta});
  std::function<void(Graph&)> fn;
  if (rg) {
    NodeId self = static_cast<NodeId>(nodes_.size());
    fn = [=, mean = std::move(mean), istd = std::move(istd)](Graph& g) {
      const Tensor& gy = g.grad(self);
      const Tensor& xv2 = g.val(x);
      const Tensor& gv2 = g.val(gamma);
      const float* gp = gy.ptr();
      const float* xp = xv2.ptr();
      if (g.requires_grad(gamma) || g.requires_grad(beta)) {
        float* dga = g.requires_grad(gamma) ? g.grad_acc(gamma).ptr() : nullptr;
        float* dbe = g.requires_grad(beta) ? g.grad_acc(beta).ptr() : nullptr;
#pragma omp parallel for schedule(static)
        for (int c = 0; c < C; ++c) {
          int gi = c / m;
          double sga = 0.0, sbe = 0.0;
          for (int n = 0; n < N; ++n) {
            float mu = mean[static_cast<size_t>(n) * groups + gi];
            float r = istd[static_cast<size_t>(n) * groups + gi];
            const float* xr = xp + (static_cast<int64_t>(n) * C + c) * hw;
            const float* gr = gp + (static_cast<int64_t>(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) {
              sga += static_cast<double>(gr[i]) * ((xr[i] - mu) * r);
              sbe += gr[i];
            }
          }
          if (dga) dga[c] += static_cast<float>(sga);
          if (dbe) dbe[c] += static_cast<float>(sbe);
        }
      }
      if (g.requires_grad(x)) {
        float* dx = g.grad_acc(x).ptr();
#pragma omp parallel for schedule(static)
        for (long long ng = 0; ng < static_cast<long long>(N) * groups; ++ng) {
          int n = static_cast<int>(ng / groups), gi = static_cast<int>(ng % groups);
          float mu = mean[static_cast<size_t>(ng)];
          float r = istd[static_cast<size_t>(ng)];
          const float* xbase =
              xp + (static_cast<int64_t>(n) * C + static_cast<int64_t>(gi) * m) * hw;
          const float* gbase =
              gp + (static_cast<int64_t>(n) * C + static_cast<int64_t>(gi) * m) * hw;
          float* dbase = dx + (static_cast<int64_t>(n) * C + static_cast<int64_t>(gi) * m) * hw;
          double s1 = 0.0, s2 = 0.0;  // sum(dy*gamma), sum(dy*gamma*xhat)
          for (int c = 0; c < m; ++c) {
            float ga = gv2.data[static_cast<size_t>(gi * m + c)];
            const float* xr = xbase + c * hw;
            const float* gr = gbase + c * hw;
            for (int64_t i = 0; i < hw; ++i) {
              float dxh = gr[i] * ga;
              s1 += dxh;
              s2 += static_cast<double>(dxh) * ((xr[i] - mu) * r);
            }
          }
          float c1 = static_cast<float>(s1 / static_cast<double>(glen));
          float c2 = static_cast<float>(s2 / static_cast<double>(glen));
          for (int c = 0; c < m; ++c) {
            float ga = gv2.data[static_cast<size_t>(gi * m + c)];
            const float* xr = xbase + c * hw;
            const float* gr = gbase + c * hw;
            float* dr = dbase + c * hw;
            for (int64_t i = 0; i < hw; ++i) {
              float xh = (xr[i] - mu) * r;
              dr[i] += r * (gr[i] * ga - c1 - xh * c2);
            }
          }
        }
      }
    };
  }
  return push(std::move(y), rg, std::move(fn));
}

// ---------------------------------------------------------------------------
// losses

NodeId Graph::softmax_ce(NodeId logits, std::vector<int> labels, float label_smoothing,
                         float focal_gamma) {
  const Tensor& lv = val(logits);
  require(lv.ndim() == 2, "softmax_ce: logits must be [N,K]");
  int N = lv.dim(0), K = lv.dim(1);
  require(N > 0, "softmax_ce: empty batch");
  require(static_cast<int>(labels.size()) == N, "softmax_ce: label count mismatch");
  for (int t : labels) require(t >= 0 && t < K, "softmax_ce: label out of range");
  require(focal_gamma >= 0.f, "softmax_ce: negative focal gamma");
  require(label_smoothing >= 0.f && label_smoothing < 1.f, "softmax_ce: bad label smoothing");

  std::vector<float> probs(static_cast<size_t>(N) * K);
  double total = 0.0;
  for (int n = 0; n < N; ++n) {
    const float* row = lv.ptr() + static_cast<int64_t>(n) * K;
    double mx = row[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(row[k]));
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    double logz = std::log(z);
    double sum_logp = 0.0;
    for (int k = 0; k < K; ++k) {
      double logp = row[k] - mx - logz;
      probs[static_cast<size_t>(n) * K + k] = static_cast<float>(std::exp(logp));
      sum_logp += logp;
    }
    double logpt = row[labels[static_cast<size_t>(n)]] - mx - logz;
    if (focal_gamma > 0.f) {
      double pt = std::exp(logpt);
      total += -std::pow(1.0 - pt, static_cast<double>(focal_gamma)) * logpt;
    } else {
      double a = label_smoothing;
      total += -((1.0 - a) * logpt + (a / K) * sum_logp);
    }
  }
  Tensor y({1});
  y.data[0] = static_cast<float>(total / N);

  bool rg = requires_grad(logits);
  std::function<void(Graph&)> fn;
  if (rg) {
    NodeId self = static_cast<NodeId>(nodes_.size());
    fn = [=, labels = std::move(labels), probs = std::move(probs)](Graph& g) {
      float gout = g.grad(self).data[0];
      float* dl = g.grad_acc(logits).ptr();
      float inv_n = 1.0f / static_cast<float>(N);
      for (int n = 0; n < N; ++n) {
        const float* p = probs.data() + static_cast<size_t>(n) * K;
        float* drow = dl + static_cast<int64_t>(n) * K;
        int t = labels[static_cast<size_t>(n)];
        if (focal_gamma > 0.f) {
          double pt = p[t];
          double onemp = 1.0 - pt;
          double coef = 0.0;
          if (onemp > 1e-12) {
            coef = std::pow(onemp, static_cast<double>(focal_gamma) - 1.0) *
                   (focal_gamma * pt * std::log(pt) - onemp);
          }
          for (int k = 0; k < K; ++k) {
            double ind = (k == t) ? 1.0 : 0.0;
            drow[k] += gout * inv_n * static_cast<float>(coef * (ind - p[k]));
          }
        } else {
          double a = label_smoothing;
          for (int k = 0; k < K; ++k) {
            double q = (k == t ? 1.0 - a : 0.0) + a / K;
            drow[k] += gout * inv_n * static_cast<float>(p[k] - q);
          }
        }
      }
    };
  }
  return push(std::move(y), rg, std::move(fn));
}

NodeId Graph::cosine_align_loss(NodeId feat, Tensor v, float lambda) {
  const Tensor& fv = val(feat);
  require(fv.ndim() == 1 && fv.same_shape(v), "cosine_align_loss: shape mismatch");
  int F = fv.dim(0);
  double norm2 = 0.0, dotv = 0.0;
  for (int i = 0; i < F; ++i) {
    norm2 += static_cast<double>(fv.data[static_cast<size_t>(i)]) * fv.data[static_cast<size_t>(i)];
    dotv += static_cast<double>(fv.data[static_cast<size_t>(i)]) * v.data[static_cast<size_t>(i)];
  }
  double r = std::sqrt(norm2);
  if (r < 1e-12) throw std::runtime_error("cosine_align_loss: zero feature vector");
  double c = dotv / r;
  Tensor y({1});
  y.data[0] = static_cast<float>(lambda * (1.0 - c));
  bool rg = requires_grad(feat);
  std::function<void(Graph&)> fn;
  if (rg) {
    NodeId self = static_cast<NodeId>(nodes_.size());
    fn = [=, v = std::move(v)](Graph& g) {
      float gout = g.grad(self).data[0];
      const Tensor& u = g.val(feat);
      float* df = g.grad_acc(feat).ptr();
      // d/du [cos] = v/r - (c/r^2) u
      for (int i = 0; i < F; ++i) {
        double dcos = v.data[static_cast<size_t>(i)] / r -
                      (c / (r * r)) * u.data[static_cast<size_t>(i)];
        df[i] += gout * static_cast<float>(-lambda * dcos);
      }
    };
  }
  return push(std::move(y), rg, std::move(fn));
}

NodeId Graph::sse_mean(NodeId pred, Tensor target) {
  const Tensor& pv = val(pred);
  require(pv.same_shape(target), "sse_mean: shape mismatch");
  require(pv.ndim() >= 1 && pv.dim(0) > 0, "sse_mean: empty batch");
  int N = pv.dim(0);
  double total = 0.0;
  for (int64_t i = 0; i < pv.numel(); ++i) {
    double d = static_cast<double>(pv.data[static_cast<size_t>(i)]) -
               target.data[static_cast<size_t>(i)];
    total += d * d;
  }
  Tensor y({1});
  y.data[0] = static_cast<float>(total / N);
  bool rg = requires_grad(pred);
  std::function<void(Graph&)> fn;
  if (rg) {
    NodeId self = static_cast<NodeId>(nodes_.size());
    fn = [=, target = std::move(target)](Graph& g) {
      float gout = g.grad(self).data[0];
      const Tensor& p = g.val(pred);
      float* dp = g.grad_acc(pred).ptr();
      float c = 2.0f * gout / static_cast<float>(N);
      for (int64_t i = 0; i < p.numel(); ++i)
        dp[i] += c * (p.data[static_cast<size_t>(i)] - target.data[static_cast<size_t>(i)]);
    };
  }
  return push(std::move(y), rg, std::move(fn));
}

NodeId Graph::kl_free_bits(NodeId mu, NodeId logvar, float tau_fb) {
  const Tensor& mv = val(mu);
  const Tensor& lv = val(logvar);
  require(mv.ndim() == 2 && mv.same_shape(lv), "kl_free_bits: expects matching [N,D]");
  require(tau_fb >= 0.f, "kl_free_bits: negative free-bits floor");
  int N = mv.dim(0), D = mv.dim(1);
  std::vector<double> kl_d(static_cast<size_t>(D), 0.0);
  for (int n = 0; n < N; ++n)
    for (int d = 0; d < D; ++d) {
      double m = mv.data[static_cast<size_t>(n) * D + d];
      double l = lv.data[static_cast<size_t>(n) * D + d];
      kl_d[static_cast<size_t>(d)] += 0.5 * (m * m + std::exp(l) - l - 1.0);
    }
  double total = 0.0;
  std::vector<char> active(static_cast<size_t>(D));
  for (int d = 0; d < D; ++d) {
    kl_d[static_cast<size_t>(d)] /= N;
    active[static_cast<size_t>(d)] = kl_d[static_cast<size_t>(d)] > tau_fb ? 1 : 0;
    total += std::max(kl_d[static_cast<size_t>(d)], static_cast<double>(tau_fb));
  }
  Tensor y({1});
  y.data[0] = static_cast<float>(total);
  bool rg = any_grad({mu, logvar});
  std::function<void(Graph&)> fn;
  if (rg) {
    NodeId self = static_cast<NodeId>(nodes_.size());
    fn = [=, active = std::move(active)](Graph& g) {
      float gout = g.grad(self).data[0];
      const Tensor& m2 = g.val(mu);
      const Tensor& l2 = g.val(logvar);
      float* dm = g.requires_grad(mu) ? g.grad_acc(mu).ptr() : nullptr;
      float* dl = g.requires_grad(logvar) ? g.grad_acc(logvar).ptr() : nullptr;
      float inv_n = 1.0f / static_cast<float>(N);
      for (int n = 0; n < N; ++n)
        for (int d = 0; d < D; ++d) {
          if (!active[static_cast<size_t>(d)]) continue;
          size_t i = static_cast<size_t>(n) * D + d;
          if (dm) dm[i] += gout * inv_n * m2.data[i];
          if (dl) dl[i] += gout * inv_n * 0.5f * (std::exp(l2.data[i]) - 1.0f);
        }
    };
  }
  return push(std::move(y), rg, std::move(fn));
}

NodeId Graph::reparam(NodeId mu, NodeId logvar, Tensor eta) {
  const Tensor& mv = val(mu);
  const Tensor& lv = val(logvar);
  require(mv.same_shape(lv) && mv.same_shape(eta), "reparam: shape mismatch");
  Tensor y(mv.shape);
  for (int64_t i = 0; i < mv.numel(); ++i)
    y.data[static_cast<size_t>(i)] =
        mv.data[static_cast<size_t>(i)] +
        std::exp(0.5f * lv.data[static_cast<size_t>(i)]) * eta.data[static_cast<size_t>(i)];
  bool rg = any_grad({mu, logvar});
  std::function<void(Graph&)> fn;
  if (rg) {
    NodeId self = static_cast<NodeId>(nodes_.size());
    fn = [=, eta = std::move(eta)](Graph& g) {
      const Tensor& gy = g.grad(self);
      const Tensor& l2 = g.val(logvar);
      float* dm = g.requires_grad(mu) ? g.grad_acc(mu).ptr() : nullptr;
      float* dl = g.requires_grad(logvar) ? g.grad_acc(logvar).ptr() : nullptr;
      for (int64_t i = 0; i < gy.numel(); ++i) {
        float gv = gy.data[static_cast<size_t>(i)];
        if (dm) dm[i] += gv;
        if (dl)
          dl[i] += gv * 0.5f * std::exp(0.5f * l2.data[static_cast<size_t>(i)]) *
                   eta.data[static_cast<size_t>(i)];
      }
    };
  }
  return push(std::move(y), rg, std::move(fn));
}

}  // namespace rffi::nn
