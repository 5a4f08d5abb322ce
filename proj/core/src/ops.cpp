#include "mabn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace mabn::ops {
namespace {

using detail::Node;
using detail::accumulate_grad;
using NodePtr = std::shared_ptr<Node>;

Tensor make_node(const char* op, Shape shape, std::vector<double> values,
                 const std::vector<Tensor>& inputs, std::function<void(Node&)> bw) {
  check_finite(values, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op;
  bool rg = false;
  for (const auto& t : inputs) rg = rg || t.requires_grad();
  node->requires_grad = rg;
  if (rg) {
    node->parents.reserve(inputs.size());
    for (const auto& t : inputs) node->parents.push_back(t.impl());
    node->backward_fn = std::move(bw);
  }
  return Tensor::from_impl(std::move(node));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string("ShapeMismatch: ") + op + " needs identical shapes, got " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Channel geometry of a [N,C] or [N,C,H,W] tensor.
struct ChannelView {
  int64_t batch, channels, spatial;
};

ChannelView channel_view(const Tensor& x, const Tensor& v, const char* op) {
  if (x.dim() != 2 && x.dim() != 4) {
    throw ShapeError(std::string("ShapeMismatch: ") + op + " needs rank 2 or 4 input, got " +
                     shape_str(x.shape()));
  }
  if (v.dim() != 1 || v.shape()[0] != x.shape()[1]) {
    throw ShapeError(std::string("ChannelMismatch: ") + op + " input has " +
                     std::to_string(x.shape()[1]) + " channels, vector is " + shape_str(v.shape()));
  }
  int64_t spatial = x.dim() == 4 ? x.shape()[2] * x.shape()[3] : 1;
  return {x.shape()[0], x.shape()[1], spatial};
}

// Mapping from input flat index to output flat index for axis reductions.
struct ReduceMap {
  Shape out_shape;
  int64_t group;  // elements folded into each output slot
  std::vector<int64_t> in_strides;
  std::vector<int64_t> out_stride_per_axis;  // 0 for reduced axes
};

ReduceMap reduce_map(const Tensor& x, std::vector<int64_t>& axes, const char* op) {
  const Shape& shape = x.shape();
  int64_t rank = x.dim();
  std::sort(axes.begin(), axes.end());
  if (std::adjacent_find(axes.begin(), axes.end()) != axes.end()) {
    throw ShapeError(std::string("ShapeMismatch: ") + op + " got duplicate axes");
  }
  std::vector<bool> reduced(static_cast<size_t>(rank), false);
  for (int64_t a : axes) {
    if (a < 0 || a >= rank) {
      throw ShapeError(std::string("ShapeMismatch: ") + op + " axis " + std::to_string(a) +
                       " out of range for shape " + shape_str(shape));
    }
    reduced[static_cast<size_t>(a)] = true;
  }
  if (x.numel() == 0) {
    throw ShapeError(std::string("ShapeMismatch: ") + op + " over an empty tensor");
  }

  ReduceMap m;
  m.group = 1;
  for (int64_t a = 0; a < rank; ++a) {
    if (reduced[static_cast<size_t>(a)]) {
      m.group *= shape[static_cast<size_t>(a)];
    } else {
      m.out_shape.push_back(shape[static_cast<size_t>(a)]);
    }
  }
  if (m.out_shape.empty()) m.out_shape = {1};

  m.in_strides.assign(static_cast<size_t>(rank), 1);
  for (int64_t a = rank - 2; a >= 0; --a) {
    m.in_strides[static_cast<size_t>(a)] =
        m.in_strides[static_cast<size_t>(a + 1)] * shape[static_cast<size_t>(a + 1)];
  }
  m.out_stride_per_axis.assign(static_cast<size_t>(rank), 0);
  int64_t out_stride = 1;
  for (int64_t a = rank - 1; a >= 0; --a) {
    if (!reduced[static_cast<size_t>(a)]) {
      m.out_stride_per_axis[static_cast<size_t>(a)] = out_stride;
      out_stride *= shape[static_cast<size_t>(a)];
    }
  }
  return m;
}

inline int64_t map_index(const ReduceMap& m, int64_t flat) {
  int64_t out = 0;
  for (size_t a = 0; a < m.in_strides.size(); ++a) {
    int64_t digit = (flat / m.in_strides[a]);
    flat -= digit * m.in_strides[a];
    out += digit * m.out_stride_per_axis[a];
  }
  return out;
}

std::vector<double> softmax_rows(std::span<const double> logits, int64_t n, int64_t k) {
  std::vector<double> p(logits.begin(), logits.end());
  for (int64_t i = 0; i < n; ++i) {
    double* row = p.data() + i * k;
    double m = *std::max_element(row, row + k);
    double z = 0.0;
    for (int64_t j = 0; j < k; ++j) {
      row[j] = std::exp(row[j] - m);
      z += row[j];
    }
    for (int64_t j = 0; j < k; ++j) row[j] /= z;
  }
  return p;
}

// Counter-clockwise rotation of the spatial dims by k*90 degrees; k in [0,4).
std::vector<double> rotate_hw(std::span<const double> in, int64_t planes, int64_t h, int k) {
  std::vector<double> out(in.size());
  const int64_t hw = h * h;
  for (int64_t p = 0; p < planes; ++p) {
    const double* src = in.data() + p * hw;
    double* dst = out.data() + p * hw;
    for (int64_t i = 0; i < h; ++i) {
      for (int64_t j = 0; j < h; ++j) {
        int64_t si, sj;
        switch (k) {
          case 1: si = j; sj = h - 1 - i; break;
          case 2: si = h - 1 - i; sj = h - 1 - j; break;
          case 3: si = h - 1 - j; sj = i; break;
          default: si = i; sj = j; break;
        }
        dst[i * h + j] = src[si * h + sj];
      }
    }
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  NodePtr pa = a.impl(), pb = b.impl();
  return make_node("add", a.shape(), std::move(out), {a, b}, [pa, pb](Node& self) {
    accumulate_grad(*pa, self.grad);
    accumulate_grad(*pb, self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  NodePtr pa = a.impl(), pb = b.impl();
  return make_node("sub", a.shape(), std::move(out), {a, b}, [pa, pb](Node& self) {
    accumulate_grad(*pa, self.grad);
    if (pb->requires_grad) {
      std::vector<double> gb(self.grad.size());
      for (size_t i = 0; i < gb.size(); ++i) gb[i] = -self.grad[i];
      accumulate_grad(*pb, gb);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  NodePtr pa = a.impl(), pb = b.impl();
  return make_node("mul", a.shape(), std::move(out), {a, b}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      std::vector<double> g(self.grad.size());
      for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * pb->values[i];
      accumulate_grad(*pa, g);
    }
    if (pb->requires_grad) {
      std::vector<double> g(self.grad.size());
      for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * pa->values[i];
      accumulate_grad(*pb, g);
    }
  });
}

Tensor neg(const Tensor& a) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = -av[i];
  NodePtr pa = a.impl();
  return make_node("neg", a.shape(), std::move(out), {a}, [pa](Node& self) {
    if (!pa->requires_grad) return;
    std::vector<double> g(self.grad.size());
    for (size_t i = 0; i < g.size(); ++i) g[i] = -self.grad[i];
    accumulate_grad(*pa, g);
  });
}

Tensor scale(const Tensor& a, double c) {
  if (!std::isfinite(c)) throw NonFiniteError("NonFinite: scale factor is not finite");
  auto av = a.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  NodePtr pa = a.impl();
  return make_node("scale", a.shape(), std::move(out), {a}, [pa, c](Node& self) {
    if (!pa->requires_grad) return;
    std::vector<double> g(self.grad.size());
    for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * c;
    accumulate_grad(*pa, g);
  });
}

Tensor add_scalar(const Tensor& a, double c) {
  if (!std::isfinite(c)) throw NonFiniteError("NonFinite: add_scalar addend is not finite");
  auto av = a.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  NodePtr pa = a.impl();
  return make_node("add_scalar", a.shape(), std::move(out), {a},
                   [pa](Node& self) { accumulate_grad(*pa, self.grad); });
}

Tensor rsqrt(const Tensor& a) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) {
    if (av[i] <= 0.0) throw ShapeError("ShapeMismatch: rsqrt needs strictly positive inputs");
    out[i] = 1.0 / std::sqrt(av[i]);
  }
  NodePtr pa = a.impl();
  return make_node("rsqrt", a.shape(), std::move(out), {a}, [pa](Node& self) {
    if (!pa->requires_grad) return;
    std::vector<double> g(self.grad.size());
    for (size_t i = 0; i < g.size(); ++i) {
      double y = self.values[i];
      g[i] = self.grad[i] * (-0.5 * y * y * y);
    }
    accumulate_grad(*pa, g);
  });
}

Tensor add_channel(const Tensor& x, const Tensor& v) {
  ChannelView cv = channel_view(x, v, "add_channel");
  auto xv = x.values(), vv = v.values();
  std::vector<double> out(xv.size());
  for (int64_t n = 0; n < cv.batch; ++n) {
    for (int64_t c = 0; c < cv.channels; ++c) {
      const int64_t base = (n * cv.channels + c) * cv.spatial;
      for (int64_t s = 0; s < cv.spatial; ++s) out[base + s] = xv[base + s] + vv[c];
    }
  }
  NodePtr px = x.impl(), pv = v.impl();
  return make_node("add_channel", x.shape(), std::move(out), {x, v}, [px, pv, cv](Node& self) {
    accumulate_grad(*px, self.grad);
    if (pv->requires_grad) {
      std::vector<double> gv(static_cast<size_t>(cv.channels), 0.0);
      for (int64_t n = 0; n < cv.batch; ++n)
        for (int64_t c = 0; c < cv.channels; ++c) {
          const int64_t base = (n * cv.channels + c) * cv.spatial;
          for (int64_t s = 0; s < cv.spatial; ++s) gv[c] += self.grad[base + s];
        }
      accumulate_grad(*pv, gv);
    }
  });
}

Tensor mul_channel(const Tensor& x, const Tensor& v) {
  ChannelView cv = channel_view(x, v, "mul_channel");
  auto xv = x.values(), vv = v.values();
  std::vector<double> out(xv.size());
  for (int64_t n = 0; n < cv.batch; ++n) {
    for (int64_t c = 0; c < cv.channels; ++c) {
      const int64_t base = (n * cv.channels + c) * cv.spatial;
      for (int64_t s = 0; s < cv.spatial; ++s) out[base + s] = xv[base + s] * vv[c];
    }
  }
  NodePtr px = x.impl(), pv = v.impl();
  return make_node("mul_channel", x.shape(), std::move(out), {x, v}, [px, pv, cv](Node& self) {
    if (px->requires_grad) {
      std::vector<double> gx(self.grad.size());
      for (int64_t n = 0; n < cv.batch; ++n)
        for (int64_t c = 0; c < cv.channels; ++c) {
          const int64_t base = (n * cv.channels + c) * cv.spatial;
          for (int64_t s = 0; s < cv.spatial; ++s)
            gx[base + s] = self.grad[base + s] * pv->values[c];
        }
      accumulate_grad(*px, gx);
    }
    if (pv->requires_grad) {
      std::vector<double> gv(static_cast<size_t>(cv.channels), 0.0);
      for (int64_t n = 0; n < cv.batch; ++n)
        for (int64_t c = 0; c < cv.channels; ++c) {
          const int64_t base = (n * cv.channels + c) * cv.spatial;
          for (int64_t s = 0; s < cv.spatial; ++s)
            gv[c] += self.grad[base + s] * px->values[base + s];
        }
      accumulate_grad(*pv, gv);
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("ShapeMismatch: matmul got " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  auto av = a.values(), bv = b.values();
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
#pragma omp parallel for if (m * n * k > 32768)
  for (int64_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data() + p * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  NodePtr pa = a.impl(), pb = b.impl();
  return make_node("matmul", {m, n}, std::move(out), {a, b}, [pa, pb, m, k, n](Node& self) {
    if (pa->requires_grad) {
      std::vector<double> ga(static_cast<size_t>(m * k), 0.0);
#pragma omp parallel for if (m * n * k > 32768)
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
          const double g = self.grad[i * n + j];
          for (int64_t p = 0; p < k; ++p) ga[i * k + p] += g * pb->values[p * n + j];
        }
      accumulate_grad(*pa, ga);
    }
    if (pb->requires_grad) {
      std::vector<double> gb(static_cast<size_t>(k * n), 0.0);
#pragma omp parallel for if (m * n * k > 32768)
      for (int64_t p = 0; p < k; ++p)
        for (int64_t i = 0; i < m; ++i) {
          const double apv = pa->values[i * k + p];
          for (int64_t j = 0; j < n; ++j) gb[p * n + j] += apv * self.grad[i * n + j];
        }
      accumulate_grad(*pb, gb);
    }
  });
}

Tensor relu(const Tensor& x) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  NodePtr px = x.impl();
  return make_node("relu", x.shape(), std::move(out), {x}, [px](Node& self) {
    if (!px->requires_grad) return;
    std::vector<double> g(self.grad.size());
    for (size_t i = 0; i < g.size(); ++i) g[i] = px->values[i] > 0.0 ? self.grad[i] : 0.0;
    accumulate_grad(*px, g);
  });
}

Tensor conv2d_3x3(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.dim() != 4) {
    throw ShapeError("ShapeMismatch: conv2d_3x3 input must be [N,C,H,W], got " +
                     shape_str(x.shape()));
  }
  if (w.dim() != 4 || w.shape()[2] != 3 || w.shape()[3] != 3 || w.shape()[1] != x.shape()[1]) {
    throw ShapeError("ShapeMismatch: conv2d_3x3 weight must be [Co," +
                     std::to_string(x.shape()[1]) + ",3,3], got " + shape_str(w.shape()));
  }
  const bool has_bias = bias.numel() > 0;
  if (has_bias && (bias.dim() != 1 || bias.shape()[0] != w.shape()[0])) {
    throw ShapeError("ChannelMismatch: conv2d_3x3 bias " + shape_str(bias.shape()));
  }
  const int64_t n = x.shape()[0], ci = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  const int64_t co = w.shape()[0];
  auto xv = x.values(), wv = w.values(), bv = bias.values();
  std::vector<double> out(static_cast<size_t>(n * co * h * wd), 0.0);

#pragma omp parallel for collapse(2) if (n * co * h * wd > 4096)
  for (int64_t in = 0; in < n; ++in) {
    for (int64_t oc = 0; oc < co; ++oc) {
      double* oplane = out.data() + (in * co + oc) * h * wd;
      const double bias_v = has_bias ? bv[oc] : 0.0;
      for (int64_t ic = 0; ic < ci; ++ic) {
        const double* iplane = xv.data() + (in * ci + ic) * h * wd;
        const double* kern = wv.data() + (oc * ci + ic) * 9;
        for (int64_t y = 0; y < h; ++y) {
          for (int64_t xx = 0; xx < wd; ++xx) {
            double acc = 0.0;
            for (int64_t ky = 0; ky < 3; ++ky) {
              const int64_t iy = y + ky - 1;
              if (iy < 0 || iy >= h) continue;
              for (int64_t kx = 0; kx < 3; ++kx) {
                const int64_t ix = xx + kx - 1;
                if (ix < 0 || ix >= wd) continue;
                acc += kern[ky * 3 + kx] * iplane[iy * wd + ix];
              }
            }
            oplane[y * wd + xx] += acc;
          }
        }
      }
      if (has_bias) {
        for (int64_t s = 0; s < h * wd; ++s) oplane[s] += bias_v;
      }
    }
  }

  NodePtr px = x.impl(), pw = w.impl(), pbias = bias.impl();
  std::vector<Tensor> inputs = {x, w};
  if (has_bias) inputs.push_back(bias);
  return make_node(
      "conv2d_3x3", {n, co, h, wd}, std::move(out), inputs,
      [px, pw, pbias, n, ci, co, h, wd, has_bias](Node& self) {
        const auto& g = self.grad;
        if (px->requires_grad) {
          std::vector<double> gx(px->values.size(), 0.0);
#pragma omp parallel for collapse(2) if (n * ci * h * wd > 4096)
          for (int64_t in = 0; in < n; ++in) {
            for (int64_t ic = 0; ic < ci; ++ic) {
              double* gplane = gx.data() + (in * ci + ic) * h * wd;
              for (int64_t oc = 0; oc < co; ++oc) {
                const double* gout = g.data() + (in * co + oc) * h * wd;
                const double* kern = pw->values.data() + (oc * ci + ic) * 9;
                for (int64_t iy = 0; iy < h; ++iy) {
                  for (int64_t ix = 0; ix < wd; ++ix) {
                    double acc = 0.0;
                    for (int64_t ky = 0; ky < 3; ++ky) {
                      const int64_t oy = iy - ky + 1;
                      if (oy < 0 || oy >= h) continue;
                      for (int64_t kx = 0; kx < 3; ++kx) {
                        const int64_t ox = ix - kx + 1;
                        if (ox < 0 || ox >= wd) continue;
                        acc += kern[ky * 3 + kx] * gout[oy * wd + ox];
                      }
                    }
                    gplane[iy * wd + ix] += acc;
                  }
                }
              }
            }
          }
          accumulate_grad(*px, gx);
        }
        if (pw->requires_grad) {
          std::vector<double> gw(pw->values.size(), 0.0);
#pragma omp parallel for collapse(2) if (co * ci * h * wd > 4096)
          for (int64_t oc = 0; oc < co; ++oc) {
            for (int64_t ic = 0; ic < ci; ++ic) {
              double* kern = gw.data() + (oc * ci + ic) * 9;
              for (int64_t in = 0; in < n; ++in) {
                const double* gout = g.data() + (in * co + oc) * h * wd;
                const double* iplane = px->values.data() + (in * ci + ic) * h * wd;
                for (int64_t ky = 0; ky < 3; ++ky) {
                  for (int64_t kx = 0; kx < 3; ++kx) {
                    double acc = 0.0;
                    for (int64_t y = 0; y < h; ++y) {
                      const int64_t iy = y + ky - 1;
                      if (iy < 0 || iy >= h) continue;
                      for (int64_t xx = 0; xx < wd; ++xx) {
                        const int64_t ix = xx + kx - 1;
                        if (ix < 0 || ix >= wd) continue;
                        acc += gout[y * wd + xx] * iplane[iy * wd + ix];
                      }
                    }
                    kern[ky * 3 + kx] += acc;
                  }
                }
              }
            }
          }
          accumulate_grad(*pw, gw);
        }
        if (has_bias && pbias->requires_grad) {
          std::vector<double> gb(static_cast<size_t>(co), 0.0);
          for (int64_t in = 0; in < n; ++in)
            for (int64_t oc = 0; oc < co; ++oc) {
              const double* gout = g.data() + (in * co + oc) * h * wd;
              for (int64_t s = 0; s < h * wd; ++s) gb[oc] += gout[s];
            }
          accumulate_grad(*pbias, gb);
        }
      });
}

Tensor mean_axis(const Tensor& x, std::vector<int64_t> axes) {
  ReduceMap m = reduce_map(x, axes, "mean_axis");
  auto xv = x.values();
  std::vector<double> out(static_cast<size_t>(shape_numel(m.out_shape)), 0.0);
  for (int64_t i = 0; i < x.numel(); ++i) out[map_index(m, i)] += xv[i];
  for (double& o : out) o /= static_cast<double>(m.group);
  NodePtr px = x.impl();
  return make_node("mean_axis", m.out_shape, std::move(out), {x}, [px, m](Node& self) {
    if (!px->requires_grad) return;
    std::vector<double> gx(px->values.size());
    const double inv = 1.0 / static_cast<double>(m.group);
    for (int64_t i = 0; i < static_cast<int64_t>(gx.size()); ++i)
      gx[i] = self.grad[map_index(m, i)] * inv;
    accumulate_grad(*px, gx);
  });
}

Tensor var_axis(const Tensor& x, std::vector<int64_t> axes) {
  ReduceMap m = reduce_map(x, axes, "var_axis");
  auto xv = x.values();
  const size_t out_n = static_cast<size_t>(shape_numel(m.out_shape));
  std::vector<double> mean(out_n, 0.0);
  for (int64_t i = 0; i < x.numel(); ++i) mean[map_index(m, i)] += xv[i];
  for (double& v : mean) v /= static_cast<double>(m.group);
  std::vector<double> out(out_n, 0.0);
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double d = xv[i] - mean[map_index(m, i)];
    out[map_index(m, i)] += d * d;
  }
  for (double& v : out) v /= static_cast<double>(m.group);
  NodePtr px = x.impl();
  return make_node("var_axis", m.out_shape, std::move(out), {x}, [px, m, mean](Node& self) {
    if (!px->requires_grad) return;
    std::vector<double> gx(px->values.size());
    const double scale = 2.0 / static_cast<double>(m.group);
    for (int64_t i = 0; i < static_cast<int64_t>(gx.size()); ++i) {
      const int64_t oi = map_index(m, i);
      gx[i] = self.grad[oi] * scale * (px->values[i] - mean[oi]);
    }
    accumulate_grad(*px, gx);
  });
}

Tensor softmax_ce(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.dim() != 2) {
    throw ShapeError("ShapeMismatch: softmax_ce logits must be [N,K], got " +
                     shape_str(logits.shape()));
  }
  const int64_t n = logits.shape()[0], k = logits.shape()[1];
  if (static_cast<int64_t>(labels.size()) != n) {
    throw ShapeError("ShapeMismatch: softmax_ce got " + std::to_string(labels.size()) +
                     " labels for batch " + std::to_string(n));
  }
  for (int y : labels) {
    if (y < 0 || y >= k) throw ShapeError("ShapeMismatch: softmax_ce label out of range");
  }
  std::vector<double> p = softmax_rows(logits.values(), n, k);
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    loss -= std::log(std::max(p[i * k + labels[static_cast<size_t>(i)]], 1e-300));
  }
  loss /= static_cast<double>(n);
  NodePtr pl = logits.impl();
  return make_node("softmax_ce", {1}, {loss}, {logits},
                   [pl, p = std::move(p), labels, n, k](Node& self) {
                     if (!pl->requires_grad) return;
                     const double g = self.grad[0] / static_cast<double>(n);
                     std::vector<double> gl(p.size());
                     for (int64_t i = 0; i < n; ++i)
                       for (int64_t j = 0; j < k; ++j) {
                         const double onehot = (j == labels[static_cast<size_t>(i)]) ? 1.0 : 0.0;
                         gl[i * k + j] = g * (p[i * k + j] - onehot);
                       }
                     accumulate_grad(*pl, gl);
                   });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  if (a.numel() == 0) throw ShapeError("ShapeMismatch: mse over an empty tensor");
  auto av = a.values(), bv = b.values();
  double loss = 0.0;
  for (size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    loss += d * d;
  }
  const double inv_n = 1.0 / static_cast<double>(a.numel());
  loss *= inv_n;
  NodePtr pa = a.impl(), pb = b.impl();
  return make_node("mse", {1}, {loss}, {a, b}, [pa, pb, inv_n](Node& self) {
    const double g = self.grad[0] * 2.0 * inv_n;
    if (pa->requires_grad) {
      std::vector<double> ga(pa->values.size());
      for (size_t i = 0; i < ga.size(); ++i) ga[i] = g * (pa->values[i] - pb->values[i]);
      accumulate_grad(*pa, ga);
    }
    if (pb->requires_grad) {
      std::vector<double> gb(pb->values.size());
      for (size_t i = 0; i < gb.size(); ++i) gb[i] = -g * (pa->values[i] - pb->values[i]);
      accumulate_grad(*pb, gb);
    }
  });
}

namespace {
struct RowView {
  int64_t rows, cols;
};
RowView row_view(const Tensor& x, const char* op) {
  if (x.dim() == 1) return {1, x.shape()[0]};
  if (x.dim() == 2) return {x.shape()[0], x.shape()[1]};
  throw ShapeError(std::string("ShapeMismatch: ") + op + " needs [N,D] or [D], got " +
                   shape_str(x.shape()));
}
}  // namespace

Tensor l2_normalize(const Tensor& x, double eps) {
  RowView rv = row_view(x, "l2_normalize");
  auto xv = x.values();
  std::vector<double> out(xv.size());
  std::vector<double> scales(static_cast<size_t>(rv.rows));
  std::vector<uint8_t> clamped(static_cast<size_t>(rv.rows));
  for (int64_t i = 0; i < rv.rows; ++i) {
    const double* row = xv.data() + i * rv.cols;
    double ss = 0.0;
    for (int64_t j = 0; j < rv.cols; ++j) ss += row[j] * row[j];
    const double norm = std::sqrt(ss);
    clamped[static_cast<size_t>(i)] = norm <= eps;
    const double s = std::max(norm, eps);
    scales[static_cast<size_t>(i)] = s;
    for (int64_t j = 0; j < rv.cols; ++j) out[i * rv.cols + j] = row[j] / s;
  }
  NodePtr px = x.impl();
  return make_node("l2_normalize", x.shape(), std::move(out), {x},
                   [px, rv, scales = std::move(scales), clamped = std::move(clamped)](Node& self) {
                     if (!px->requires_grad) return;
                     std::vector<double> gx(px->values.size());
                     for (int64_t i = 0; i < rv.rows; ++i) {
                       const double* y = self.values.data() + i * rv.cols;
                       const double* g = self.grad.data() + i * rv.cols;
                       const double s = scales[static_cast<size_t>(i)];
                       if (clamped[static_cast<size_t>(i)]) {
                         for (int64_t j = 0; j < rv.cols; ++j) gx[i * rv.cols + j] = g[j] / s;
                       } else {
                         double dot = 0.0;
                         for (int64_t j = 0; j < rv.cols; ++j) dot += y[j] * g[j];
                         for (int64_t j = 0; j < rv.cols; ++j)
                           gx[i * rv.cols + j] = (g[j] - y[j] * dot) / s;
                       }
                     }
                     accumulate_grad(*px, gx);
                   });
}

Tensor cosine_sim(const Tensor& a, const Tensor& b, double eps) {
  require_same_shape(a, b, "cosine_sim");
  RowView rv = row_view(a, "cosine_sim");
  auto av = a.values(), bv = b.values();
  std::vector<double> out(static_cast<size_t>(rv.rows));
  std::vector<double> sa(out.size()), sb(out.size());
  for (int64_t i = 0; i < rv.rows; ++i) {
    const double* ra = av.data() + i * rv.cols;
    const double* rb = bv.data() + i * rv.cols;
    double na = 0.0, nb = 0.0, dot = 0.0;
    for (int64_t j = 0; j < rv.cols; ++j) {
      na += ra[j] * ra[j];
      nb += rb[j] * rb[j];
      dot += ra[j] * rb[j];
    }
    sa[static_cast<size_t>(i)] = std::max(std::sqrt(na), eps);
    sb[static_cast<size_t>(i)] = std::max(std::sqrt(nb), eps);
    out[static_cast<size_t>(i)] = dot / (sa[static_cast<size_t>(i)] * sb[static_cast<size_t>(i)]);
  }
  NodePtr pa = a.impl(), pb = b.impl();
  return make_node("cosine_sim", {rv.rows}, std::move(out), {a, b},
                   [pa, pb, rv, sa = std::move(sa), sb = std::move(sb)](Node& self) {
                     for (int64_t i = 0; i < rv.rows; ++i) {
                       const double g = self.grad[static_cast<size_t>(i)];
                       const double c = self.values[static_cast<size_t>(i)];
                       const double na = sa[static_cast<size_t>(i)], nb = sb[static_cast<size_t>(i)];
                       const double* ra = pa->values.data() + i * rv.cols;
                       const double* rb = pb->values.data() + i * rv.cols;
                       if (pa->requires_grad) {
                         pa->ensure_grad();
                         for (int64_t j = 0; j < rv.cols; ++j)
                           pa->grad[i * rv.cols + j] +=
                               g * (rb[j] / (na * nb) - c * ra[j] / (na * na));
                       }
                       if (pb->requires_grad) {
                         pb->ensure_grad();
                         for (int64_t j = 0; j < rv.cols; ++j)
                           pb->grad[i * rv.cols + j] +=
                               g * (ra[j] / (na * nb) - c * rb[j] / (nb * nb));
                       }
                     }
                   });
}

Tensor softmax_entropy(const Tensor& logits) {
  if (logits.dim() != 2) {
    throw ShapeError("ShapeMismatch: softmax_entropy logits must be [N,K], got " +
                     shape_str(logits.shape()));
  }
  const int64_t n = logits.shape()[0], k = logits.shape()[1];
  std::vector<double> p = softmax_rows(logits.values(), n, k);
  std::vector<double> row_entropy(static_cast<size_t>(n), 0.0);
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double hi = 0.0;
    for (int64_t j = 0; j < k; ++j) {
      const double pj = p[i * k + j];
      if (pj > 0.0) hi -= pj * std::log(pj);
    }
    row_entropy[static_cast<size_t>(i)] = hi;
    total += hi;
  }
  total /= static_cast<double>(n);
  NodePtr pl = logits.impl();
  return make_node("softmax_entropy", {1}, {total}, {logits},
                   [pl, p = std::move(p), row_entropy = std::move(row_entropy), n, k](Node& self) {
                     if (!pl->requires_grad) return;
                     const double g = self.grad[0] / static_cast<double>(n);
                     std::vector<double> gl(p.size());
                     for (int64_t i = 0; i < n; ++i) {
                       const double hi = row_entropy[static_cast<size_t>(i)];
                       for (int64_t j = 0; j < k; ++j) {
                         const double pj = p[i * k + j];
                         const double logp = pj > 0.0 ? std::log(pj) : 0.0;
                         gl[i * k + j] = -g * pj * (logp + hi);
                       }
                     }
                     accumulate_grad(*pl, gl);
                   });
}

Tensor rotate90k(const Tensor& x, int k) {
  if (x.dim() != 4) {
    throw ShapeError("ShapeMismatch: rotate90k input must be [N,C,H,W], got " +
                     shape_str(x.shape()));
  }
  if (x.shape()[2] != x.shape()[3]) {
    throw ShapeError("NonSquare: rotate90k needs H == W, got " + shape_str(x.shape()));
  }
  const int kk = ((k % 4) + 4) % 4;
  const int64_t planes = x.shape()[0] * x.shape()[1];
  const int64_t h = x.shape()[2];
  std::vector<double> out = rotate_hw(x.values(), planes, h, kk);
  NodePtr px = x.impl();
  return make_node("rotate90k", x.shape(), std::move(out), {x}, [px, planes, h, kk](Node& self) {
    if (!px->requires_grad) return;
    std::vector<double> gx = rotate_hw(self.grad, planes, h, (4 - kk) % 4);
    accumulate_grad(*px, gx);
  });
}

Tensor concat(const std::vector<Tensor>& xs, int64_t axis) {
  if (xs.empty()) throw ShapeError("ShapeMismatch: concat of zero tensors");
  const int64_t rank = xs[0].dim();
  if (axis < 0 || axis >= rank) throw ShapeError("ShapeMismatch: concat axis out of range");
  Shape out_shape = xs[0].shape();
  int64_t axis_total = 0;
  for (const auto& t : xs) {
    if (t.dim() != rank) throw ShapeError("ShapeMismatch: concat rank mismatch");
    for (int64_t d = 0; d < rank; ++d) {
      if (d != axis && t.shape()[d] != out_shape[d]) {
        throw ShapeError("ShapeMismatch: concat dims differ off-axis: " + shape_str(t.shape()) +
                         " vs " + shape_str(out_shape));
      }
    }
    axis_total += t.shape()[axis];
  }
  out_shape[static_cast<size_t>(axis)] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
  for (int64_t d = axis + 1; d < rank; ++d) inner *= out_shape[static_cast<size_t>(d)];

  std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
  std::vector<int64_t> blocks;  // per-input contiguous block size within one outer slice
  blocks.reserve(xs.size());
  for (const auto& t : xs) blocks.push_back(t.shape()[axis] * inner);
  const int64_t out_slice = axis_total * inner;
  for (int64_t o = 0; o < outer; ++o) {
    int64_t off = 0;
    for (size_t ti = 0; ti < xs.size(); ++ti) {
      const auto src = xs[ti].values();
      std::memcpy(out.data() + o * out_slice + off, src.data() + o * blocks[ti],
                  static_cast<size_t>(blocks[ti]) * sizeof(double));
      off += blocks[ti];
    }
  }

  std::vector<NodePtr> parents;
  parents.reserve(xs.size());
  for (const auto& t : xs) parents.push_back(t.impl());
  return make_node("concat", out_shape, std::move(out), xs,
                   [parents, blocks, outer, out_slice](Node& self) {
                     for (int64_t o = 0; o < outer; ++o) {
                       int64_t off = 0;
                       for (size_t ti = 0; ti < parents.size(); ++ti) {
                         Node& p = *parents[ti];
                         if (p.requires_grad) {
                           p.ensure_grad();
                           for (int64_t i = 0; i < blocks[ti]; ++i)
                             p.grad[o * blocks[ti] + i] += self.grad[o * out_slice + off + i];
                         }
                         off += blocks[ti];
                       }
                     }
                   });
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw ShapeError("ShapeMismatch: reshape " + shape_str(x.shape()) + " -> " +
                     shape_str(new_shape));
  }
  auto xv = x.values();
  NodePtr px = x.impl();
  return make_node("reshape", std::move(new_shape), std::vector<double>(xv.begin(), xv.end()),
                   {x}, [px](Node& self) { accumulate_grad(*px, self.grad); });
}

}  // namespace mabn::ops
