#include "v2vbeam/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace v2vbeam {

namespace {

using detail::TapeNode;

// Ops below this many inner multiply-adds stay single-threaded.
constexpr long long kParThreshold = 1LL << 15;

Tensor make_result(std::vector<int> shape, std::vector<std::shared_ptr<TapeNode>> parents) {
  Tensor out = Tensor::zeros(std::move(shape));
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  out.node()->requires_grad = rg;
  if (rg) out.node()->parents = std::move(parents);
  return out;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = make_result(a.shape(), {a.shared_node(), b.shared_node()});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [n](TapeNode& self) {
      for (int side = 0; side < 2; ++side) {
        TapeNode* p = self.parents[side].get();
        if (!p->requires_grad) continue;
        p->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) p->grad[i] += self.grad[i];
      }
    };
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = make_result(a.shape(), {a.shared_node(), b.shared_node()});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [n](TapeNode& self) {
      TapeNode* pa = self.parents[0].get();
      TapeNode* pb = self.parents[1].get();
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) pb->grad[i] -= self.grad[i];
      }
    };
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = make_result(a.shape(), {a.shared_node(), b.shared_node()});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [n](TapeNode& self) {
      TapeNode* pa = self.parents[0].get();
      TapeNode* pb = self.parents[1].get();
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) pb->grad[i] += self.grad[i] * pa->value[i];
      }
    };
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = make_result(a.shape(), {a.shared_node()});
  const double* pa = a.data();
  double* po = out.data();
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  if (out.requires_grad()) {
    out.node()->backward_fn = [n, c](TapeNode& self) {
      TapeNode* p = self.parents[0].get();
      p->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) p->grad[i] += self.grad[i] * c;
    };
  }
  return out;
}

Tensor add_bias(const Tensor& m, const Tensor& v) {
  if (m.ndim() != 2 || v.numel() != m.dim(1)) {
    throw DimensionError("add_bias: matrix " + shape_to_string(m.shape()) + " vs bias " +
                         shape_to_string(v.shape()));
  }
  const int r = m.dim(0), c = m.dim(1);
  Tensor out = make_result(m.shape(), {m.shared_node(), v.shared_node()});
  const double* pm = m.data();
  const double* pv = v.data();
  double* po = out.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) po[static_cast<std::size_t>(i) * c + j] = pm[static_cast<std::size_t>(i) * c + j] + pv[j];
  if (out.requires_grad()) {
    out.node()->backward_fn = [r, c](TapeNode& self) {
      TapeNode* pm = self.parents[0].get();
      TapeNode* pv = self.parents[1].get();
      if (pm->requires_grad) {
        pm->ensure_grad();
        const std::size_t n = self.grad.size();
        for (std::size_t i = 0; i < n; ++i) pm->grad[i] += self.grad[i];
      }
      if (pv->requires_grad) {
        pv->ensure_grad();
        for (int j = 0; j < c; ++j) {
          double acc = 0.0;
          for (int i = 0; i < r; ++i) acc += self.grad[static_cast<std::size_t>(i) * c + j];
          pv->grad[j] += acc;
        }
      }
    };
  }
  return out;
}

Tensor row_scale(const Tensor& m, const Tensor& v) {
  if (m.ndim() != 2 || v.numel() != m.dim(0)) {
    throw DimensionError("row_scale: matrix " + shape_to_string(m.shape()) + " vs scales " +
                         shape_to_string(v.shape()));
  }
  const int r = m.dim(0), c = m.dim(1);
  Tensor out = make_result(m.shape(), {m.shared_node(), v.shared_node()});
  const double* pm = m.data();
  const double* pv = v.data();
  double* po = out.data();
  for (int i = 0; i < r; ++i) {
    const double s = pv[i];
    for (int j = 0; j < c; ++j) po[static_cast<std::size_t>(i) * c + j] = pm[static_cast<std::size_t>(i) * c + j] * s;
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [r, c](TapeNode& self) {
      TapeNode* pm = self.parents[0].get();
      TapeNode* pv = self.parents[1].get();
      if (pm->requires_grad) {
        pm->ensure_grad();
        for (int i = 0; i < r; ++i) {
          const double s = pv->value[i];
          for (int j = 0; j < c; ++j)
            pm->grad[static_cast<std::size_t>(i) * c + j] += self.grad[static_cast<std::size_t>(i) * c + j] * s;
        }
      }
      if (pv->requires_grad) {
        pv->ensure_grad();
        for (int i = 0; i < r; ++i) {
          double acc = 0.0;
          for (int j = 0; j < c; ++j)
            acc += self.grad[static_cast<std::size_t>(i) * c + j] * pm->value[static_cast<std::size_t>(i) * c + j];
          pv->grad[i] += acc;
        }
      }
    };
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = make_result({m, n}, {a.shared_node(), b.shared_node()});
  const double* A = a.data();
  const double* B = b.data();
  double* C = out.data();
  const bool par = static_cast<long long>(m) * n * k > kParThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (int i = 0; i < m; ++i) {
    double* crow = C + static_cast<std::size_t>(i) * n;
    const double* arow = A + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double aip = arow[p];
      const double* brow = B + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [m, k, n, par](TapeNode& self) {
      TapeNode* an = self.parents[0].get();
      TapeNode* bn = self.parents[1].get();
      const double* G = self.grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        double* dA = an->grad.data();
        const double* B = bn->value.data();
#pragma omp parallel for schedule(static) if (par)
        for (int i = 0; i < m; ++i) {
          const double* grow = G + static_cast<std::size_t>(i) * n;
          double* darow = dA + static_cast<std::size_t>(i) * k;
          for (int p = 0; p < k; ++p) {
            const double* brow = B + static_cast<std::size_t>(p) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            darow[p] += acc;
          }
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        double* dB = bn->grad.data();
        const double* A = an->value.data();
#pragma omp parallel for schedule(static) if (par)
        for (int p = 0; p < k; ++p) {
          double* dbrow = dB + static_cast<std::size_t>(p) * n;
          for (int i = 0; i < m; ++i) {
            const double aip = A[static_cast<std::size_t>(i) * k + p];
            const double* grow = G + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) dbrow[j] += aip * grow[j];
          }
        }
      }
    };
  }
  return out;
}

Tensor transpose(const Tensor& m) {
  if (m.ndim() != 2) {
    throw DimensionError("transpose expects a 2-D tensor, got " + shape_to_string(m.shape()));
  }
  const int r = m.dim(0), c = m.dim(1);
  Tensor out = make_result({c, r}, {m.shared_node()});
  const double* pm = m.data();
  double* po = out.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) po[static_cast<std::size_t>(j) * r + i] = pm[static_cast<std::size_t>(i) * c + j];
  if (out.requires_grad()) {
    out.node()->backward_fn = [r, c](TapeNode& self) {
      TapeNode* p = self.parents[0].get();
      p->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          p->grad[static_cast<std::size_t>(i) * c + j] += self.grad[static_cast<std::size_t>(j) * r + i];
    };
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = make_result(x.shape(), {x.shared_node()});
  const double* px = x.data();
  double* po = out.data();
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;
  if (out.requires_grad()) {
    // Subgradient at exactly 0 is 0.
    out.node()->backward_fn = [n](TapeNode& self) {
      TapeNode* p = self.parents[0].get();
      p->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        if (p->value[i] > 0.0) p->grad[i] += self.grad[i];
    };
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = make_result(x.shape(), {x.shared_node()});
  const double* px = x.data();
  double* po = out.data();
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = 1.0 / (1.0 + std::exp(-px[i]));
  if (out.requires_grad()) {
    out.node()->backward_fn = [n](TapeNode& self) {
      TapeNode* p = self.parents[0].get();
      p->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const double y = self.value[i];
        p->grad[i] += self.grad[i] * y * (1.0 - y);
      }
    };
  }
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.ndim()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_to_string(x.shape()));
  }
  const auto& sh = x.shape();
  const int len = sh[axis];
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(sh[i]);
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= static_cast<std::size_t>(sh[i]);

  Tensor out = make_result(sh, {x.shared_node()});
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -HUGE_VAL;
      for (int t = 0; t < len; ++t) {
        const double v = px[base + static_cast<std::size_t>(t) * inner];
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
        mx = std::max(mx, v);
      }
      double denom = 0.0;
      for (int t = 0; t < len; ++t) {
        const double e = std::exp(px[base + static_cast<std::size_t>(t) * inner] - mx);
        po[base + static_cast<std::size_t>(t) * inner] = e;
        denom += e;
      }
      for (int t = 0; t < len; ++t) po[base + static_cast<std::size_t>(t) * inner] /= denom;
    }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [outer, inner, len](TapeNode& self) {
      TapeNode* p = self.parents[0].get();
      p->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (int t = 0; t < len; ++t) {
            const std::size_t idx = base + static_cast<std::size_t>(t) * inner;
            dot += self.grad[idx] * self.value[idx];
          }
          for (int t = 0; t < len; ++t) {
            const std::size_t idx = base + static_cast<std::size_t>(t) * inner;
            p->grad[idx] += self.value[idx] * (self.grad[idx] - dot);
          }
        }
      }
    };
  }
  return out;
}

namespace {

// Shared core for layer_norm (affine indexed within the line) and
// channel_norm (affine indexed by line). Lines are contiguous runs of `len`.
Tensor norm_lines(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps,
                  std::size_t lines, std::size_t len, bool affine_per_position,
                  const char* op) {
  const std::size_t affine_len = affine_per_position ? len : lines;
  if (static_cast<std::size_t>(gain.numel()) != affine_len ||
      static_cast<std::size_t>(bias.numel()) != affine_len) {
    throw DimensionError(std::string(op) + ": gain/bias " + shape_to_string(gain.shape()) +
                         "/" + shape_to_string(bias.shape()) + " do not match extent " +
                         std::to_string(affine_len));
  }
  Tensor out = make_result(x.shape(), {x.shared_node(), gain.shared_node(), bias.shared_node()});
  const double* px = x.data();
  const double* pg = gain.data();
  const double* pb = bias.data();
  double* po = out.data();
  auto stats = std::make_shared<std::vector<double>>(lines * 2);  // (mean, inv_std) per line
  for (std::size_t l = 0; l < lines; ++l) {
    const double* row = px + l * len;
    double mean = 0.0;
    for (std::size_t j = 0; j < len; ++j) mean += row[j];
    mean /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(len);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*stats)[2 * l] = mean;
    (*stats)[2 * l + 1] = inv;
    double* orow = po + l * len;
    for (std::size_t j = 0; j < len; ++j) {
      const double xn = (row[j] - mean) * inv;
      const std::size_t ai = affine_per_position ? j : l;
      orow[j] = pg[ai] * xn + pb[ai];
    }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [lines, len, affine_per_position, stats](TapeNode& self) {
      TapeNode* xn = self.parents[0].get();
      TapeNode* gn = self.parents[1].get();
      TapeNode* bn = self.parents[2].get();
      if (xn->requires_grad) xn->ensure_grad();
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (std::size_t l = 0; l < lines; ++l) {
        const double mean = (*stats)[2 * l];
        const double inv = (*stats)[2 * l + 1];
        const double* row = xn->value.data() + l * len;
        const double* grow = self.grad.data() + l * len;
        // dxhat, plus its mean and its xhat-weighted mean over the line
        double m_dxhat = 0.0, m_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t ai = affine_per_position ? j : l;
          const double xhat = (row[j] - mean) * inv;
          const double dxhat = grow[j] * gn->value[ai];
          m_dxhat += dxhat;
          m_dxhat_xhat += dxhat * xhat;
          if (gn->requires_grad) gn->grad[ai] += grow[j] * xhat;
          if (bn->requires_grad) bn->grad[ai] += grow[j];
        }
        if (!xn->requires_grad) continue;
        m_dxhat /= static_cast<double>(len);
        m_dxhat_xhat /= static_cast<double>(len);
        double* dxrow = xn->grad.data() + l * len;
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t ai = affine_per_position ? j : l;
          const double xhat = (row[j] - mean) * inv;
          const double dxhat = grow[j] * gn->value[ai];
          dxrow[j] += inv * (dxhat - m_dxhat - xhat * m_dxhat_xhat);
        }
      }
    };
  }
  return out;
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.ndim() < 1) throw DimensionError("layer_norm: empty shape");
  const std::size_t len = static_cast<std::size_t>(x.shape().back());
  const std::size_t lines = x.numel() / len;
  return norm_lines(x, gain, bias, eps, lines, len, /*affine_per_position=*/true, "layer_norm");
}

Tensor channel_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.ndim() < 2) throw DimensionError("channel_norm: need at least 2 axes");
  const std::size_t lines = static_cast<std::size_t>(x.dim(0));
  const std::size_t len = x.numel() / lines;
  return norm_lines(x, gain, bias, eps, lines, len, /*affine_per_position=*/false,
                    "channel_norm");
}

Tensor concat(const std::vector<Tensor>& tensors, int axis) {
  if (tensors.empty()) throw DimensionError("concat: no inputs");
  const int nd = tensors[0].ndim();
  if (axis < 0 || axis >= nd) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_to_string(tensors[0].shape()));
  }
  std::vector<int> out_shape = tensors[0].shape();
  for (std::size_t t = 1; t < tensors.size(); ++t) {
    const auto& sh = tensors[t].shape();
    if (static_cast<int>(sh.size()) != nd) {
      throw DimensionError("concat: rank mismatch " + shape_to_string(sh) + " vs " +
                           shape_to_string(out_shape));
    }
    for (int i = 0; i < nd; ++i) {
      if (i != axis && sh[i] != out_shape[i]) {
        throw DimensionError("concat: incompatible shapes " + shape_to_string(sh) + " vs " +
                             shape_to_string(tensors[0].shape()));
      }
    }
    out_shape[axis] += sh[axis];
  }

  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(out_shape[i]);
  for (int i = axis + 1; i < nd; ++i) inner *= static_cast<std::size_t>(out_shape[i]);

  std::vector<std::shared_ptr<TapeNode>> parents;
  parents.reserve(tensors.size());
  std::vector<int> extents;
  for (const auto& t : tensors) {
    parents.push_back(t.shared_node());
    extents.push_back(t.shape()[axis]);
  }
  Tensor out = make_result(out_shape, std::move(parents));
  double* po = out.data();
  const std::size_t out_axis = static_cast<std::size_t>(out_shape[axis]);
  std::size_t offset = 0;
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    const double* px = tensors[t].data();
    const std::size_t ext = static_cast<std::size_t>(extents[t]);
    for (std::size_t o = 0; o < outer; ++o) {
      const double* src = px + o * ext * inner;
      double* dst = po + (o * out_axis + offset) * inner;
      std::copy(src, src + ext * inner, dst);
    }
    offset += ext;
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [outer, inner, out_axis, extents](TapeNode& self) {
      std::size_t offset = 0;
      for (std::size_t t = 0; t < self.parents.size(); ++t) {
        TapeNode* p = self.parents[t].get();
        const std::size_t ext = static_cast<std::size_t>(extents[t]);
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = self.grad.data() + (o * out_axis + offset) * inner;
            double* dst = p->grad.data() + o * ext * inner;
            for (std::size_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
          }
        }
        offset += ext;
      }
    };
  }
  return out;
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  if (axis < 0 || axis >= x.ndim()) {
    throw DimensionError("slice: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_to_string(x.shape()));
  }
  const auto& sh = x.shape();
  if (start < 0 || len <= 0 || start + len > sh[axis]) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") exceeds axis extent " +
                         std::to_string(sh[axis]));
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(sh[i]);
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= static_cast<std::size_t>(sh[i]);
  std::vector<int> out_shape = sh;
  out_shape[axis] = len;
  Tensor out = make_result(out_shape, {x.shared_node()});
  const double* px = x.data();
  double* po = out.data();
  const std::size_t ax = static_cast<std::size_t>(sh[axis]);
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = px + (o * ax + start) * inner;
    std::copy(src, src + static_cast<std::size_t>(len) * inner,
              po + o * static_cast<std::size_t>(len) * inner);
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [outer, inner, ax, start, len](TapeNode& self) {
      TapeNode* p = self.parents[0].get();
      p->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        const double* src = self.grad.data() + o * static_cast<std::size_t>(len) * inner;
        double* dst = p->grad.data() + (o * ax + start) * inner;
        for (std::size_t i = 0; i < static_cast<std::size_t>(len) * inner; ++i) dst[i] += src[i];
      }
    };
  }
  return out;
}

Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<std::int64_t>> index_map,
              std::vector<int> out_shape) {
  Tensor out = make_result(std::move(out_shape), {x.shared_node()});
  if (index_map->size() != static_cast<std::size_t>(out.numel())) {
    throw DimensionError("gather: index map size " + std::to_string(index_map->size()) +
                         " does not match output " + shape_to_string(out.shape()));
  }
  const double* px = x.data();
  double* po = out.data();
  const std::size_t n = index_map->size();
  const std::size_t xn = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t src = (*index_map)[i];
    if (src < 0 || static_cast<std::size_t>(src) >= xn) {
      throw DimensionError("gather: index out of range");
    }
    po[i] = px[src];
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [index_map, n](TapeNode& self) {
      TapeNode* p = self.parents[0].get();
      p->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) p->grad[(*index_map)[i]] += self.grad[i];
    };
  }
  return out;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  Tensor out = make_result(std::move(shape), {x.shared_node()});
  if (out.numel() != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                         shape_to_string(out.shape()));
  }
  std::copy(x.data(), x.data() + x.numel(), out.data());
  if (out.requires_grad()) {
    out.node()->backward_fn = [](TapeNode& self) {
      TapeNode* p = self.parents[0].get();
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    };
  }
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = make_result({1}, {x.shared_node()});
  const double* px = x.data();
  double acc = 0.0;
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) acc += px[i];
  out.data()[0] = acc;
  if (out.requires_grad()) {
    out.node()->backward_fn = [n](TapeNode& self) {
      TapeNode* p = self.parents[0].get();
      p->ensure_grad();
      const double g = self.grad[0];
      for (std::size_t i = 0; i < n; ++i) p->grad[i] += g;
    };
  }
  return out;
}

Tensor mean_axis(const Tensor& m, int axis) {
  if (m.ndim() != 2 || (axis != 0 && axis != 1)) {
    throw DimensionError("mean_axis: expects 2-D tensor and axis 0/1, got " +
                         shape_to_string(m.shape()));
  }
  const int r = m.dim(0), c = m.dim(1);
  const int out_len = axis == 0 ? c : r;
  Tensor out = make_result({out_len}, {m.shared_node()});
  const double* pm = m.data();
  double* po = out.data();
  if (axis == 0) {
    for (int j = 0; j < c; ++j) {
      double acc = 0.0;
      for (int i = 0; i < r; ++i) acc += pm[static_cast<std::size_t>(i) * c + j];
      po[j] = acc / r;
    }
  } else {
    for (int i = 0; i < r; ++i) {
      double acc = 0.0;
      for (int j = 0; j < c; ++j) acc += pm[static_cast<std::size_t>(i) * c + j];
      po[i] = acc / c;
    }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [r, c, axis](TapeNode& self) {
      TapeNode* p = self.parents[0].get();
      p->ensure_grad();
      if (axis == 0) {
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j)
            p->grad[static_cast<std::size_t>(i) * c + j] += self.grad[j] / r;
      } else {
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j)
            p->grad[static_cast<std::size_t>(i) * c + j] += self.grad[i] / c;
      }
    };
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2) {
    throw DimensionError("cross_entropy: logits must be [batch x K], got " +
                         shape_to_string(logits.shape()));
  }
  const int batch = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != batch) {
    throw ValidationError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                          std::to_string(batch));
  }
  for (int i = 0; i < batch; ++i) {
    if (labels[i] < 0 || labels[i] >= k) {
      throw ValidationError("cross_entropy: label " + std::to_string(labels[i]) + " at row " +
                            std::to_string(i) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  Tensor out = make_result({1}, {logits.shared_node()});
  const double* px = logits.data();
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(batch) * k);
  double loss = 0.0;
  for (int i = 0; i < batch; ++i) {
    const double* row = px + static_cast<std::size_t>(i) * k;
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
    const double lse = mx + std::log(denom);
    loss += lse - row[labels[i]];
    double* prow = probs->data() + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < k; ++j) prow[j] = std::exp(row[j] - lse);
  }
  out.data()[0] = loss / batch;
  if (out.requires_grad()) {
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    out.node()->backward_fn = [batch, k, probs, labels_copy](TapeNode& self) {
      TapeNode* p = self.parents[0].get();
      p->ensure_grad();
      const double g = self.grad[0] / batch;
      for (int i = 0; i < batch; ++i) {
        const double* prow = probs->data() + static_cast<std::size_t>(i) * k;
        double* drow = p->grad.data() + static_cast<std::size_t>(i) * k;
        const int y = (*labels_copy)[i];
        for (int j = 0; j < k; ++j) drow[j] += g * (prow[j] - (j == y ? 1.0 : 0.0));
      }
    };
  }
  return out;
}

namespace {

struct ConvDims {
  int c_in, h, w, c_out, k, pad, oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b, int stride, bool depthwise) {
  if (x.ndim() != 3) throw DimensionError("conv2d: input must be [C,H,W], got " + shape_to_string(x.shape()));
  if (stride != 1 && stride != 2) throw DimensionError("conv2d: stride must be 1 or 2");
  ConvDims d{};
  d.c_in = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  if (depthwise) {
    if (w.ndim() != 3 || w.dim(0) != d.c_in || w.dim(1) != w.dim(2)) {
      throw DimensionError("depthwise_conv2d: weights " + shape_to_string(w.shape()) +
                           " incompatible with input " + shape_to_string(x.shape()));
    }
    d.c_out = d.c_in;
    d.k = w.dim(1);
  } else {
    if (w.ndim() != 4 || w.dim(1) != d.c_in || w.dim(2) != w.dim(3)) {
      throw DimensionError("conv2d: weights " + shape_to_string(w.shape()) +
                           " incompatible with input " + shape_to_string(x.shape()));
    }
    d.c_out = w.dim(0);
    d.k = w.dim(2);
  }
  if (d.k % 2 == 0) throw DimensionError("conv2d: kernel size must be odd");
  if (b.numel() != d.c_out) {
    throw DimensionError("conv2d: bias " + shape_to_string(b.shape()) + " vs " +
                         std::to_string(d.c_out) + " output channels");
  }
  d.pad = d.k / 2;
  d.oh = (d.h + 2 * d.pad - d.k) / stride + 1;
  d.ow = (d.w + 2 * d.pad - d.k) / stride + 1;
  return d;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  const ConvDims d = conv_dims(x, w, b, stride, /*depthwise=*/false);
  Tensor out = make_result({d.c_out, d.oh, d.ow},
                           {x.shared_node(), w.shared_node(), b.shared_node()});
  const double* px = x.data();
  const double* pw = w.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::size_t in_plane = static_cast<std::size_t>(d.h) * d.w;
  const std::size_t out_plane = static_cast<std::size_t>(d.oh) * d.ow;
  const std::size_t ker = static_cast<std::size_t>(d.k) * d.k;
  const bool par = static_cast<long long>(d.c_out) * out_plane * d.c_in * ker > kParThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (int co = 0; co < d.c_out; ++co) {
    double* oplane = po + co * out_plane;
    const double* wbase = pw + static_cast<std::size_t>(co) * d.c_in * ker;
    for (int oy = 0; oy < d.oh; ++oy) {
      for (int ox = 0; ox < d.ow; ++ox) {
        double acc = pb[co];
        for (int ci = 0; ci < d.c_in; ++ci) {
          const double* iplane = px + ci * in_plane;
          const double* wk = wbase + ci * ker;
          for (int ky = 0; ky < d.k; ++ky) {
            const int iy = oy * stride + ky - d.pad;
            if (iy < 0 || iy >= d.h) continue;
            for (int kx = 0; kx < d.k; ++kx) {
              const int ix = ox * stride + kx - d.pad;
              if (ix < 0 || ix >= d.w) continue;
              acc += wk[ky * d.k + kx] * iplane[static_cast<std::size_t>(iy) * d.w + ix];
            }
          }
        }
        oplane[static_cast<std::size_t>(oy) * d.ow + ox] = acc;
      }
    }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [d, stride, in_plane, out_plane, ker, par](TapeNode& self) {
      TapeNode* xn = self.parents[0].get();
      TapeNode* wn = self.parents[1].get();
      TapeNode* bn = self.parents[2].get();
      const double* G = self.grad.data();
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int co = 0; co < d.c_out; ++co) {
          double acc = 0.0;
          const double* gplane = G + co * out_plane;
          for (std::size_t i = 0; i < out_plane; ++i) acc += gplane[i];
          bn->grad[co] += acc;
        }
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        const double* px = xn->value.data();
#pragma omp parallel for schedule(static) if (par)
        for (int co = 0; co < d.c_out; ++co) {
          const double* gplane = G + co * out_plane;
          double* wbase = wn->grad.data() + static_cast<std::size_t>(co) * d.c_in * ker;
          for (int ci = 0; ci < d.c_in; ++ci) {
            const double* iplane = px + ci * in_plane;
            double* wk = wbase + ci * ker;
            for (int ky = 0; ky < d.k; ++ky) {
              for (int kx = 0; kx < d.k; ++kx) {
                double acc = 0.0;
                for (int oy = 0; oy < d.oh; ++oy) {
                  const int iy = oy * stride + ky - d.pad;
                  if (iy < 0 || iy >= d.h) continue;
                  for (int ox = 0; ox < d.ow; ++ox) {
                    const int ix = ox * stride + kx - d.pad;
                    if (ix < 0 || ix >= d.w) continue;
                    acc += gplane[static_cast<std::size_t>(oy) * d.ow + ox] *
                           iplane[static_cast<std::size_t>(iy) * d.w + ix];
                  }
                }
                wk[ky * d.k + kx] += acc;
              }
            }
          }
        }
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        const double* pw = wn->value.data();
#pragma omp parallel for schedule(static) if (par)
        for (int ci = 0; ci < d.c_in; ++ci) {
          double* dplane = xn->grad.data() + ci * in_plane;
          for (int co = 0; co < d.c_out; ++co) {
            const double* gplane = G + co * out_plane;
            const double* wk = pw + (static_cast<std::size_t>(co) * d.c_in + ci) * ker;
            for (int oy = 0; oy < d.oh; ++oy) {
              for (int ox = 0; ox < d.ow; ++ox) {
                const double g = gplane[static_cast<std::size_t>(oy) * d.ow + ox];
                for (int ky = 0; ky < d.k; ++ky) {
                  const int iy = oy * stride + ky - d.pad;
                  if (iy < 0 || iy >= d.h) continue;
                  for (int kx = 0; kx < d.k; ++kx) {
                    const int ix = ox * stride + kx - d.pad;
                    if (ix < 0 || ix >= d.w) continue;
                    dplane[static_cast<std::size_t>(iy) * d.w + ix] += g * wk[ky * d.k + kx];
                  }
                }
              }
            }
          }
        }
      }
    };
  }
  return out;
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  const ConvDims d = conv_dims(x, w, b, stride, /*depthwise=*/true);
  Tensor out = make_result({d.c_out, d.oh, d.ow},
                           {x.shared_node(), w.shared_node(), b.shared_node()});
  const double* px = x.data();
  const double* pw = w.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::size_t in_plane = static_cast<std::size_t>(d.h) * d.w;
  const std::size_t out_plane = static_cast<std::size_t>(d.oh) * d.ow;
  const std::size_t ker = static_cast<std::size_t>(d.k) * d.k;
  const bool par = static_cast<long long>(d.c_out) * out_plane * ker > kParThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (int c = 0; c < d.c_out; ++c) {
    const double* iplane = px + c * in_plane;
    const double* wk = pw + c * ker;
    double* oplane = po + c * out_plane;
    for (int oy = 0; oy < d.oh; ++oy) {
      for (int ox = 0; ox < d.ow; ++ox) {
        double acc = pb[c];
        for (int ky = 0; ky < d.k; ++ky) {
          const int iy = oy * stride + ky - d.pad;
          if (iy < 0 || iy >= d.h) continue;
          for (int kx = 0; kx < d.k; ++kx) {
            const int ix = ox * stride + kx - d.pad;
            if (ix < 0 || ix >= d.w) continue;
            acc += wk[ky * d.k + kx] * iplane[static_cast<std::size_t>(iy) * d.w + ix];
          }
        }
        oplane[static_cast<std::size_t>(oy) * d.ow + ox] = acc;
      }
    }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [d, stride, in_plane, out_plane, ker, par](TapeNode& self) {
      TapeNode* xn = self.parents[0].get();
      TapeNode* wn = self.parents[1].get();
      TapeNode* bn = self.parents[2].get();
      const double* G = self.grad.data();
      if (bn->requires_grad) bn->ensure_grad();
      if (wn->requires_grad) wn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
#pragma omp parallel for schedule(static) if (par)
      for (int c = 0; c < d.c_out; ++c) {
        const double* gplane = G + c * out_plane;
        const double* iplane = xn->value.data() + c * in_plane;
        const double* wk = wn->value.data() + c * ker;
        if (bn->requires_grad) {
          double acc = 0.0;
          for (std::size_t i = 0; i < out_plane; ++i) acc += gplane[i];
          bn->grad[c] += acc;
        }
        for (int oy = 0; oy < d.oh; ++oy) {
          for (int ox = 0; ox < d.ow; ++ox) {
            const double g = gplane[static_cast<std::size_t>(oy) * d.ow + ox];
            for (int ky = 0; ky < d.k; ++ky) {
              const int iy = oy * stride + ky - d.pad;
              if (iy < 0 || iy >= d.h) continue;
              for (int kx = 0; kx < d.k; ++kx) {
                const int ix = ox * stride + kx - d.pad;
                if (ix < 0 || ix >= d.w) continue;
                if (wn->requires_grad)
                  wn->grad[c * ker + ky * d.k + kx] +=
                      g * iplane[static_cast<std::size_t>(iy) * d.w + ix];
                if (xn->requires_grad)
                  xn->grad[c * in_plane + static_cast<std::size_t>(iy) * d.w + ix] +=
                      g * wk[ky * d.k + kx];
              }
            }
          }
        }
      }
    };
  }
  return out;
}

Tensor channel_scale(const Tensor& x, const Tensor& gate) {
  if (x.ndim() < 1 || gate.numel() != x.dim(0)) {
    throw DimensionError("channel_scale: input " + shape_to_string(x.shape()) + " vs gate " +
                         shape_to_string(gate.shape()));
  }
  const int channels = x.dim(0);
  const std::size_t plane = x.numel() / channels;
  Tensor out = make_result(x.shape(), {x.shared_node(), gate.shared_node()});
  const double* px = x.data();
  const double* pg = gate.data();
  double* po = out.data();
  for (int c = 0; c < channels; ++c) {
    const double g = pg[c];
    for (std::size_t i = 0; i < plane; ++i) po[c * plane + i] = px[c * plane + i] * g;
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [channels, plane](TapeNode& self) {
      TapeNode* xn = self.parents[0].get();
      TapeNode* gn = self.parents[1].get();
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (int c = 0; c < channels; ++c) {
          const double g = gn->value[c];
          for (std::size_t i = 0; i < plane; ++i)
            xn->grad[c * plane + i] += self.grad[c * plane + i] * g;
        }
      }
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (int c = 0; c < channels; ++c) {
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i)
            acc += self.grad[c * plane + i] * xn->value[c * plane + i];
          gn->grad[c] += acc;
        }
      }
    };
  }
  return out;
}

}  // namespace v2vbeam
