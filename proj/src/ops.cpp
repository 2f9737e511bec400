#include "mambatrack/ops.hpp"

#include <algorithm>
#include <stdexcept>

namespace mambatrack {
namespace ops {

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

bool maybe_record(Tensor& out, std::initializer_list<const Tensor*> ins,
                  std::function<void()> fn) {
  if (!detail::tracing(ins)) return false;
  out.set_requires_grad(true);
  Graph::active()->add_node(std::move(fn));
  return true;
}

// Shared backward shape for the elementwise binary family.
template <typename FwdFn, typename BwdFn>
Tensor binary_elementwise(const char* name, const Tensor& a, const Tensor& b,
                          FwdFn fwd, BwdFn bwd) {
  check_same_shape(name, a, b);
  Tensor out = Tensor::zeros(a.shape());
  const int64_t n = a.numel();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  Tensor ca = a, cb = b, co = out;
  maybe_record(out, {&a, &b}, [ca, cb, co, bwd, n]() mutable {
    const double* go = co.grad_ptr();
    if (!go) return;
    const double* pa = ca.data();
    const double* pb = cb.data();
    double* ga = ca.requires_grad() ? ca.grad() : nullptr;
    double* gb = cb.requires_grad() ? cb.grad() : nullptr;
    for (int64_t i = 0; i < n; ++i) {
      double da, db;
      bwd(pa[i], pb[i], go[i], da, db);
      if (ga) ga[i] += da;
      if (gb) gb[i] += db;
    }
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) { da = g; db = g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) { da = g; db = -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) { da = g * y; db = g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y, double g, double& da, double& db) {
        da = x <= y ? g : 0.0;
        db = x <= y ? 0.0 : g;
      });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y, double g, double& da, double& db) {
        da = x >= y ? g : 0.0;
        db = x >= y ? 0.0 : g;
      });
}

Tensor abs(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = std::fabs(x.data()[i]);
  Tensor cx = x, co = out;
  maybe_record(out, {&x}, [cx, co, n]() mutable {
    const double* go = co.grad_ptr();
    if (!go || !cx.requires_grad()) return;
    double* gx = cx.grad();
    const double* px = cx.data();
    for (int64_t i = 0; i < n; ++i)
      gx[i] += go[i] * (px[i] > 0 ? 1.0 : (px[i] < 0 ? -1.0 : 0.0));
  });
  return out;
}

Tensor scale(const Tensor& x, double c) {
  Tensor out = Tensor::zeros(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * c;
  Tensor cx = x, co = out;
  maybe_record(out, {&x}, [cx, co, c, n]() mutable {
    const double* go = co.grad_ptr();
    if (!go || !cx.requires_grad()) return;
    double* gx = cx.grad();
    for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * c;
  });
  return out;
}

Tensor add_const(const Tensor& x, double c) {
  Tensor out = Tensor::zeros(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] + c;
  Tensor cx = x, co = out;
  maybe_record(out, {&x}, [cx, co, n]() mutable {
    const double* go = co.grad_ptr();
    if (!go || !cx.requires_grad()) return;
    double* gx = cx.grad();
    for (int64_t i = 0; i < n; ++i) gx[i] += go[i];
  });
  return out;
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1)
    throw std::invalid_argument("scale_by: scale must be 1-element, got " + s.shape_str());
  Tensor out = Tensor::zeros(x.shape());
  const int64_t n = x.numel();
  const double sv = s.data()[0];
  for (int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * sv;
  Tensor cx = x, cs = s, co = out;
  maybe_record(out, {&x, &s}, [cx, cs, co, n]() mutable {
    const double* go = co.grad_ptr();
    if (!go) return;
    const double sv = cs.data()[0];
    if (cx.requires_grad()) {
      double* gx = cx.grad();
      for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * sv;
    }
    if (cs.requires_grad()) {
      double acc = 0.0;
      const double* px = cx.data();
      for (int64_t i = 0; i < n; ++i) acc += go[i] * px[i];
      cs.grad()[0] += acc;
    }
  });
  return out;
}

Tensor activation(const Tensor& x, Act kind) {
  Tensor out = Tensor::zeros(x.shape());
  const int64_t n = x.numel();
  const double* px = x.data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = scalar::act(px[i], kind);
  Tensor cx = x, co = out;
  maybe_record(out, {&x}, [cx, co, kind, n]() mutable {
    const double* go = co.grad_ptr();
    if (!go || !cx.requires_grad()) return;
    double* gx = cx.grad();
    const double* px = cx.data();
    for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * scalar::act_grad(px[i], kind);
  });
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += x.data()[i];
  Tensor out = Tensor::scalar(acc);
  Tensor cx = x, co = out;
  maybe_record(out, {&x}, [cx, co, n]() mutable {
    const double* go = co.grad_ptr();
    if (!go || !cx.requires_grad()) return;
    double* gx = cx.grad();
    for (int64_t i = 0; i < n; ++i) gx[i] += go[0];
  });
  return out;
}

Tensor mean(const Tensor& x) {
  const int64_t n = x.numel();
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += x.data()[i];
  Tensor out = Tensor::scalar(acc / static_cast<double>(n));
  Tensor cx = x, co = out;
  maybe_record(out, {&x}, [cx, co, n]() mutable {
    const double* go = co.grad_ptr();
    if (!go || !cx.requires_grad()) return;
    double* gx = cx.grad();
    const double inv = 1.0 / static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i) gx[i] += go[0] * inv;
  });
  return out;
}

Tensor mean_rows(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("mean_rows: expected [L,D], got " + x.shape_str());
  const int64_t L = x.dim(0), D = x.dim(1);
  if (L == 0) throw std::invalid_argument("mean_rows: empty");
  Tensor out = Tensor::zeros({D});
  const double inv = 1.0 / static_cast<double>(L);
  for (int64_t l = 0; l < L; ++l)
    for (int64_t d = 0; d < D; ++d) out.data()[d] += x.data()[l * D + d] * inv;
  Tensor cx = x, co = out;
  maybe_record(out, {&x}, [cx, co, L, D, inv]() mutable {
    const double* go = co.grad_ptr();
    if (!go || !cx.requires_grad()) return;
    double* gx = cx.grad();
    for (int64_t l = 0; l < L; ++l)
      for (int64_t d = 0; d < D; ++d) gx[l * D + d] += go[d] * inv;
  });
  return out;
}

Tensor l2_norm(const Tensor& x) {
  double acc = 0.0;
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += x.data()[i] * x.data()[i];
  const double nrm = std::sqrt(acc);
  Tensor out = Tensor::scalar(nrm);
  Tensor cx = x, co = out;
  maybe_record(out, {&x}, [cx, co, n, nrm]() mutable {
    const double* go = co.grad_ptr();
    if (!go || !cx.requires_grad() || nrm == 0.0) return;
    double* gx = cx.grad();
    const double* px = cx.data();
    for (int64_t i = 0; i < n; ++i) gx[i] += go[0] * px[i] / nrm;
  });
  return out;
}

Tensor reshape(const Tensor& x, std::vector<int64_t> shape) {
  Tensor out = Tensor::from_data(std::move(shape), std::vector<double>(x.data(), x.data() + x.numel()));
  if (out.numel() != x.numel())
    throw std::invalid_argument("reshape: numel mismatch " + x.shape_str() + " -> " + out.shape_str());
  const int64_t n = x.numel();
  Tensor cx = x, co = out;
  maybe_record(out, {&x}, [cx, co, n]() mutable {
    const double* go = co.grad_ptr();
    if (!go || !cx.requires_grad()) return;
    double* gx = cx.grad();
    for (int64_t i = 0; i < n; ++i) gx[i] += go[i];
  });
  return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw std::invalid_argument("concat_cols: need [L,Da],[L,Db] with equal L, got " +
                                a.shape_str() + " vs " + b.shape_str());
  const int64_t L = a.dim(0), Da = a.dim(1), Db = b.dim(1);
  Tensor out = Tensor::zeros({L, Da + Db});
  for (int64_t l = 0; l < L; ++l) {
    std::copy_n(a.data() + l * Da, Da, out.data() + l * (Da + Db));
    std::copy_n(b.data() + l * Db, Db, out.data() + l * (Da + Db) + Da);
  }
  Tensor ca = a, cb = b, co = out;
  maybe_record(out, {&a, &b}, [ca, cb, co, L, Da, Db]() mutable {
    const double* go = co.grad_ptr();
    if (!go) return;
    if (ca.requires_grad()) {
      double* ga = ca.grad();
      for (int64_t l = 0; l < L; ++l)
        for (int64_t d = 0; d < Da; ++d) ga[l * Da + d] += go[l * (Da + Db) + d];
    }
    if (cb.requires_grad()) {
      double* gb = cb.grad();
      for (int64_t l = 0; l < L; ++l)
        for (int64_t d = 0; d < Db; ++d) gb[l * Db + d] += go[l * (Da + Db) + Da + d];
    }
  });
  return out;
}

Tensor slice_rows(const Tensor& x, int64_t start, int64_t len) {
  if (x.rank() != 2) throw std::invalid_argument("slice_rows: expected [L,D], got " + x.shape_str());
  const int64_t L = x.dim(0), D = x.dim(1);
  if (start < 0 || len < 0 || start + len > L)
    throw std::invalid_argument("slice_rows: range out of bounds");
  Tensor out = Tensor::zeros({len, D});
  std::copy_n(x.data() + start * D, len * D, out.data());
  Tensor cx = x, co = out;
  maybe_record(out, {&x}, [cx, co, start, len, D]() mutable {
    const double* go = co.grad_ptr();
    if (!go || !cx.requires_grad()) return;
    double* gx = cx.grad();
    for (int64_t i = 0; i < len * D; ++i) gx[start * D + i] += go[i];
  });
  return out;
}

Tensor reverse_rows(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("reverse_rows: expected [L,D], got " + x.shape_str());
  const int64_t L = x.dim(0), D = x.dim(1);
  Tensor out = Tensor::zeros({L, D});
  for (int64_t l = 0; l < L; ++l)
    std::copy_n(x.data() + l * D, D, out.data() + (L - 1 - l) * D);
  Tensor cx = x, co = out;
  maybe_record(out, {&x}, [cx, co, L, D]() mutable {
    const double* go = co.grad_ptr();
    if (!go || !cx.requires_grad()) return;
    double* gx = cx.grad();
    for (int64_t l = 0; l < L; ++l)
      for (int64_t d = 0; d < D; ++d) gx[l * D + d] += go[(L - 1 - l) * D + d];
  });
  return out;
}

Tensor select(const Tensor& x, int64_t flat_index) {
  if (flat_index < 0 || flat_index >= x.numel())
    throw std::out_of_range("select: index out of range");
  Tensor out = Tensor::scalar(x.data()[flat_index]);
  Tensor cx = x, co = out;
  maybe_record(out, {&x}, [cx, co, flat_index]() mutable {
    const double* go = co.grad_ptr();
    if (!go || !cx.requires_grad()) return;
    cx.grad()[flat_index] += go[0];
  });
  return out;
}

Tensor stack_scalars(const std::vector<Tensor>& xs) {
  const int64_t k = static_cast<int64_t>(xs.size());
  Tensor out = Tensor::zeros({k});
  bool any = false;
  for (int64_t i = 0; i < k; ++i) {
    if (xs[i].numel() != 1) throw std::invalid_argument("stack_scalars: non-scalar input");
    out.data()[i] = xs[i].data()[0];
    any = any || xs[i].requires_grad();
  }
  if (any && Graph::active()) {
    out.set_requires_grad(true);
    std::vector<Tensor> cs = xs;
    Tensor co = out;
    Graph::active()->add_node([cs, co, k]() mutable {
      const double* go = co.grad_ptr();
      if (!go) return;
      for (int64_t i = 0; i < k; ++i)
        if (cs[i].requires_grad()) cs[i].grad()[0] += go[i];
    });
  }
  return out;
}

Tensor extract_patches(const Tensor& grid, int64_t patch) {
  if (grid.rank() != 3) throw std::invalid_argument("extract_patches: expected [S,S,C], got " + grid.shape_str());
  const int64_t S = grid.dim(0), C = grid.dim(2);
  if (grid.dim(1) != S) throw std::invalid_argument("extract_patches: grid must be square, got " + grid.shape_str());
  if (patch <= 0 || S % patch != 0)
    throw std::invalid_argument("extract_patches: patch " + std::to_string(patch) +
                                " does not divide side " + std::to_string(S));
  const int64_t G = S / patch;                // tokens per side
  const int64_t F = patch * patch * C;        // flattened patch length
  Tensor out = Tensor::zeros({G * G, F});
  for (int64_t gy = 0; gy < G; ++gy)
    for (int64_t gx = 0; gx < G; ++gx) {
      double* row = out.data() + (gy * G + gx) * F;
      for (int64_t dy = 0; dy < patch; ++dy)
        for (int64_t dx = 0; dx < patch; ++dx)
          for (int64_t c = 0; c < C; ++c)
            row[(dy * patch + dx) * C + c] =
                grid.data()[((gy * patch + dy) * S + gx * patch + dx) * C + c];
    }
  Tensor cg = grid, co = out;
  maybe_record(out, {&grid}, [cg, co, S, C, patch, G, F]() mutable {
    const double* go = co.grad_ptr();
    if (!go || !cg.requires_grad()) return;
    double* gg = cg.grad();
    for (int64_t gy = 0; gy < G; ++gy)
      for (int64_t gx = 0; gx < G; ++gx) {
        const double* row = go + (gy * G + gx) * F;
        for (int64_t dy = 0; dy < patch; ++dy)
          for (int64_t dx = 0; dx < patch; ++dx)
            for (int64_t c = 0; c < C; ++c)
              gg[((gy * patch + dy) * S + gx * patch + dx) * C + c] +=
                  row[(dy * patch + dx) * C + c];
      }
  });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& W, const Tensor* b) {
  if (W.rank() != 2)
    throw std::invalid_argument("linear: weight must be [Din,Dout], got " + W.shape_str());
  const int64_t din = W.dim(0), dout = W.dim(1);
  if (x.rank() < 1 || x.dim(x.rank() - 1) != din)
    throw std::invalid_argument("linear: input " + x.shape_str() + " incompatible with weight " +
                                W.shape_str());
  if (b && (b->rank() != 1 || b->dim(0) != dout))
    throw std::invalid_argument("linear: bias " + b->shape_str() + " incompatible with weight " +
                                W.shape_str());
  std::vector<int64_t> out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(dout);
  const int64_t rows = x.numel() / din;
  Tensor out = Tensor::zeros(out_shape);
  {
    const double* px = x.data();
    const double* pw = W.data();
    double* po = out.data();
    for (int64_t l = 0; l < rows; ++l) {
      double* orow = po + l * dout;
      if (b) std::copy_n(b->data(), dout, orow);
      const double* xrow = px + l * din;
      for (int64_t i = 0; i < din; ++i) {
        const double xv = xrow[i];
        if (xv == 0.0) continue;
        const double* wrow = pw + i * dout;
        for (int64_t j = 0; j < dout; ++j) orow[j] += xv * wrow[j];
      }
    }
  }
  Tensor cx = x, cw = W, co = out;
  Tensor cb = b ? *b : Tensor();
  maybe_record(out, {&x, &W, b}, [cx, cw, cb, co, rows, din, dout]() mutable {
    const double* go = co.grad_ptr();
    if (!go) return;
    const double* px = cx.data();
    const double* pw = cw.data();
    if (cw.requires_grad()) {
      double* gw = cw.grad();
      for (int64_t l = 0; l < rows; ++l) {
        const double* xrow = px + l * din;
        const double* grow = go + l * dout;
        for (int64_t i = 0; i < din; ++i) {
          const double xv = xrow[i];
          if (xv == 0.0) continue;
          double* gwrow = gw + i * dout;
          for (int64_t j = 0; j < dout; ++j) gwrow[j] += xv * grow[j];
        }
      }
    }
    if (cx.requires_grad()) {
      double* gx = cx.grad();
      for (int64_t l = 0; l < rows; ++l) {
        const double* grow = go + l * dout;
        double* gxrow = gx + l * din;
        for (int64_t i = 0; i < din; ++i) {
          const double* wrow = pw + i * dout;
          double acc = 0.0;
          for (int64_t j = 0; j < dout; ++j) acc += grow[j] * wrow[j];
          gxrow[i] += acc;
        }
      }
    }
    if (cb.defined() && cb.requires_grad()) {
      double* gb = cb.grad();
      for (int64_t l = 0; l < rows; ++l)
        for (int64_t j = 0; j < dout; ++j) gb[j] += go[l * dout + j];
    }
  });
  return out;
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel, bool causal) {
  if (x.rank() != 2 || kernel.rank() != 2)
    throw std::invalid_argument("depthwise_conv1d: expected x [L,D], kernel [K,D], got " +
                                x.shape_str() + " and " + kernel.shape_str());
  const int64_t L = x.dim(0), D = x.dim(1), K = kernel.dim(0);
  if (K < 1) throw std::invalid_argument("depthwise_conv1d: kernel length must be >= 1");
  if (kernel.dim(1) != D)
    throw std::invalid_argument("depthwise_conv1d: channel mismatch " + x.shape_str() + " vs " +
                                kernel.shape_str());
  const int64_t pad_left = causal ? K - 1 : (K - 1) / 2;
  Tensor out = Tensor::zeros({L, D});
  {
    const double* px = x.data();
    const double* pk = kernel.data();
    double* po = out.data();
    for (int64_t t = 0; t < L; ++t)
      for (int64_t i = 0; i < K; ++i) {
        const int64_t s = t - pad_left + i;
        if (s < 0 || s >= L) continue;
        const double* krow = pk + i * D;
        const double* xrow = px + s * D;
        double* orow = po + t * D;
        for (int64_t d = 0; d < D; ++d) orow[d] += krow[d] * xrow[d];
      }
  }
  Tensor cx = x, ck = kernel, co = out;
  maybe_record(out, {&x, &kernel}, [cx, ck, co, L, D, K, pad_left]() mutable {
    const double* go = co.grad_ptr();
    if (!go) return;
    const double* px = cx.data();
    const double* pk = ck.data();
    double* gx = cx.requires_grad() ? cx.grad() : nullptr;
    double* gk = ck.requires_grad() ? ck.grad() : nullptr;
    for (int64_t t = 0; t < L; ++t)
      for (int64_t i = 0; i < K; ++i) {
        const int64_t s = t - pad_left + i;
        if (s < 0 || s >= L) continue;
        const double* grow = go + t * D;
        for (int64_t d = 0; d < D; ++d) {
          if (gx) gx[s * D + d] += grow[d] * pk[i * D + d];
          if (gk) gk[i * D + d] += grow[d] * px[s * D + d];
        }
      }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw std::invalid_argument("layer_norm: rank-0 input");
  const int64_t D = x.dim(x.rank() - 1);
  if (gamma.numel() != D || beta.numel() != D)
    throw std::invalid_argument("layer_norm: affine params must be [D]=" + std::to_string(D) +
                                ", got " + gamma.shape_str() + " and " + beta.shape_str());
  if (eps <= 0) throw std::invalid_argument("layer_norm: eps must be positive");
  const int64_t rows = x.numel() / D;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> inv_std(static_cast<size_t>(rows));
  std::vector<double> xhat(static_cast<size_t>(x.numel()));
  {
    const double* px = x.data();
    double* po = out.data();
    for (int64_t l = 0; l < rows; ++l) {
      const double* row = px + l * D;
      double mu = 0.0;
      for (int64_t d = 0; d < D; ++d) mu += row[d];
      mu /= static_cast<double>(D);
      double var = 0.0;
      for (int64_t d = 0; d < D; ++d) var += (row[d] - mu) * (row[d] - mu);
      var /= static_cast<double>(D);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<size_t>(l)] = is;
      for (int64_t d = 0; d < D; ++d) {
        const double h = (row[d] - mu) * is;
        xhat[static_cast<size_t>(l * D + d)] = h;
        po[l * D + d] = gamma.data()[d] * h + beta.data()[d];
      }
    }
  }
  Tensor cx = x, cg = gamma, cb = beta, co = out;
  maybe_record(out, {&x, &gamma, &beta},
               [cx, cg, cb, co, rows, D, inv_std = std::move(inv_std),
                xhat = std::move(xhat)]() mutable {
    const double* go = co.grad_ptr();
    if (!go) return;
    double* ggamma = cg.requires_grad() ? cg.grad() : nullptr;
    double* gbeta = cb.requires_grad() ? cb.grad() : nullptr;
    double* gx = cx.requires_grad() ? cx.grad() : nullptr;
    for (int64_t l = 0; l < rows; ++l) {
      const double* grow = go + l * D;
      const double* hrow = xhat.data() + l * D;
      if (ggamma || gbeta)
        for (int64_t d = 0; d < D; ++d) {
          if (ggamma) ggamma[d] += grow[d] * hrow[d];
          if (gbeta) gbeta[d] += grow[d];
        }
      if (gx) {
        double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat*xhat)
        for (int64_t d = 0; d < D; ++d) {
          const double dh = grow[d] * cg.data()[d];
          m1 += dh;
          m2 += dh * hrow[d];
        }
        m1 /= static_cast<double>(D);
        m2 /= static_cast<double>(D);
        const double is = inv_std[static_cast<size_t>(l)];
        for (int64_t d = 0; d < D; ++d) {
          const double dh = grow[d] * cg.data()[d];
          gx[l * D + d] += is * (dh - m1 - hrow[d] * m2);
        }
      }
    }
  });
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor* bias) {
  if (x.rank() != 3 || kernel.rank() != 4)
    throw std::invalid_argument("conv2d: expected x [H,W,Cin], kernel [kh,kw,Cin,Cout], got " +
                                x.shape_str() + " and " + kernel.shape_str());
  const int64_t H = x.dim(0), W = x.dim(1), Cin = x.dim(2);
  const int64_t kh = kernel.dim(0), kw = kernel.dim(1), Cout = kernel.dim(3);
  if (kernel.dim(2) != Cin)
    throw std::invalid_argument("conv2d: channel mismatch " + x.shape_str() + " vs " +
                                kernel.shape_str());
  if (bias && bias->numel() != Cout)
    throw std::invalid_argument("conv2d: bias size mismatch");
  const int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  Tensor out = Tensor::zeros({H, W, Cout});
  {
    const double* px = x.data();
    const double* pk = kernel.data();
    double* po = out.data();
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w) {
        double* orow = po + (h * W + w) * Cout;
        if (bias) std::copy_n(bias->data(), Cout, orow);
        for (int64_t a = 0; a < kh; ++a) {
          const int64_t ih = h - ph + a;
          if (ih < 0 || ih >= H) continue;
          for (int64_t b = 0; b < kw; ++b) {
            const int64_t iw = w - pw + b;
            if (iw < 0 || iw >= W) continue;
            const double* xrow = px + (ih * W + iw) * Cin;
            const double* krow = pk + ((a * kw + b) * Cin) * Cout;
            for (int64_t ci = 0; ci < Cin; ++ci) {
              const double xv = xrow[ci];
              if (xv == 0.0) continue;
              const double* kk = krow + ci * Cout;
              for (int64_t co2 = 0; co2 < Cout; ++co2) orow[co2] += xv * kk[co2];
            }
          }
        }
      }
  }
  Tensor cx = x, ck = kernel, co = out;
  Tensor cb = bias ? *bias : Tensor();
  maybe_record(out, {&x, &kernel, bias},
               [cx, ck, cb, co, H, W, Cin, kh, kw, Cout, ph, pw]() mutable {
    const double* go = co.grad_ptr();
    if (!go) return;
    const double* px = cx.data();
    const double* pk = ck.data();
    double* gx = cx.requires_grad() ? cx.grad() : nullptr;
    double* gk = ck.requires_grad() ? ck.grad() : nullptr;
    double* gb = (cb.defined() && cb.requires_grad()) ? cb.grad() : nullptr;
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w) {
        const double* grow = go + (h * W + w) * Cout;
        if (gb)
          for (int64_t co2 = 0; co2 < Cout; ++co2) gb[co2] += grow[co2];
        for (int64_t a = 0; a < kh; ++a) {
          const int64_t ih = h - ph + a;
          if (ih < 0 || ih >= H) continue;
          for (int64_t b = 0; b < kw; ++b) {
            const int64_t iw = w - pw + b;
            if (iw < 0 || iw >= W) continue;
            const double* xrow = px + (ih * W + iw) * Cin;
            for (int64_t ci = 0; ci < Cin; ++ci) {
              const double* kk = pk + (((a * kw + b) * Cin) + ci) * Cout;
              if (gx) {
                double acc = 0.0;
                for (int64_t co2 = 0; co2 < Cout; ++co2) acc += grow[co2] * kk[co2];
                gx[(ih * W + iw) * Cin + ci] += acc;
              }
              if (gk) {
                const double xv = xrow[ci];
                double* gkk = gk + (((a * kw + b) * Cin) + ci) * Cout;
                for (int64_t co2 = 0; co2 < Cout; ++co2) gkk[co2] += grow[co2] * xv;
              }
            }
          }
        }
      }
  });
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (b.rank() != 1 || x.rank() < 1 || x.dim(x.rank() - 1) != b.dim(0))
    throw std::invalid_argument("add_bias: trailing dim of " + x.shape_str() +
                                " must match " + b.shape_str());
  const int64_t D = b.dim(0);
  const int64_t rows = x.numel() / D;
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t l = 0; l < rows; ++l)
    for (int64_t d = 0; d < D; ++d)
      out.data()[l * D + d] = x.data()[l * D + d] + b.data()[d];
  Tensor cx = x, cb = b, co = out;
  maybe_record(out, {&x, &b}, [cx, cb, co, rows, D]() mutable {
    const double* go = co.grad_ptr();
    if (!go) return;
    if (cx.requires_grad()) {
      double* gx = cx.grad();
      for (int64_t i = 0; i < rows * D; ++i) gx[i] += go[i];
    }
    if (cb.requires_grad()) {
      double* gb = cb.grad();
      for (int64_t l = 0; l < rows; ++l)
        for (int64_t d = 0; d < D; ++d) gb[d] += go[l * D + d];
    }
  });
  return out;
}

}  // namespace ops
}  // namespace mambatrack
