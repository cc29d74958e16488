#include "qgn/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

namespace qgn {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

void check_same_shape(const Value& a, const Value& b, const char* op) {
  if (!a.val().same_shape(b.val()))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                Tensor::shape_str(a.val().shape()) + " vs " +
                                Tensor::shape_str(b.val().shape()));
}

Tape* tape_of(const Value& v, const char* op) {
  if (!v.valid()) throw std::invalid_argument(std::string(op) + ": invalid value");
  return v.tape;
}

// Id the next emit() call will assign; lets backward closures find their own
// output node. Every op computes this immediately before its single emit().
int next_id(Tape* t) { return static_cast<int>(t->size()); }

}  // namespace

Value add(Value a, Value b) {
  Tape* t = tape_of(a, "add");
  check_same_shape(a, b, "add");
  Tensor out = a.val();
  const Tensor& bv = b.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  int self = next_id(t), ai = a.id, bi = b.id;
  return t->emit(std::move(out), {a, b}, [t, self, ai, bi] {
    const Tensor& g = t->grad(self);
    t->accumulate(ai, g);
    t->accumulate(bi, g);
  });
}

Value sub(Value a, Value b) {
  Tape* t = tape_of(a, "sub");
  check_same_shape(a, b, "sub");
  Tensor out = a.val();
  const Tensor& bv = b.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  int self = next_id(t), ai = a.id, bi = b.id;
  return t->emit(std::move(out), {a, b}, [t, self, ai, bi] {
    const Tensor& g = t->grad(self);
    t->accumulate(ai, g);
    if (t->requires_grad(bi)) {
      Tensor& gb = t->grad(bi);
      for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

Value mul(Value a, Value b) {
  Tape* t = tape_of(a, "mul");
  check_same_shape(a, b, "mul");
  Tensor out = a.val();
  const Tensor& bv = b.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  int self = next_id(t), ai = a.id, bi = b.id;
  return t->emit(std::move(out), {a, b}, [t, self, ai, bi] {
    const Tensor& g = t->grad(self);
    const Tensor& av = t->value(ai);
    const Tensor& bv2 = t->value(bi);
    if (t->requires_grad(ai)) {
      Tensor& ga = t->grad(ai);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (t->requires_grad(bi)) {
      Tensor& gb = t->grad(bi);
      for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Value scale(Value a, double c) {
  Tape* t = tape_of(a, "scale");
  Tensor out = a.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
  int self = next_id(t), ai = a.id;
  return t->emit(std::move(out), {a}, [t, self, ai, c] {
    const Tensor& g = t->grad(self);
    if (t->requires_grad(ai)) {
      Tensor& ga = t->grad(ai);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
    }
  });
}

Value add_n(const std::vector<Value>& xs) {
  if (xs.empty()) throw std::invalid_argument("add_n: empty input");
  Tape* t = tape_of(xs[0], "add_n");
  Tensor out = xs[0].val();
  for (size_t j = 1; j < xs.size(); ++j) {
    check_same_shape(xs[0], xs[j], "add_n");
    const Tensor& v = xs[j].val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += v[i];
  }
  std::vector<int> ids;
  ids.reserve(xs.size());
  for (const Value& x : xs) ids.push_back(x.id);
  int self = next_id(t);
  return t->emit(std::move(out), xs, [t, self, ids] {
    const Tensor& g = t->grad(self);
    for (int id : ids) t->accumulate(id, g);
  });
}

Value relu(Value a) {
  Tape* t = tape_of(a, "relu");
  Tensor out = a.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(0.0, out[i]);
  int self = next_id(t), ai = a.id;
  return t->emit(std::move(out), {a}, [t, self, ai] {
    const Tensor& g = t->grad(self);
    const Tensor& av = t->value(ai);
    if (t->requires_grad(ai)) {
      Tensor& ga = t->grad(ai);
      for (int64_t i = 0; i < g.numel(); ++i)
        if (av[i] > 0.0) ga[i] += g[i];
    }
  });
}

Value sigmoid(Value a) {
  Tape* t = tape_of(a, "sigmoid");
  Tensor out = a.val();
  for (int64_t i = 0; i < out.numel(); ++i) {
    double x = out[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  int self = next_id(t), ai = a.id;
  return t->emit(std::move(out), {a}, [t, self, ai] {
    const Tensor& g = t->grad(self);
    const Tensor& y = t->value(self);
    if (t->requires_grad(ai)) {
      Tensor& ga = t->grad(ai);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    }
  });
}

Value square(Value a) {
  Tape* t = tape_of(a, "square");
  Tensor out = a.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= out[i];
  int self = next_id(t), ai = a.id;
  return t->emit(std::move(out), {a}, [t, self, ai] {
    const Tensor& g = t->grad(self);
    const Tensor& av = t->value(ai);
    if (t->requires_grad(ai)) {
      Tensor& ga = t->grad(ai);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += 2.0 * av[i] * g[i];
    }
  });
}

Value matmul(Value a, Value b) {
  Tape* t = tape_of(a, "matmul");
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0))
    throw std::invalid_argument("matmul: bad shapes " + Tensor::shape_str(av.shape()) + " x " +
                                Tensor::shape_str(bv.shape()));
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  {
    ConstMatMap A(av.data(), m, k), B(bv.data(), k, n);
    MatMap O(out.data(), m, n);
    O.noalias() = A * B;
  }
  int self = next_id(t), ai = a.id, bi = b.id;
  return t->emit(std::move(out), {a, b}, [t, self, ai, bi, m, k, n] {
    ConstMatMap G(t->grad(self).data(), m, n);
    ConstMatMap A(t->value(ai).data(), m, k), B(t->value(bi).data(), k, n);
    if (t->requires_grad(ai)) {
      MatMap GA(t->grad(ai).data(), m, k);
      GA.noalias() += G * B.transpose();
    }
    if (t->requires_grad(bi)) {
      MatMap GB(t->grad(bi).data(), k, n);
      GB.noalias() += A.transpose() * G;
    }
  });
}

Value linear(Value x, Value w, Value b) {
  Tape* t = tape_of(x, "linear");
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  const bool vec_in = xv.ndim() == 1;
  const int n = vec_in ? 1 : xv.dim(0);
  const int d = vec_in ? xv.dim(0) : xv.dim(1);
  if (wv.ndim() != 2 || wv.dim(1) != d)
    throw std::invalid_argument("linear: weight shape " + Tensor::shape_str(wv.shape()) +
                                " does not accept input dim " + std::to_string(d));
  const int o = wv.dim(0);
  const bool has_bias = b.valid();
  if (has_bias && (b.val().ndim() != 1 || b.val().dim(0) != o))
    throw std::invalid_argument("linear: bias shape mismatch");

  Tensor out(vec_in ? std::vector<int>{o} : std::vector<int>{n, o});
  {
    ConstMatMap X(xv.data(), n, d), W(wv.data(), o, d);
    MatMap O(out.data(), n, o);
    O.noalias() = X * W.transpose();
    if (has_bias) {
      const double* bp = b.val().data();
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < o; ++c) out[static_cast<int64_t>(r) * o + c] += bp[c];
    }
  }
  std::vector<Value> parents{x, w};
  if (has_bias) parents.push_back(b);
  int self = next_id(t), xi = x.id, wi = w.id, bi = has_bias ? b.id : -1;
  return t->emit(std::move(out), parents, [t, self, xi, wi, bi, n, d, o] {
    ConstMatMap G(t->grad(self).data(), n, o);
    ConstMatMap X(t->value(xi).data(), n, d), W(t->value(wi).data(), o, d);
    if (t->requires_grad(xi)) {
      MatMap GX(t->grad(xi).data(), n, d);
      GX.noalias() += G * W;
    }
    if (t->requires_grad(wi)) {
      MatMap GW(t->grad(wi).data(), o, d);
      GW.noalias() += G.transpose() * X;
    }
    if (bi >= 0 && t->requires_grad(bi)) {
      Tensor& gb = t->grad(bi);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < o; ++c) gb[c] += G(r, c);
    }
  });
}

Value reshape(Value a, std::vector<int> shape) {
  Tape* t = tape_of(a, "reshape");
  Tensor out = a.val().reshaped(std::move(shape));
  int self = next_id(t), ai = a.id;
  return t->emit(std::move(out), {a}, [t, self, ai] {
    const Tensor& g = t->grad(self);
    if (t->requires_grad(ai)) {
      Tensor& ga = t->grad(ai);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
  });
}

Value concat_cols(Value a, Value b) {
  Tape* t = tape_of(a, "concat_cols");
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(0) != bv.dim(0))
    throw std::invalid_argument("concat_cols: shape mismatch");
  const int n = av.dim(0), p = av.dim(1), q = bv.dim(1);
  Tensor out({n, p + q});
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < p; ++c) out[static_cast<int64_t>(r) * (p + q) + c] = av[static_cast<int64_t>(r) * p + c];
    for (int c = 0; c < q; ++c) out[static_cast<int64_t>(r) * (p + q) + p + c] = bv[static_cast<int64_t>(r) * q + c];
  }
  int self = next_id(t), ai = a.id, bi = b.id;
  return t->emit(std::move(out), {a, b}, [t, self, ai, bi, n, p, q] {
    const Tensor& g = t->grad(self);
    if (t->requires_grad(ai)) {
      Tensor& ga = t->grad(ai);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < p; ++c) ga[static_cast<int64_t>(r) * p + c] += g[static_cast<int64_t>(r) * (p + q) + c];
    }
    if (t->requires_grad(bi)) {
      Tensor& gb = t->grad(bi);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < q; ++c) gb[static_cast<int64_t>(r) * q + c] += g[static_cast<int64_t>(r) * (p + q) + p + c];
    }
  });
}

Value stack_rows(const std::vector<Value>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: empty input");
  Tape* t = tape_of(rows[0], "stack_rows");
  const int d = static_cast<int>(rows[0].val().numel());
  const int n = static_cast<int>(rows.size());
  Tensor out({n, d});
  std::vector<int> ids;
  ids.reserve(rows.size());
  for (int r = 0; r < n; ++r) {
    const Tensor& v = rows[static_cast<size_t>(r)].val();
    if (v.numel() != d) throw std::invalid_argument("stack_rows: ragged rows");
    for (int c = 0; c < d; ++c) out[static_cast<int64_t>(r) * d + c] = v[c];
    ids.push_back(rows[static_cast<size_t>(r)].id);
  }
  int self = next_id(t);
  return t->emit(std::move(out), rows, [t, self, ids, d] {
    const Tensor& g = t->grad(self);
    for (size_t r = 0; r < ids.size(); ++r) {
      int id = ids[r];
      if (!t->requires_grad(id)) continue;
      Tensor& gr = t->grad(id);
      for (int c = 0; c < d; ++c) gr[c] += g[static_cast<int64_t>(r) * d + c];
    }
  });
}

Value take_rows(Value x, std::vector<int> idx) {
  Tape* t = tape_of(x, "take_rows");
  const Tensor& xv = x.val();
  if (xv.ndim() != 2) throw std::invalid_argument("take_rows: expect 2-D input");
  const int n = xv.dim(0), d = xv.dim(1);
  Tensor out({static_cast<int>(idx.size()), d});
  for (size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= n) throw std::out_of_range("take_rows: index out of range");
    for (int c = 0; c < d; ++c)
      out[static_cast<int64_t>(r) * d + c] = xv[static_cast<int64_t>(idx[r]) * d + c];
  }
  int self = next_id(t), xi = x.id;
  return t->emit(std::move(out), {x}, [t, self, xi, idx = std::move(idx), d] {
    const Tensor& g = t->grad(self);
    if (!t->requires_grad(xi)) return;
    Tensor& gx = t->grad(xi);
    for (size_t r = 0; r < idx.size(); ++r)
      for (int c = 0; c < d; ++c)
        gx[static_cast<int64_t>(idx[r]) * d + c] += g[static_cast<int64_t>(r) * d + c];
  });
}

Value take_elements(Value x, std::vector<int64_t> idx) {
  Tape* t = tape_of(x, "take_elements");
  const Tensor& xv = x.val();
  const int64_t n = xv.numel();
  Tensor out({static_cast<int>(idx.size())});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n) throw std::out_of_range("take_elements: index out of range");
    out[static_cast<int64_t>(i)] = xv[idx[i]];
  }
  int self = next_id(t), xi = x.id;
  return t->emit(std::move(out), {x}, [t, self, xi, idx = std::move(idx)] {
    const Tensor& g = t->grad(self);
    if (!t->requires_grad(xi)) return;
    Tensor& gx = t->grad(xi);
    for (size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[static_cast<int64_t>(i)];
  });
}

Value row(Value x, int i) {
  Tape* t = tape_of(x, "row");
  const Tensor& xv = x.val();
  if (xv.ndim() != 2) throw std::invalid_argument("row: expect 2-D input");
  const int n = xv.dim(0), d = xv.dim(1);
  if (i < 0 || i >= n) throw std::out_of_range("row: index out of range");
  Tensor out({d});
  for (int c = 0; c < d; ++c) out[c] = xv[static_cast<int64_t>(i) * d + c];
  int self = next_id(t), xi = x.id;
  return t->emit(std::move(out), {x}, [t, self, xi, i, d] {
    const Tensor& g = t->grad(self);
    if (!t->requires_grad(xi)) return;
    Tensor& gx = t->grad(xi);
    for (int c = 0; c < d; ++c) gx[static_cast<int64_t>(i) * d + c] += g[c];
  });
}

Value sum_rows(Value x, std::vector<int> idx) {
  Tape* t = tape_of(x, "sum_rows");
  const Tensor& xv = x.val();
  if (xv.ndim() != 2) throw std::invalid_argument("sum_rows: expect 2-D input");
  const int n = xv.dim(0), d = xv.dim(1);
  Tensor out({d});
  for (int r : idx) {
    if (r < 0 || r >= n) throw std::out_of_range("sum_rows: index out of range");
    for (int c = 0; c < d; ++c) out[c] += xv[static_cast<int64_t>(r) * d + c];
  }
  int self = next_id(t), xi = x.id;
  return t->emit(std::move(out), {x}, [t, self, xi, idx = std::move(idx), d] {
    const Tensor& g = t->grad(self);
    if (!t->requires_grad(xi)) return;
    Tensor& gx = t->grad(xi);
    for (int r : idx)
      for (int c = 0; c < d; ++c) gx[static_cast<int64_t>(r) * d + c] += g[c];
  });
}

Value gap(Value x) {
  Tape* t = tape_of(x, "gap");
  const Tensor& xv = x.val();
  if (xv.ndim() != 4) throw std::invalid_argument("gap: expect [n,c,h,w]");
  const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out({n, c});
  const double inv = 1.0 / hw;
  for (int i = 0; i < n * c; ++i) {
    double s = 0.0;
    const double* p = xv.data() + static_cast<int64_t>(i) * hw;
    for (int j = 0; j < hw; ++j) s += p[j];
    out[i] = s * inv;
  }
  int self = next_id(t), xi = x.id;
  return t->emit(std::move(out), {x}, [t, self, xi, n, c, hw, inv] {
    const Tensor& g = t->grad(self);
    if (!t->requires_grad(xi)) return;
    Tensor& gx = t->grad(xi);
    for (int i = 0; i < n * c; ++i) {
      double gv = g[i] * inv;
      double* p = gx.data() + static_cast<int64_t>(i) * hw;
      for (int j = 0; j < hw; ++j) p[j] += gv;
    }
  });
}

Value channel_scale(Value x, Value s) {
  Tape* t = tape_of(x, "channel_scale");
  const Tensor& xv = x.val();
  const Tensor& sv = s.val();
  if (xv.ndim() != 4 || sv.ndim() != 2 || sv.dim(0) != xv.dim(0) || sv.dim(1) != xv.dim(1))
    throw std::invalid_argument("channel_scale: expect x [n,c,h,w], s [n,c]");
  const int nc = xv.dim(0) * xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out = xv;
  for (int i = 0; i < nc; ++i) {
    double* p = out.data() + static_cast<int64_t>(i) * hw;
    const double sc = sv[i];
    for (int j = 0; j < hw; ++j) p[j] *= sc;
  }
  int self = next_id(t), xi = x.id, si = s.id;
  return t->emit(std::move(out), {x, s}, [t, self, xi, si, nc, hw] {
    const Tensor& g = t->grad(self);
    const Tensor& xv2 = t->value(xi);
    const Tensor& sv2 = t->value(si);
    if (t->requires_grad(xi)) {
      Tensor& gx = t->grad(xi);
      for (int i = 0; i < nc; ++i) {
        const double sc = sv2[i];
        const double* gp = g.data() + static_cast<int64_t>(i) * hw;
        double* p = gx.data() + static_cast<int64_t>(i) * hw;
        for (int j = 0; j < hw; ++j) p[j] += gp[j] * sc;
      }
    }
    if (t->requires_grad(si)) {
      Tensor& gs = t->grad(si);
      for (int i = 0; i < nc; ++i) {
        const double* gp = g.data() + static_cast<int64_t>(i) * hw;
        const double* xp = xv2.data() + static_cast<int64_t>(i) * hw;
        double acc = 0.0;
        for (int j = 0; j < hw; ++j) acc += gp[j] * xp[j];
        gs[i] += acc;
      }
    }
  });
}

Value channel_scale_single(Value x, Value s) {
  Tape* t = tape_of(x, "channel_scale_single");
  const Tensor& xv = x.val();
  const Tensor& sv = s.val();
  if (xv.ndim() != 3 || sv.ndim() != 1 || sv.dim(0) != xv.dim(0))
    throw std::invalid_argument("channel_scale_single: expect x [c,h,w], s [c]");
  Value x4 = reshape(x, {1, xv.dim(0), xv.dim(1), xv.dim(2)});
  Value s2 = reshape(s, {1, sv.dim(0)});
  return reshape(channel_scale(x4, s2), xv.shape());
}

namespace {

struct ConvDims {
  int n, ci, h, w, co, kh, kw, ho, wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.ndim() != 4 || w.ndim() != 4 || w.dim(1) != x.dim(1))
    throw std::invalid_argument("conv2d: expect x [n,ci,h,w], w [co,ci,kh,kw]");
  ConvDims d{};
  d.n = x.dim(0);
  d.ci = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.co = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.ho <= 0 || d.wo <= 0) throw std::invalid_argument("conv2d: kernel larger than input");
  return d;
}

// Unpacks one image [ci,h,w] into a [ci*kh*kw, ho*wo] patch matrix.
void im2col(const double* img, const ConvDims& d, int stride, int pad, double* cols) {
  const int P = d.ho * d.wo;
  for (int c = 0; c < d.ci; ++c) {
    for (int ky = 0; ky < d.kh; ++ky) {
      for (int kx = 0; kx < d.kw; ++kx) {
        double* dst = cols + (static_cast<int64_t>(c) * d.kh * d.kw + ky * d.kw + kx) * P;
        for (int oy = 0; oy < d.ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= d.h) {
            for (int ox = 0; ox < d.wo; ++ox) dst[oy * d.wo + ox] = 0.0;
            continue;
          }
          const double* src = img + (static_cast<int64_t>(c) * d.h + iy) * d.w;
          for (int ox = 0; ox < d.wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[oy * d.wo + ox] = (ix < 0 || ix >= d.w) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvDims& d, int stride, int pad, double* img) {
  const int P = d.ho * d.wo;
  for (int c = 0; c < d.ci; ++c) {
    for (int ky = 0; ky < d.kh; ++ky) {
      for (int kx = 0; kx < d.kw; ++kx) {
        const double* src = cols + (static_cast<int64_t>(c) * d.kh * d.kw + ky * d.kw + kx) * P;
        for (int oy = 0; oy < d.ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= d.h) continue;
          double* dst = img + (static_cast<int64_t>(c) * d.h + iy) * d.w;
          for (int ox = 0; ox < d.wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < d.w) dst[ix] += src[oy * d.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Value conv2d(Value x, Value w, Value b, int stride, int pad) {
  Tape* t = tape_of(x, "conv2d");
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  const ConvDims d = conv_dims(xv, wv, stride, pad);
  const bool has_bias = b.valid();
  if (has_bias && (b.val().ndim() != 1 || b.val().dim(0) != d.co))
    throw std::invalid_argument("conv2d: bias shape mismatch");

  const int K = d.ci * d.kh * d.kw;
  const int P = d.ho * d.wo;
  Tensor out({d.n, d.co, d.ho, d.wo});
  std::vector<double> cols(static_cast<size_t>(K) * P);
  {
    ConstMatMap W(wv.data(), d.co, K);
    for (int s = 0; s < d.n; ++s) {
      im2col(xv.data() + static_cast<int64_t>(s) * d.ci * d.h * d.w, d, stride, pad, cols.data());
      ConstMatMap C(cols.data(), K, P);
      MatMap O(out.data() + static_cast<int64_t>(s) * d.co * P, d.co, P);
      O.noalias() = W * C;
    }
    if (has_bias) {
      const double* bp = b.val().data();
      for (int s = 0; s < d.n; ++s)
        for (int c = 0; c < d.co; ++c) {
          double* p = out.data() + (static_cast<int64_t>(s) * d.co + c) * P;
          for (int j = 0; j < P; ++j) p[j] += bp[c];
        }
    }
  }
  std::vector<Value> parents{x, w};
  if (has_bias) parents.push_back(b);
  int self = next_id(t), xi = x.id, wi = w.id, bi = has_bias ? b.id : -1;
  return t->emit(std::move(out), parents, [t, self, xi, wi, bi, d, stride, pad, K, P] {
    const Tensor& g = t->grad(self);
    const Tensor& xv2 = t->value(xi);
    const Tensor& wv2 = t->value(wi);
    const bool need_x = t->requires_grad(xi);
    const bool need_w = t->requires_grad(wi);
    std::vector<double> cols(static_cast<size_t>(K) * P);
    std::vector<double> dcols(need_x ? static_cast<size_t>(K) * P : 0);
    ConstMatMap W(wv2.data(), d.co, K);
    for (int s = 0; s < d.n; ++s) {
      ConstMatMap G(g.data() + static_cast<int64_t>(s) * d.co * P, d.co, P);
      if (need_w || need_x)
        im2col(xv2.data() + static_cast<int64_t>(s) * d.ci * d.h * d.w, d, stride, pad,
               cols.data());
      if (need_w) {
        MatMap GW(t->grad(wi).data(), d.co, K);
        ConstMatMap C(cols.data(), K, P);
        GW.noalias() += G * C.transpose();
      }
      if (need_x) {
        MatMap DC(dcols.data(), K, P);
        DC.noalias() = W.transpose() * G;
        col2im_add(dcols.data(), d, stride, pad,
                   t->grad(xi).data() + static_cast<int64_t>(s) * d.ci * d.h * d.w);
      }
    }
    if (bi >= 0 && t->requires_grad(bi)) {
      Tensor& gb = t->grad(bi);
      for (int s = 0; s < d.n; ++s)
        for (int c = 0; c < d.co; ++c) {
          const double* p = g.data() + (static_cast<int64_t>(s) * d.co + c) * P;
          double acc = 0.0;
          for (int j = 0; j < P; ++j) acc += p[j];
          gb[c] += acc;
        }
    }
  });
}

Value l2_normalize_rows(Value x, double eps) {
  Tape* t = tape_of(x, "l2_normalize_rows");
  const Tensor& xv = x.val();
  const bool vec_in = xv.ndim() == 1;
  if (!vec_in && xv.ndim() != 2) throw std::invalid_argument("l2_normalize_rows: expect 1-D or 2-D");
  const int n = vec_in ? 1 : xv.dim(0);
  const int dd = vec_in ? xv.dim(0) : xv.dim(1);
  Tensor out = xv;
  for (int r = 0; r < n; ++r) {
    double* p = out.data() + static_cast<int64_t>(r) * dd;
    double ss = 0.0;
    for (int c = 0; c < dd; ++c) ss += p[c] * p[c];
    const double inv = 1.0 / std::sqrt(ss + eps);
    for (int c = 0; c < dd; ++c) p[c] *= inv;
  }
  int self = next_id(t), xi = x.id;
  return t->emit(std::move(out), {x}, [t, self, xi, n, dd, eps] {
    const Tensor& g = t->grad(self);
    const Tensor& xv2 = t->value(xi);
    if (!t->requires_grad(xi)) return;
    Tensor& gx = t->grad(xi);
    for (int r = 0; r < n; ++r) {
      const double* xp = xv2.data() + static_cast<int64_t>(r) * dd;
      const double* gp = g.data() + static_cast<int64_t>(r) * dd;
      double* op = gx.data() + static_cast<int64_t>(r) * dd;
      double ss = 0.0, xg = 0.0;
      for (int c = 0; c < dd; ++c) {
        ss += xp[c] * xp[c];
        xg += xp[c] * gp[c];
      }
      const double inv = 1.0 / std::sqrt(ss + eps);
      const double inv3 = inv * inv * inv;
      for (int c = 0; c < dd; ++c) op[c] += gp[c] * inv - xp[c] * xg * inv3;
    }
  });
}

Value softmax_rows(Value x) {
  Tape* t = tape_of(x, "softmax_rows");
  const Tensor& xv = x.val();
  const bool vec_in = xv.ndim() == 1;
  if (!vec_in && xv.ndim() != 2) throw std::invalid_argument("softmax_rows: expect 1-D or 2-D");
  const int n = vec_in ? 1 : xv.dim(0);
  const int k = vec_in ? xv.dim(0) : xv.dim(1);
  Tensor out = xv;
  for (int r = 0; r < n; ++r) {
    double* p = out.data() + static_cast<int64_t>(r) * k;
    double mx = p[0];
    for (int c = 1; c < k; ++c) mx = std::max(mx, p[c]);
    double sum = 0.0;
    for (int c = 0; c < k; ++c) {
      p[c] = std::exp(p[c] - mx);
      sum += p[c];
    }
    for (int c = 0; c < k; ++c) p[c] /= sum;
  }
  int self = next_id(t), xi = x.id;
  return t->emit(std::move(out), {x}, [t, self, xi, n, k] {
    const Tensor& g = t->grad(self);
    const Tensor& y = t->value(self);
    if (!t->requires_grad(xi)) return;
    Tensor& gx = t->grad(xi);
    for (int r = 0; r < n; ++r) {
      const double* yp = y.data() + static_cast<int64_t>(r) * k;
      const double* gp = g.data() + static_cast<int64_t>(r) * k;
      double* op = gx.data() + static_cast<int64_t>(r) * k;
      double dot = 0.0;
      for (int c = 0; c < k; ++c) dot += yp[c] * gp[c];
      for (int c = 0; c < k; ++c) op[c] += yp[c] * (gp[c] - dot);
    }
  });
}

Value mean_all(Value x) {
  Tape* t = tape_of(x, "mean_all");
  const Tensor& xv = x.val();
  const int64_t n = xv.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += xv[i];
  int self = next_id(t), xi = x.id;
  return t->emit(Tensor::scalar(s / static_cast<double>(n)), {x}, [t, self, xi, n] {
    const double gv = t->grad(self)[0] / static_cast<double>(n);
    if (!t->requires_grad(xi)) return;
    Tensor& gx = t->grad(xi);
    for (int64_t i = 0; i < n; ++i) gx[i] += gv;
  });
}

Value sum_all(Value x) {
  Tape* t = tape_of(x, "sum_all");
  const Tensor& xv = x.val();
  const int64_t n = xv.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += xv[i];
  int self = next_id(t), xi = x.id;
  return t->emit(Tensor::scalar(s), {x}, [t, self, xi, n] {
    const double gv = t->grad(self)[0];
    if (!t->requires_grad(xi)) return;
    Tensor& gx = t->grad(xi);
    for (int64_t i = 0; i < n; ++i) gx[i] += gv;
  });
}

Value ce_with_logits(Value logits, const std::vector<int>& labels) {
  Tape* t = tape_of(logits, "ce_with_logits");
  const Tensor& lv = logits.val();
  if (lv.ndim() != 2) throw std::invalid_argument("ce_with_logits: expect [n,k]");
  const int n = lv.dim(0), k = lv.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("ce_with_logits: labels size mismatch");
  // Softmax probabilities are cached for the backward pass.
  auto probs = std::make_shared<Tensor>(lv);
  int counted = 0;
  double loss = 0.0;
  for (int r = 0; r < n; ++r) {
    double* p = probs->data() + static_cast<int64_t>(r) * k;
    double mx = p[0];
    for (int c = 1; c < k; ++c) mx = std::max(mx, p[c]);
    double sum = 0.0;
    for (int c = 0; c < k; ++c) sum += std::exp(p[c] - mx);
    const double lse = mx + std::log(sum);
    const int y = labels[static_cast<size_t>(r)];
    if (y >= 0) {
      if (y >= k) throw std::out_of_range("ce_with_logits: label out of range");
      loss += lse - p[y];
      ++counted;
    }
    for (int c = 0; c < k; ++c) p[c] = std::exp(p[c] - lse);
  }
  if (counted == 0) throw std::invalid_argument("ce_with_logits: no labeled rows");
  loss /= counted;
  int self = next_id(t), li = logits.id;
  return t->emit(Tensor::scalar(loss), {logits},
                 [t, self, li, probs, labels, n, k, counted] {
                   const double gv = t->grad(self)[0] / counted;
                   if (!t->requires_grad(li)) return;
                   Tensor& gl = t->grad(li);
                   for (int r = 0; r < n; ++r) {
                     const int y = labels[static_cast<size_t>(r)];
                     if (y < 0) continue;
                     const double* p = probs->data() + static_cast<int64_t>(r) * k;
                     double* gp = gl.data() + static_cast<int64_t>(r) * k;
                     for (int c = 0; c < k; ++c) gp[c] += gv * (p[c] - (c == y ? 1.0 : 0.0));
                   }
                 });
}

Value bce_with_logits(Value logits, const std::vector<double>& targets) {
  Tape* t = tape_of(logits, "bce_with_logits");
  const Tensor& lv = logits.val();
  const int64_t n = lv.numel();
  if (static_cast<int64_t>(targets.size()) != n)
    throw std::invalid_argument("bce_with_logits: targets size mismatch");
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double z = lv[i], y = targets[static_cast<size_t>(i)];
    loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  loss /= static_cast<double>(n);
  int self = next_id(t), li = logits.id;
  return t->emit(Tensor::scalar(loss), {logits}, [t, self, li, targets, n] {
    const double gv = t->grad(self)[0] / static_cast<double>(n);
    if (!t->requires_grad(li)) return;
    const Tensor& lv2 = t->value(li);
    Tensor& gl = t->grad(li);
    for (int64_t i = 0; i < n; ++i) {
      const double z = lv2[i];
      const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      gl[i] += gv * (s - targets[static_cast<size_t>(i)]);
    }
  });
}

Value nll_rows(Value probs, const std::vector<int>& labels, double eps) {
  Tape* t = tape_of(probs, "nll_rows");
  const Tensor& pv = probs.val();
  if (pv.ndim() != 2) throw std::invalid_argument("nll_rows: expect [n,k]");
  const int n = pv.dim(0), k = pv.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("nll_rows: labels size mismatch");
  int counted = 0;
  double loss = 0.0;
  for (int r = 0; r < n; ++r) {
    const int y = labels[static_cast<size_t>(r)];
    if (y < 0) continue;
    if (y >= k) throw std::out_of_range("nll_rows: label out of range");
    loss -= std::log(pv[static_cast<int64_t>(r) * k + y] + eps);
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("nll_rows: no labeled rows");
  loss /= counted;
  int self = next_id(t), pi = probs.id;
  return t->emit(Tensor::scalar(loss), {probs}, [t, self, pi, labels, k, counted, eps] {
    const double gv = t->grad(self)[0] / counted;
    if (!t->requires_grad(pi)) return;
    const Tensor& pv2 = t->value(pi);
    Tensor& gp = t->grad(pi);
    for (size_t r = 0; r < labels.size(); ++r) {
      const int y = labels[r];
      if (y < 0) continue;
      const int64_t off = static_cast<int64_t>(r) * k + y;
      gp[off] -= gv / (pv2[off] + eps);
    }
  });
}

Value smooth_l1(Value pred, const Tensor& target) {
  Tape* t = tape_of(pred, "smooth_l1");
  const Tensor& pv = pred.val();
  if (!pv.same_shape(target)) throw std::invalid_argument("smooth_l1: shape mismatch");
  if (pv.ndim() != 2) throw std::invalid_argument("smooth_l1: expect [n,d]");
  const int n = pv.dim(0);
  const int64_t m = pv.numel();
  double loss = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    const double e = pv[i] - target[i];
    const double a = std::abs(e);
    loss += a < 1.0 ? 0.5 * e * e : a - 0.5;
  }
  loss /= n;
  int self = next_id(t), pi = pred.id;
  auto tgt = std::make_shared<Tensor>(target);
  return t->emit(Tensor::scalar(loss), {pred}, [t, self, pi, tgt, n, m] {
    const double gv = t->grad(self)[0] / n;
    if (!t->requires_grad(pi)) return;
    const Tensor& pv2 = t->value(pi);
    Tensor& gp = t->grad(pi);
    for (int64_t i = 0; i < m; ++i) {
      const double e = pv2[i] - (*tgt)[i];
      gp[i] += gv * (std::abs(e) < 1.0 ? e : (e > 0.0 ? 1.0 : -1.0));
    }
  });
}

Value batchnorm_rows(Value x, Value gamma, Value beta, BatchNormState* state, bool training,
                     double momentum, double eps) {
  Tape* t = tape_of(x, "batchnorm_rows");
  const Tensor& xv = x.val();
  if (xv.ndim() != 2) throw std::invalid_argument("batchnorm_rows: expect [n,d]");
  const int n = xv.dim(0), d = xv.dim(1);
  if (gamma.val().numel() != d || beta.val().numel() != d)
    throw std::invalid_argument("batchnorm_rows: affine shape mismatch");

  Tensor out({n, d});
  if (training) {
    auto mean = std::make_shared<Tensor>(Tensor({d}));
    auto ivar = std::make_shared<Tensor>(Tensor({d}));
    for (int c = 0; c < d; ++c) {
      double mu = 0.0;
      for (int r = 0; r < n; ++r) mu += xv[static_cast<int64_t>(r) * d + c];
      mu /= n;
      double var = 0.0;
      for (int r = 0; r < n; ++r) {
        const double e = xv[static_cast<int64_t>(r) * d + c] - mu;
        var += e * e;
      }
      var /= n;
      (*mean)[c] = mu;
      (*ivar)[c] = 1.0 / std::sqrt(var + eps);
      if (state) {
        if (state->running_mean.empty()) {
          state->running_mean = Tensor({d});
          state->running_var = Tensor::full({d}, 1.0);
        }
        const double unbiased = n > 1 ? var * n / (n - 1.0) : var;
        state->running_mean[c] = (1.0 - momentum) * state->running_mean[c] + momentum * mu;
        state->running_var[c] = (1.0 - momentum) * state->running_var[c] + momentum * unbiased;
      }
    }
    if (state) ++state->batches_seen;
    const double* gp = gamma.val().data();
    const double* bp = beta.val().data();
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < d; ++c) {
        const int64_t i = static_cast<int64_t>(r) * d + c;
        out[i] = ((xv[i] - (*mean)[c]) * (*ivar)[c]) * gp[c] + bp[c];
      }
    int self = next_id(t), xi = x.id, gi = gamma.id, bi = beta.id;
    return t->emit(std::move(out), {x, gamma, beta}, [t, self, xi, gi, bi, mean, ivar, n, d] {
      const Tensor& g = t->grad(self);
      const Tensor& xv2 = t->value(xi);
      const Tensor& gm = t->value(gi);
      const bool need_x = t->requires_grad(xi);
      for (int c = 0; c < d; ++c) {
        const double mu = (*mean)[c], iv = (*ivar)[c], ga = gm[c];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int r = 0; r < n; ++r) {
          const int64_t i = static_cast<int64_t>(r) * d + c;
          const double xhat = (xv2[i] - mu) * iv;
          sum_dy += g[i];
          sum_dy_xhat += g[i] * xhat;
        }
        if (t->requires_grad(gi)) t->grad(gi)[c] += sum_dy_xhat;
        if (t->requires_grad(bi)) t->grad(bi)[c] += sum_dy;
        if (need_x) {
          Tensor& gx = t->grad(xi);
          for (int r = 0; r < n; ++r) {
            const int64_t i = static_cast<int64_t>(r) * d + c;
            const double xhat = (xv2[i] - mu) * iv;
            gx[i] += ga * iv * (g[i] - sum_dy / n - xhat * sum_dy_xhat / n);
          }
        }
      }
    });
  }

  // Eval mode: normalize with running statistics.
  if (!state || state->running_mean.empty())
    throw std::logic_error("batchnorm_rows: eval mode requires populated running stats");
  auto rm = std::make_shared<Tensor>(state->running_mean);
  auto riv = std::make_shared<Tensor>(Tensor({d}));
  for (int c = 0; c < d; ++c) (*riv)[c] = 1.0 / std::sqrt(state->running_var[c] + eps);
  const double* gp = gamma.val().data();
  const double* bp = beta.val().data();
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) {
      const int64_t i = static_cast<int64_t>(r) * d + c;
      out[i] = (xv[i] - (*rm)[c]) * (*riv)[c] * gp[c] + bp[c];
    }
  int self = next_id(t), xi = x.id, gi = gamma.id, bi = beta.id;
  return t->emit(std::move(out), {x, gamma, beta}, [t, self, xi, gi, bi, rm, riv, n, d] {
    const Tensor& g = t->grad(self);
    const Tensor& xv2 = t->value(xi);
    const Tensor& gm = t->value(gi);
    for (int c = 0; c < d; ++c) {
      const double iv = (*riv)[c], mu = (*rm)[c], ga = gm[c];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int r = 0; r < n; ++r) {
        const int64_t i = static_cast<int64_t>(r) * d + c;
        sum_dy += g[i];
        sum_dy_xhat += g[i] * (xv2[i] - mu) * iv;
      }
      if (t->requires_grad(gi)) t->grad(gi)[c] += sum_dy_xhat;
      if (t->requires_grad(bi)) t->grad(bi)[c] += sum_dy;
      if (t->requires_grad(xi)) {
        Tensor& gx = t->grad(xi);
        for (int r = 0; r < n; ++r) gx[static_cast<int64_t>(r) * d + c] += g[static_cast<int64_t>(r) * d + c] * ga * iv;
      }
    }
  });
}

Value roi_pool_max(Value fmap, const std::vector<std::array<double, 4>>& boxes, int ph, int pw) {
  Tape* t = tape_of(fmap, "roi_pool_max");
  const Tensor& fv = fmap.val();
  if (fv.ndim() != 3) throw std::invalid_argument("roi_pool_max: expect fmap [c,h,w]");
  const int c = fv.dim(0), h = fv.dim(1), w = fv.dim(2);
  const int nb = static_cast<int>(boxes.size());
  Tensor out({nb, c, ph, pw});
  // Flat source index of each pooled max, for the backward scatter.
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.numel()));
  for (int k = 0; k < nb; ++k) {
    const double x1 = boxes[static_cast<size_t>(k)][0], y1 = boxes[static_cast<size_t>(k)][1];
    const double x2 = boxes[static_cast<size_t>(k)][2], y2 = boxes[static_cast<size_t>(k)][3];
    const double bw = std::max(x2 - x1, 1e-9), bh = std::max(y2 - y1, 1e-9);
    for (int cc = 0; cc < c; ++cc) {
      for (int py = 0; py < ph; ++py) {
        int ys = static_cast<int>(std::floor(y1 + bh * py / ph));
        int ye = static_cast<int>(std::ceil(y1 + bh * (py + 1) / ph));
        ys = std::clamp(ys, 0, h - 1);
        ye = std::clamp(std::max(ye, ys + 1), 1, h);
        for (int px = 0; px < pw; ++px) {
          int xs = static_cast<int>(std::floor(x1 + bw * px / pw));
          int xe = static_cast<int>(std::ceil(x1 + bw * (px + 1) / pw));
          xs = std::clamp(xs, 0, w - 1);
          xe = std::clamp(std::max(xe, xs + 1), 1, w);
          double best = -1e300;
          int64_t best_i = -1;
          for (int yy = ys; yy < ye; ++yy)
            for (int xx = xs; xx < xe; ++xx) {
              const int64_t i = (static_cast<int64_t>(cc) * h + yy) * w + xx;
              if (fv[i] > best) {
                best = fv[i];
                best_i = i;
              }
            }
          const int64_t oi = ((static_cast<int64_t>(k) * c + cc) * ph + py) * pw + px;
          out[oi] = best;
          (*argmax)[static_cast<size_t>(oi)] = best_i;
        }
      }
    }
  }
  int self = next_id(t), fi = fmap.id;
  return t->emit(std::move(out), {fmap}, [t, self, fi, argmax] {
    const Tensor& g = t->grad(self);
    if (!t->requires_grad(fi)) return;
    Tensor& gf = t->grad(fi);
    for (int64_t i = 0; i < g.numel(); ++i) gf[(*argmax)[static_cast<size_t>(i)]] += g[i];
  });
}

Value roi_align(Value fmap, const std::vector<std::array<double, 4>>& boxes, int ph, int pw) {
  Tape* t = tape_of(fmap, "roi_align");
  const Tensor& fv = fmap.val();
  if (fv.ndim() != 3) throw std::invalid_argument("roi_align: expect fmap [c,h,w]");
  const int c = fv.dim(0), h = fv.dim(1), w = fv.dim(2);
  const int nb = static_cast<int>(boxes.size());
  Tensor out({nb, c, ph, pw});

  struct Sample {
    int64_t i00, i01, i10, i11;
    double w00, w01, w10, w11;
  };
  // 2x2 samples per bin; geometry is shared across channels (offsets are
  // relative to channel 0 and shifted per channel in the loops).
  auto samples = std::make_shared<std::vector<Sample>>();
  samples->reserve(static_cast<size_t>(nb) * ph * pw * 4);
  for (int k = 0; k < nb; ++k) {
    const double x1 = boxes[static_cast<size_t>(k)][0], y1 = boxes[static_cast<size_t>(k)][1];
    const double bw = std::max(boxes[static_cast<size_t>(k)][2] - x1, 1e-9) / pw;
    const double bh = std::max(boxes[static_cast<size_t>(k)][3] - y1, 1e-9) / ph;
    for (int py = 0; py < ph; ++py) {
      for (int px = 0; px < pw; ++px) {
        for (int sy = 0; sy < 2; ++sy) {
          for (int sx = 0; sx < 2; ++sx) {
            double y = y1 + (py + (sy + 0.5) / 2.0) * bh;
            double x = x1 + (px + (sx + 0.5) / 2.0) * bw;
            y = std::clamp(y, 0.0, static_cast<double>(h - 1));
            x = std::clamp(x, 0.0, static_cast<double>(w - 1));
            int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
            if (y0 >= h - 1) y0 = h - 1;
            if (x0 >= w - 1) x0 = w - 1;
            const int y1i = std::min(y0 + 1, h - 1), x1i = std::min(x0 + 1, w - 1);
            const double ly = y - y0, lx = x - x0;
            Sample s;
            s.i00 = static_cast<int64_t>(y0) * w + x0;
            s.i01 = static_cast<int64_t>(y0) * w + x1i;
            s.i10 = static_cast<int64_t>(y1i) * w + x0;
            s.i11 = static_cast<int64_t>(y1i) * w + x1i;
            s.w00 = (1.0 - ly) * (1.0 - lx);
            s.w01 = (1.0 - ly) * lx;
            s.w10 = ly * (1.0 - lx);
            s.w11 = ly * lx;
            samples->push_back(s);
          }
        }
      }
    }
  }
  const int64_t chw = static_cast<int64_t>(h) * w;
  for (int k = 0; k < nb; ++k) {
    for (int cc = 0; cc < c; ++cc) {
      const double* base = fv.data() + cc * chw;
      for (int py = 0; py < ph; ++py)
        for (int px = 0; px < pw; ++px) {
          const size_t s0 = (static_cast<size_t>(k) * ph * pw + static_cast<size_t>(py) * pw + px) * 4;
          double acc = 0.0;
          for (int j = 0; j < 4; ++j) {
            const Sample& s = (*samples)[s0 + static_cast<size_t>(j)];
            acc += s.w00 * base[s.i00] + s.w01 * base[s.i01] + s.w10 * base[s.i10] +
                   s.w11 * base[s.i11];
          }
          out[((static_cast<int64_t>(k) * c + cc) * ph + py) * pw + px] = acc / 4.0;
        }
    }
  }
  int self = next_id(t), fi = fmap.id;
  return t->emit(std::move(out), {fmap}, [t, self, fi, samples, nb, c, ph, pw, chw] {
    const Tensor& g = t->grad(self);
    if (!t->requires_grad(fi)) return;
    Tensor& gf = t->grad(fi);
    for (int k = 0; k < nb; ++k)
      for (int cc = 0; cc < c; ++cc) {
        double* base = gf.data() + cc * chw;
        for (int py = 0; py < ph; ++py)
          for (int px = 0; px < pw; ++px) {
            const double gv =
                g[((static_cast<int64_t>(k) * c + cc) * ph + py) * pw + px] / 4.0;
            const size_t s0 =
                (static_cast<size_t>(k) * ph * pw + static_cast<size_t>(py) * pw + px) * 4;
            for (int j = 0; j < 4; ++j) {
              const Sample& s = (*samples)[s0 + static_cast<size_t>(j)];
              base[s.i00] += gv * s.w00;
              base[s.i01] += gv * s.w01;
              base[s.i10] += gv * s.w10;
              base[s.i11] += gv * s.w11;
            }
          }
      }
  });
}

}  // namespace qgn
