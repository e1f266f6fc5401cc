#pragma once

// Neural-network operations on Tensor<S>: matrix multiply (Eigen gemm under
// the hood), softmax/log-softmax, linear layers, 2D/3D convolution via
// im2col, bilinear upsampling, layer/group normalization and scaled
// dot-product attention. All ops participate in the autodiff graph.

#include <Eigen/Core>

#include "vistr/tensor.hpp"

namespace vistr {

namespace detail {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;

// c[M,N] (+)= op_a(a) * op_b(b)
template <typename S>
void gemm(const S* a, const S* b, S* c, int64_t M, int64_t K, int64_t N,
          bool trans_a, bool trans_b, bool accumulate) {
  EMap<S> C(c, M, N);
  auto run = [&](const auto& A, const auto& B) {
    if (accumulate)
      C.noalias() += A * B;
    else
      C.noalias() = A * B;
  };
  if (!trans_a && !trans_b)
    run(ECMap<S>(a, M, K), ECMap<S>(b, K, N));
  else if (trans_a && !trans_b)
    run(ECMap<S>(a, K, M).transpose(), ECMap<S>(b, K, N));
  else if (!trans_a && trans_b)
    run(ECMap<S>(a, M, K), ECMap<S>(b, N, K).transpose());
  else
    run(ECMap<S>(a, K, M).transpose(), ECMap<S>(b, N, K).transpose());
}

}  // namespace detail

// Matrix product over the last two axes. Leading (batch) axes must match
// exactly, or one operand may be rank-2 and is then shared across the batch.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw std::invalid_argument("matmul: operands must have rank >= 2");
  int64_t M = a.dim(-2), K = a.dim(-1);
  int64_t Kb = b.dim(-2), N = b.dim(-1);
  if (K != Kb)
    throw std::invalid_argument("matmul: inner extents differ " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  Shape abatch(a.shape().begin(), a.shape().end() - 2);
  Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  if (abatch.empty())
    batch = bbatch;
  else if (bbatch.empty())
    batch = abatch;
  else if (abatch == bbatch)
    batch = abatch;
  else
    throw std::invalid_argument("matmul: batch extents differ");
  int64_t nb = numel_of(batch);
  bool a_shared = abatch.empty() && !batch.empty();
  bool b_shared = bbatch.empty() && !batch.empty();

  Shape oshape = batch;
  oshape.push_back(M);
  oshape.push_back(N);
  std::vector<S> y(static_cast<size_t>(numel_of(oshape)));
  const S* ap = a.data();
  const S* bp = b.data();
  for (int64_t i = 0; i < nb; ++i) {
    detail::gemm(ap + (a_shared ? 0 : i * M * K), bp + (b_shared ? 0 : i * K * N),
                 y.data() + i * M * N, M, K, N, false, false, false);
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op<S>(
      std::move(oshape), std::move(y), {a, b},
      [an, bn, M, K, N, nb, a_shared, b_shared](TensorNode<S>& self) {
        const S* g = self.grad.data();
        if (an->requires_grad) {
          an->ensure_grad();
          for (int64_t i = 0; i < nb; ++i) {
            // dA = dY * B^T, accumulated when A is shared
            detail::gemm(g + i * M * N, bn->value.data() + (b_shared ? 0 : i * K * N),
                         an->grad.data() + (a_shared ? 0 : i * M * K), M, N, K, false,
                         true, true);
          }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int64_t i = 0; i < nb; ++i) {
            // dB = A^T * dY
            detail::gemm(an->value.data() + (a_shared ? 0 : i * M * K), g + i * M * N,
                         bn->grad.data() + (b_shared ? 0 : i * K * N), K, M, N, true,
                         false, true);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void axis_extents(const Tensor<S>& x, int axis, int64_t& outer, int64_t& d, int64_t& inner) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw std::invalid_argument("softmax: invalid axis");
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  d = x.shape()[axis];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
}

}  // namespace detail

// Numerically stable softmax along `axis` (max subtraction).
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  int64_t outer, d, inner;
  detail::axis_extents(x, axis, outer, d, inner);
  const S* xp = x.data();
  std::vector<S> y(static_cast<size_t>(x.numel()));
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      int64_t base = o * d * inner + i;
      S mx = xp[base];
      for (int64_t k = 1; k < d; ++k) mx = std::max(mx, xp[base + k * inner]);
      S sum = 0;
      for (int64_t k = 0; k < d; ++k) {
        S e = std::exp(xp[base + k * inner] - mx);
        y[base + k * inner] = e;
        sum += e;
      }
      S r = S(1) / sum;
      for (int64_t k = 0; k < d; ++k) y[base + k * inner] *= r;
    }
  }
  auto xn = x.node();
  return detail::make_op<S>(
      x.shape(), std::move(y), {x}, [xn, outer, d, inner](TensorNode<S>& self) {
        xn->ensure_grad();
        const S* yv = self.value.data();
        const S* gy = self.grad.data();
        for (int64_t o = 0; o < outer; ++o) {
          for (int64_t i = 0; i < inner; ++i) {
            int64_t base = o * d * inner + i;
            S dot = 0;
            for (int64_t k = 0; k < d; ++k)
              dot += gy[base + k * inner] * yv[base + k * inner];
            for (int64_t k = 0; k < d; ++k) {
              int64_t idx = base + k * inner;
              xn->grad[idx] += yv[idx] * (gy[idx] - dot);
            }
          }
        }
      });
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& x, int axis) {
  int64_t outer, d, inner;
  detail::axis_extents(x, axis, outer, d, inner);
  const S* xp = x.data();
  std::vector<S> y(static_cast<size_t>(x.numel()));
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      int64_t base = o * d * inner + i;
      S mx = xp[base];
      for (int64_t k = 1; k < d; ++k) mx = std::max(mx, xp[base + k * inner]);
      S sum = 0;
      for (int64_t k = 0; k < d; ++k) sum += std::exp(xp[base + k * inner] - mx);
      S lse = mx + std::log(sum);
      for (int64_t k = 0; k < d; ++k) y[base + k * inner] = xp[base + k * inner] - lse;
    }
  }
  auto xn = x.node();
  return detail::make_op<S>(
      x.shape(), std::move(y), {x}, [xn, outer, d, inner](TensorNode<S>& self) {
        xn->ensure_grad();
        const S* yv = self.value.data();
        const S* gy = self.grad.data();
        for (int64_t o = 0; o < outer; ++o) {
          for (int64_t i = 0; i < inner; ++i) {
            int64_t base = o * d * inner + i;
            S gsum = 0;
            for (int64_t k = 0; k < d; ++k) gsum += gy[base + k * inner];
            for (int64_t k = 0; k < d; ++k) {
              int64_t idx = base + k * inner;
              xn->grad[idx] += gy[idx] - std::exp(yv[idx]) * gsum;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

// x [..., in] * w [in, out] + b [out]
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  Shape oshape = x.shape();
  oshape.back() = w.dim(1);
  auto x2 = reshape(x, {-1, x.dim(-1)});
  auto y = matmul(x2, w);
  if (b.defined()) y = add(y, b);
  return reshape(y, std::move(oshape));
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w) {
  return linear(x, w, Tensor<S>());
}

// ---------------------------------------------------------------------------
// Convolution (3D core; 2D wraps it)
// ---------------------------------------------------------------------------

using Dims3 = std::array<int64_t, 3>;

namespace detail {

struct ConvGeom {
  int64_t B, Cin, Cout;
  Dims3 in, k, stride, pad, out;
  int64_t K() const { return Cin * k[0] * k[1] * k[2]; }
  int64_t L() const { return out[0] * out[1] * out[2]; }
};

inline int64_t conv_extent(int64_t in, int64_t k, int64_t s, int64_t p) {
  int64_t e = (in + 2 * p - k) / s + 1;
  if (in + 2 * p < k || e <= 0)
    throw std::invalid_argument("conv: kernel larger than padded input");
  return e;
}

// col [K, L] with rows ordered (cin, dt, dh, dw) and cols (to, ho, wo).
template <typename S>
void im2col(const S* x, const ConvGeom& g, S* col) {
  const auto [Ti, Hi, Wi] = g.in;
  const auto [kt, kh, kw] = g.k;
  const auto [st, sh, sw] = g.stride;
  const auto [pt, ph, pw] = g.pad;
  const auto [To, Ho, Wo] = g.out;
  int64_t row = 0;
  for (int64_t c = 0; c < g.Cin; ++c)
    for (int64_t dt = 0; dt < kt; ++dt)
      for (int64_t dh = 0; dh < kh; ++dh)
        for (int64_t dw = 0; dw < kw; ++dw) {
          S* dst = col + row * g.L();
          for (int64_t to = 0; to < To; ++to) {
            int64_t t = to * st - pt + dt;
            bool t_ok = t >= 0 && t < Ti;
            for (int64_t ho = 0; ho < Ho; ++ho) {
              int64_t h = ho * sh - ph + dh;
              bool h_ok = h >= 0 && h < Hi;
              for (int64_t wo = 0; wo < Wo; ++wo) {
                int64_t w = wo * sw - pw + dw;
                *dst++ = (t_ok && h_ok && w >= 0 && w < Wi)
                             ? x[((c * Ti + t) * Hi + h) * Wi + w]
                             : S(0);
              }
            }
          }
          ++row;
        }
}

template <typename S>
void col2im_add(const S* col, const ConvGeom& g, S* dx) {
  const auto [Ti, Hi, Wi] = g.in;
  const auto [kt, kh, kw] = g.k;
  const auto [st, sh, sw] = g.stride;
  const auto [pt, ph, pw] = g.pad;
  const auto [To, Ho, Wo] = g.out;
  int64_t row = 0;
  for (int64_t c = 0; c < g.Cin; ++c)
    for (int64_t dt = 0; dt < kt; ++dt)
      for (int64_t dh = 0; dh < kh; ++dh)
        for (int64_t dw = 0; dw < kw; ++dw) {
          const S* src = col + row * g.L();
          for (int64_t to = 0; to < To; ++to) {
            int64_t t = to * st - pt + dt;
            bool t_ok = t >= 0 && t < Ti;
            for (int64_t ho = 0; ho < Ho; ++ho) {
              int64_t h = ho * sh - ph + dh;
              bool h_ok = h >= 0 && h < Hi;
              for (int64_t wo = 0; wo < Wo; ++wo) {
                int64_t w = wo * sw - pw + dw;
                if (t_ok && h_ok && w >= 0 && w < Wi)
                  dx[((c * Ti + t) * Hi + h) * Wi + w] += src[wo];
              }
              src += Wo;
            }
          }
          ++row;
        }
}

}  // namespace detail

// input [B, Cin, T, H, W], kernel [Cout, Cin, kt, kh, kw].
template <typename S>
Tensor<S> conv3d(const Tensor<S>& x, const Tensor<S>& w, Dims3 stride = {1, 1, 1},
                 Dims3 pad = {0, 0, 0}) {
  if (x.rank() != 5 || w.rank() != 5)
    throw std::invalid_argument("conv3d: expected rank-5 input and kernel");
  if (x.dim(1) != w.dim(1))
    throw std::invalid_argument("conv3d: channel mismatch, input Cin=" +
                                std::to_string(x.dim(1)) + " kernel Cin=" +
                                std::to_string(w.dim(1)));
  detail::ConvGeom g;
  g.B = x.dim(0);
  g.Cin = x.dim(1);
  g.Cout = w.dim(0);
  g.in = {x.dim(2), x.dim(3), x.dim(4)};
  g.k = {w.dim(2), w.dim(3), w.dim(4)};
  g.stride = stride;
  g.pad = pad;
  for (int i = 0; i < 3; ++i)
    g.out[i] = detail::conv_extent(g.in[i], g.k[i], stride[i], pad[i]);

  int64_t K = g.K(), L = g.L();
  int64_t in_sz = g.Cin * g.in[0] * g.in[1] * g.in[2];
  Shape oshape = {g.B, g.Cout, g.out[0], g.out[1], g.out[2]};
  std::vector<S> y(static_cast<size_t>(numel_of(oshape)));
  std::vector<S> col(static_cast<size_t>(K * L));
  for (int64_t b = 0; b < g.B; ++b) {
    detail::im2col(x.data() + b * in_sz, g, col.data());
    detail::gemm(w.data(), col.data(), y.data() + b * g.Cout * L, g.Cout, K, L, false,
                 false, false);
  }
  auto xn = x.node();
  auto wn = w.node();
  return detail::make_op<S>(
      std::move(oshape), std::move(y), {x, w}, [xn, wn, g](TensorNode<S>& self) {
        int64_t K = g.K(), L = g.L();
        int64_t in_sz = g.Cin * g.in[0] * g.in[1] * g.in[2];
        std::vector<S> col(static_cast<size_t>(K * L));
        std::vector<S> dcol;
        if (xn->requires_grad) {
          xn->ensure_grad();
          dcol.resize(static_cast<size_t>(K * L));
        }
        if (wn->requires_grad) wn->ensure_grad();
        for (int64_t b = 0; b < g.B; ++b) {
          const S* gy = self.grad.data() + b * g.Cout * L;
          if (wn->requires_grad) {
            // dW += dY * col^T  (col recomputed, not stored in the graph)
            detail::im2col(xn->value.data() + b * in_sz, g, col.data());
            detail::gemm(gy, col.data(), wn->grad.data(), g.Cout, L, K, false, true,
                         true);
          }
          if (xn->requires_grad) {
            detail::gemm(wn->value.data(), gy, dcol.data(), K, g.Cout, L, true, false,
                         false);
            detail::col2im_add(dcol.data(), g, xn->grad.data() + b * in_sz);
          }
        }
      });
}

using Dims2 = std::array<int64_t, 2>;

// input [B, Cin, H, W], kernel [Cout, Cin, kh, kw].
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, Dims2 stride = {1, 1},
                 Dims2 pad = {0, 0}) {
  if (x.rank() != 4 || w.rank() != 4)
    throw std::invalid_argument("conv2d: expected rank-4 input and kernel");
  auto x5 = reshape(x, {x.dim(0), x.dim(1), 1, x.dim(2), x.dim(3)});
  auto w5 = reshape(w, {w.dim(0), w.dim(1), 1, w.dim(2), w.dim(3)});
  auto y = conv3d(x5, w5, {1, stride[0], stride[1]}, {0, pad[0], pad[1]});
  return reshape(y, {y.dim(0), y.dim(1), y.dim(3), y.dim(4)});
}

// ---------------------------------------------------------------------------
// Bilinear upsampling (half-pixel centers)
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> upsample_bilinear(const Tensor<S>& x, int64_t Ho, int64_t Wo) {
  if (x.rank() != 4) throw std::invalid_argument("upsample_bilinear: expected [B,C,H,W]");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  struct Tap {
    int64_t i0, i1;
    S w1;  // weight of i1; i0 gets 1-w1
  };
  auto make_taps = [](int64_t in, int64_t out) {
    std::vector<Tap> taps(static_cast<size_t>(out));
    double scale = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t o = 0; o < out; ++o) {
      double s = (static_cast<double>(o) + 0.5) * scale - 0.5;
      if (s < 0) s = 0;
      int64_t i0 = static_cast<int64_t>(s);
      if (i0 > in - 1) i0 = in - 1;
      int64_t i1 = std::min(i0 + 1, in - 1);
      taps[o] = {i0, i1, static_cast<S>(s - static_cast<double>(i0))};
    }
    return taps;
  };
  std::vector<Tap> th = make_taps(H, Ho), tw = make_taps(W, Wo);
  Shape oshape = {B, C, Ho, Wo};
  std::vector<S> y(static_cast<size_t>(numel_of(oshape)));
  const S* xp = x.data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const S* src = xp + bc * H * W;
    S* dst = y.data() + bc * Ho * Wo;
    for (int64_t oy = 0; oy < Ho; ++oy) {
      const Tap& a = th[oy];
      for (int64_t ox = 0; ox < Wo; ++ox) {
        const Tap& b = tw[ox];
        S top = src[a.i0 * W + b.i0] * (S(1) - b.w1) + src[a.i0 * W + b.i1] * b.w1;
        S bot = src[a.i1 * W + b.i0] * (S(1) - b.w1) + src[a.i1 * W + b.i1] * b.w1;
        dst[oy * Wo + ox] = top * (S(1) - a.w1) + bot * a.w1;
      }
    }
  }
  auto xn = x.node();
  return detail::make_op<S>(
      std::move(oshape), std::move(y), {x},
      [xn, th, tw, B, C, H, W, Ho, Wo](TensorNode<S>& self) {
        xn->ensure_grad();
        const S* g = self.grad.data();
        for (int64_t bc = 0; bc < B * C; ++bc) {
          S* dx = xn->grad.data() + bc * H * W;
          const S* gs = g + bc * Ho * Wo;
          for (int64_t oy = 0; oy < Ho; ++oy) {
            const Tap& a = th[oy];
            for (int64_t ox = 0; ox < Wo; ++ox) {
              const Tap& b = tw[ox];
              S gv = gs[oy * Wo + ox];
              dx[a.i0 * W + b.i0] += gv * (S(1) - a.w1) * (S(1) - b.w1);
              dx[a.i0 * W + b.i1] += gv * (S(1) - a.w1) * b.w1;
              dx[a.i1 * W + b.i0] += gv * a.w1 * (S(1) - b.w1);
              dx[a.i1 * W + b.i1] += gv * a.w1 * b.w1;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization (composed from primitives)
// ---------------------------------------------------------------------------

// Normalizes over the last axis. gamma/beta have shape [d].
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-5)) {
  auto m = mean(x, {-1}, true);
  auto xc = sub(x, m);
  auto var = mean(mul(xc, xc), {-1}, true);
  auto xn = div(xc, sqrt(add_scalar(var, eps)));
  return add(mul(xn, gamma), beta);
}

// x [B, C, ...spatial]; gamma/beta [C]; groups must divide C.
template <typename S>
Tensor<S> group_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     int64_t groups, S eps = S(1e-5)) {
  if (x.rank() < 2) throw std::invalid_argument("group_norm: expected [B,C,...]");
  int64_t B = x.dim(0), C = x.dim(1);
  if (C % groups != 0)
    throw std::invalid_argument("group_norm: groups must divide channels");
  int64_t sp = x.numel() / (B * C);
  auto xg = reshape(x, {B, groups, (C / groups) * sp});
  auto m = mean(xg, {2}, true);
  auto xc = sub(xg, m);
  auto var = mean(mul(xc, xc), {2}, true);
  auto xn = div(xc, sqrt(add_scalar(var, eps)));
  auto back = reshape(xn, x.shape());
  Shape affine(x.rank(), 1);
  affine[1] = C;
  return add(mul(back, reshape(gamma, affine)), reshape(beta, affine));
}

// ---------------------------------------------------------------------------
// Scaled dot-product attention
// ---------------------------------------------------------------------------

template <typename S>
struct AttentionResult {
  Tensor<S> output;  // [Lq, d]
  Tensor<S> probs;   // [heads, Lq, Lk], rows sum to 1; detached diagnostic copy
};

namespace detail {

// Fused softmax(Q K^T) V over per-head batches. One graph node: only the
// probability buffer is retained for backward, instead of separate score and
// probability nodes each holding value and gradient buffers of size
// [h, Lq, Lk]. Inputs are [h, Lq, dh] / [h, Lk, dh] with the scale already
// folded into q.
// Reductions and exp run on a 64-byte aligned scratch row so that SIMD
// splits depend only on the row length, never on where the heap placed the
// buffer; results stay bitwise reproducible across calls.
template <typename S>
struct AlignedRow {
  explicit AlignedRow(int64_t n) : n_(n) {
    buf_ = static_cast<S*>(Eigen::internal::aligned_malloc(sizeof(S) * n));
  }
  ~AlignedRow() { Eigen::internal::aligned_free(buf_); }
  AlignedRow(const AlignedRow&) = delete;
  AlignedRow& operator=(const AlignedRow&) = delete;
  S* data() { return buf_; }
  Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>, Eigen::Aligned64> map() {
    return {buf_, n_};
  }
  int64_t n_;
  S* buf_;
};

template <typename S>
Tensor<S> attention_core(const Tensor<S>& qh, const Tensor<S>& kh, const Tensor<S>& vh,
                         std::shared_ptr<std::vector<S>>* probs_out) {
  int64_t h = qh.dim(0), Lq = qh.dim(1), dh = qh.dim(2), Lk = kh.dim(1);
  auto probs = std::make_shared<std::vector<S>>(static_cast<size_t>(h * Lq * Lk));
  std::vector<S> ctx(static_cast<size_t>(h * Lq * dh));
  AlignedRow<S> scratch(Lk);
  auto sm = scratch.map();
  for (int64_t b = 0; b < h; ++b) {
    S* p = probs->data() + b * Lq * Lk;
    gemm(qh.data() + b * Lq * dh, kh.data() + b * Lk * dh, p, Lq, dh, Lk, false, true,
         false);
    for (int64_t r = 0; r < Lq; ++r) {
      std::memcpy(scratch.data(), p + r * Lk, sizeof(S) * Lk);
      S mx = sm.maxCoeff();
      sm = (sm - mx).exp();
      sm *= S(1) / sm.sum();
      std::memcpy(p + r * Lk, scratch.data(), sizeof(S) * Lk);
    }
    gemm(p, vh.data() + b * Lk * dh, ctx.data() + b * Lq * dh, Lq, Lk, dh, false, false,
         false);
  }
  if (probs_out) *probs_out = probs;
  auto qn = qh.node();
  auto kn = kh.node();
  auto vn = vh.node();
  return make_op<S>(
      {h, Lq, dh}, std::move(ctx), {qh, kh, vh},
      [qn, kn, vn, probs, h, Lq, Lk, dh](TensorNode<S>& self) {
        std::vector<S> dp(static_cast<size_t>(Lq * Lk));
        bool need_qk = qn->requires_grad || kn->requires_grad;
        if (qn->requires_grad) qn->ensure_grad();
        if (kn->requires_grad) kn->ensure_grad();
        if (vn->requires_grad) vn->ensure_grad();
        AlignedRow<S> sp(Lk), sdp(Lk);
        auto spm = sp.map();
        auto sdpm = sdp.map();
        for (int64_t b = 0; b < h; ++b) {
          const S* p = probs->data() + b * Lq * Lk;
          const S* dctx = self.grad.data() + b * Lq * dh;
          if (vn->requires_grad) {
            // dV += P^T * dCtx
            gemm(p, dctx, vn->grad.data() + b * Lk * dh, Lk, Lq, dh, true, false, true);
          }
          if (need_qk) {
            // dP = dCtx * V^T, then transformed in place into dScores
            gemm(dctx, vn->value.data() + b * Lk * dh, dp.data(), Lq, dh, Lk, false,
                 true, false);
            for (int64_t r = 0; r < Lq; ++r) {
              std::memcpy(sp.data(), p + r * Lk, sizeof(S) * Lk);
              std::memcpy(sdp.data(), dp.data() + r * Lk, sizeof(S) * Lk);
              S dot = (sdpm * spm).sum();
              sdpm = spm * (sdpm - dot);
              std::memcpy(dp.data() + r * Lk, sdp.data(), sizeof(S) * Lk);
            }
            if (qn->requires_grad)
              gemm(dp.data(), kn->value.data() + b * Lk * dh,
                   qn->grad.data() + b * Lq * dh, Lq, Lk, dh, false, false, true);
            if (kn->requires_grad)
              gemm(dp.data(), qn->value.data() + b * Lq * dh,
                   kn->grad.data() + b * Lk * dh, Lk, Lq, dh, true, false, true);
          }
        }
      });
}

}  // namespace detail

// Softmax(q k^T / sqrt(d/heads)) v on pre-projected q [Lq,d], k/v [Lk,d].
// The 1/sqrt(dh) factor is folded into q before the head split.
template <typename S>
AttentionResult<S> scaled_dot_attention(const Tensor<S>& q, const Tensor<S>& k,
                                        const Tensor<S>& v, int64_t heads,
                                        bool want_probs = false) {
  int64_t Lq = q.dim(0), d = q.dim(1), Lk = k.dim(0);
  if (d % heads != 0)
    throw std::invalid_argument("attention: width not divisible by heads");
  int64_t dh = d / heads;
  auto split = [&](const Tensor<S>& t, int64_t L) {
    return permute(reshape(t, {L, heads, dh}), {1, 0, 2});  // [h, L, dh]
  };
  auto qs = mul_scalar(q, static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))));
  auto qh = split(qs, Lq);
  auto kh = split(k, Lk);
  auto vh = split(v, Lk);
  std::shared_ptr<std::vector<S>> probs_buf;
  auto ctx = detail::attention_core(qh, kh, vh, want_probs ? &probs_buf : nullptr);
  AttentionResult<S> res;
  res.output = reshape(permute(ctx, {1, 0, 2}), {Lq, d});
  if (want_probs)
    res.probs = Tensor<S>::from_data({heads, Lq, Lk}, std::move(*probs_buf));
  return res;
}

// Attention weights only (no value aggregation); used by the mask head.
template <typename S>
Tensor<S> attention_probs(const Tensor<S>& q, const Tensor<S>& k, int64_t heads) {
  int64_t Lq = q.dim(0), d = q.dim(1), Lk = k.dim(0);
  if (d % heads != 0)
    throw std::invalid_argument("attention: width not divisible by heads");
  int64_t dh = d / heads;
  auto qs = mul_scalar(q, static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))));
  auto qh = permute(reshape(qs, {Lq, heads, dh}), {1, 0, 2});
  auto kh = permute(reshape(k, {Lk, heads, dh}), {1, 0, 2});
  return softmax(matmul(qh, permute(kh, {0, 2, 1})), 2);  // [h, Lq, Lk]
}

}  // namespace vistr
