#include <algorithm>
#include <cmath>

#include "lobeseg/ops.hpp"

// Direct 3-D convolution kernels. Three access patterns cover forward and
// backward of both conv3d and conv_transpose3d:
//
//   corr:    dst[xd] += w * src[xd*s - p + k]   (conv fwd, tconv grad-input)
//   scatter: dst[xs*s - p + k] += w * src[xs]   (tconv fwd, conv grad-input)
//   wgrad:   gw[k] += sum_x A[x] * B[x*s - p + k]
//
// Stride-1 paths copy the source into a zero-padded buffer once, then run
// every kernel tap as one long fused loop over the whole (y,x) plane with no
// bounds checks; lanes that fall on padding either contribute exact zeros or
// land in scratch rows that are never copied out. The padded buffers carry
// one spare zeroed slice so tap offsets near the last slice stay in bounds.
// Strided cases take a generic per-row path. Each parallel slice owns a
// disjoint output region and accumulates in a fixed order, so results are
// identical for any worker count.

namespace lobeseg {

namespace {

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b, r = a % b;
  return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}
inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return -floor_div(-a, b); }

// Iteration range [lo,hi] over an axis of extent x_iter such that
// x_iter*s - p + k stays inside [0, x_target).
inline void tap_range(std::int64_t s, std::int64_t p, std::int64_t k, std::int64_t x_iter,
                      std::int64_t x_target, std::int64_t& lo, std::int64_t& hi) {
  lo = std::max<std::int64_t>(0, ceil_div(p - k, s));
  hi = std::min<std::int64_t>(x_iter - 1, floor_div(x_target - 1 + p - k, s));
}

struct Grid {
  std::int64_t d, h, w;
  std::int64_t plane() const { return d * h * w; }
};

template <class T>
struct Padded {
  std::vector<T> data;
  std::int64_t dp, hp, wp, m;
  std::int64_t slice() const { return hp * wp; }
  std::int64_t volume() const { return dp * hp * wp; }
};

// Pads into a frame at least as large as g so two operands with different
// extents can share one pitch (frame defaults to g itself).
template <class T>
Padded<T> pad_source(const T* src, Grid g, std::int64_t channels, std::int64_t n_count,
                     std::int64_t m, Grid frame) {
  Padded<T> p;
  p.m = m;
  p.dp = frame.d + 2 * m;
  p.hp = frame.h + 2 * m;
  p.wp = frame.w + 2 * m;
  p.data.assign(static_cast<std::size_t>(n_count * channels * p.volume() + p.slice()), T(0));
  for (std::int64_t nc = 0; nc < n_count * channels; ++nc) {
    const T* in_plane = src + nc * g.plane();
    T* out_plane = p.data.data() + nc * p.volume();
    for (std::int64_t z = 0; z < g.d; ++z)
      for (std::int64_t y = 0; y < g.h; ++y) {
        const T* in_row = in_plane + (z * g.h + y) * g.w;
        T* out_row = out_plane + ((z + m) * p.hp + (y + m)) * p.wp + m;
        std::copy(in_row, in_row + g.w, out_row);
      }
  }
  return p;
}

template <class T>
Padded<T> pad_source(const T* src, Grid g, std::int64_t channels, std::int64_t n_count,
                     std::int64_t m) {
  return pad_source(src, g, channels, n_count, m, g);
}

// Shared stride-1 engine: every tap is a constant linear offset into the
// padded plane. kIsCorr selects the correlation orientation (conv forward);
// the adjoint scatter uses mirrored taps and src-major weight layout.
template <class T, bool kIsCorr>
void fused_s1(const Padded<T>& ps, std::int64_t cs_count, const T* w, std::int64_t k,
              const T* bias, T* dst, Grid gd, std::int64_t cd_count, std::int64_t n_count,
              std::int64_t p) {
  std::int64_t wp = ps.wp;
  std::int64_t fused_len = (gd.h - 1) * wp + gd.w;
  parallel_for(n_count * cd_count * gd.d, [&](std::int64_t lo_j, std::int64_t hi_j) {
    std::vector<T> acc(static_cast<std::size_t>((gd.h - 1) * wp + gd.w));
    for (std::int64_t j = lo_j; j < hi_j; ++j) {
      std::int64_t zd = j % gd.d;
      std::int64_t cd = (j / gd.d) % cd_count;
      std::int64_t n = j / (gd.d * cd_count);
      std::fill(acc.begin(), acc.end(), bias ? bias[cd] : T(0));
      T* __restrict accp = acc.data();
      for (std::int64_t cs = 0; cs < cs_count; ++cs) {
        const T* chan = ps.data.data() + (n * cs_count + cs) * ps.volume();
        const T* wbase =
            w + (kIsCorr ? (cd * cs_count + cs) : (cs * cd_count + cd)) * k * k * k;
        for (std::int64_t kz = 0; kz < k; ++kz) {
          std::int64_t zp = kIsCorr ? zd + ps.m - p + kz : zd + ps.m + p - kz;
          const T* slice = chan + zp * ps.slice();
          for (std::int64_t ky = 0; ky < k; ++ky) {
            std::int64_t yoff = kIsCorr ? ps.m - p + ky : ps.m + p - ky;
            const T* wrow = wbase + (kz * k + ky) * k;
            for (std::int64_t kx = 0; kx < k; ++kx) {
              std::int64_t xoff = kIsCorr ? ps.m - p + kx : ps.m + p - kx;
              const T* __restrict sp = slice + yoff * wp + xoff;
              T wv = wrow[kx];
              for (std::int64_t i = 0; i < fused_len; ++i) accp[i] += wv * sp[i];
            }
          }
        }
      }
      for (std::int64_t yd = 0; yd < gd.h; ++yd) {
        const T* arow = accp + yd * wp;
        T* drow = dst + (((n * cd_count + cd) * gd.d + zd) * gd.h + yd) * gd.w;
        std::copy(arow, arow + gd.w, drow);
      }
    }
  }, 1);
}

// dst[n,cd,:] = bias[cd] + sum_cs w[cd,cs,:] (*) src[n,cs,:]
template <class T>
void corr_kernel(const T* src, Grid gs, std::int64_t cs_count, const T* w, std::int64_t k,
                 const T* bias, T* dst, Grid gd, std::int64_t cd_count, std::int64_t n_count,
                 std::int64_t s, std::int64_t p) {
  if (s == 1) {
    std::int64_t m = std::max<std::int64_t>(p, k - 1 - p);
    Padded<T> ps = pad_source(src, gs, cs_count, n_count, m);
    fused_s1<T, true>(ps, cs_count, w, k, bias, dst, gd, cd_count, n_count, p);
    return;
  }
  parallel_for(n_count * gd.d, [&](std::int64_t lo_j, std::int64_t hi_j) {
    for (std::int64_t j = lo_j; j < hi_j; ++j) {
      std::int64_t n = j / gd.d, zd = j % gd.d;
      for (std::int64_t cd = 0; cd < cd_count; ++cd) {
        T* drow0 = dst + ((n * cd_count + cd) * gd.d + zd) * gd.h * gd.w;
        std::fill(drow0, drow0 + gd.h * gd.w, bias ? bias[cd] : T(0));
      }
      for (std::int64_t cs = 0; cs < cs_count; ++cs) {
        const T* splane = src + (n * cs_count + cs) * gs.plane();
        for (std::int64_t kz = 0; kz < k; ++kz) {
          std::int64_t zs = zd * s - p + kz;
          if (zs < 0 || zs >= gs.d) continue;
          for (std::int64_t ky = 0; ky < k; ++ky) {
            std::int64_t ylo, yhi;
            tap_range(s, p, ky, gd.h, gs.h, ylo, yhi);
            for (std::int64_t yd = ylo; yd <= yhi; ++yd) {
              std::int64_t ys = yd * s - p + ky;
              const T* srow = splane + (zs * gs.h + ys) * gs.w;
              for (std::int64_t kx = 0; kx < k; ++kx) {
                std::int64_t xlo, xhi;
                tap_range(s, p, kx, gd.w, gs.w, xlo, xhi);
                if (xlo > xhi) continue;
                const T* __restrict sx = srow + (xlo * s - p + kx);
                std::int64_t count = xhi - xlo + 1;
                for (std::int64_t cd = 0; cd < cd_count; ++cd) {
                  T wv = w[(((cd * cs_count + cs) * k + kz) * k + ky) * k + kx];
                  T* __restrict drow =
                      dst + (((n * cd_count + cd) * gd.d + zd) * gd.h + yd) * gd.w + xlo;
                  for (std::int64_t x = 0; x < count; ++x) drow[x] += wv * sx[x * s];
                }
              }
            }
          }
        }
      }
    }
  }, 1);
}

// dst[n,cd,:] = bias[cd] + sum_cs w[cs,cd,:] scattered from src[n,cs,:]
template <class T>
void scatter_kernel(const T* src, Grid gs, std::int64_t cs_count, const T* w, std::int64_t k,
                    const T* bias, T* dst, Grid gd, std::int64_t cd_count, std::int64_t n_count,
                    std::int64_t s, std::int64_t p) {
  if (s == 1) {
    std::int64_t m = std::max<std::int64_t>(p, k - 1 - p);
    Padded<T> ps = pad_source(src, gs, cs_count, n_count, m);
    fused_s1<T, false>(ps, cs_count, w, k, bias, dst, gd, cd_count, n_count, p);
    return;
  }
  parallel_for(n_count * gd.d, [&](std::int64_t lo_j, std::int64_t hi_j) {
    for (std::int64_t j = lo_j; j < hi_j; ++j) {
      std::int64_t n = j / gd.d, zd = j % gd.d;
      for (std::int64_t cd = 0; cd < cd_count; ++cd) {
        T* drow0 = dst + ((n * cd_count + cd) * gd.d + zd) * gd.h * gd.w;
        std::fill(drow0, drow0 + gd.h * gd.w, bias ? bias[cd] : T(0));
      }
      for (std::int64_t cs = 0; cs < cs_count; ++cs) {
        const T* splane = src + (n * cs_count + cs) * gs.plane();
        for (std::int64_t kz = 0; kz < k; ++kz) {
          std::int64_t tz = zd + p - kz;
          if (tz % s != 0) continue;
          std::int64_t zs = tz / s;
          if (zs < 0 || zs >= gs.d) continue;
          for (std::int64_t ky = 0; ky < k; ++ky) {
            std::int64_t ylo, yhi;
            tap_range(s, p, ky, gs.h, gd.h, ylo, yhi);
            for (std::int64_t ys = ylo; ys <= yhi; ++ys) {
              std::int64_t yd = ys * s - p + ky;
              const T* srow = splane + (zs * gs.h + ys) * gs.w;
              for (std::int64_t kx = 0; kx < k; ++kx) {
                std::int64_t xlo, xhi;
                tap_range(s, p, kx, gs.w, gd.w, xlo, xhi);
                if (xlo > xhi) continue;
                std::int64_t count = xhi - xlo + 1;
                std::int64_t dbase = xlo * s - p + kx;
                for (std::int64_t cd = 0; cd < cd_count; ++cd) {
                  T wv = w[(((cs * cd_count + cd) * k + kz) * k + ky) * k + kx];
                  T* __restrict drow =
                      dst + (((n * cd_count + cd) * gd.d + zd) * gd.h + yd) * gd.w + dbase;
                  const T* __restrict sx = srow + xlo;
                  for (std::int64_t x = 0; x < count; ++x) drow[x * s] += wv * sx[x];
                }
              }
            }
          }
        }
      }
    }
  }, 1);
}

// gw[ca,cb,:] += sum_n sum_x A[n,ca,x] * B[n,cb,x*s-p+k]; gw pre-zeroed by
// the caller. The stride-1 path pads both operands (zeros cancel off-range
// taps exactly) and reduces each tap with a fixed 16-lane partial-sum
// scheme, which vectorizes without reassociating a serial chain.
template <class T>
void wgrad_kernel(const T* a, Grid ga, std::int64_t ca_count, const T* bsrc, Grid gb,
                  std::int64_t cb_count, T* gw, std::int64_t k, std::int64_t n_count,
                  std::int64_t s, std::int64_t p) {
  std::int64_t k3 = k * k * k;
  if (s == 1) {
    std::int64_t m = std::max<std::int64_t>(p, k - 1 - p);
    Grid frame{std::max(ga.d, gb.d), std::max(ga.h, gb.h), std::max(ga.w, gb.w)};
    Padded<T> pa = pad_source(a, ga, ca_count, n_count, m, frame);
    Padded<T> pb = pad_source(bsrc, gb, cb_count, n_count, m, frame);
    std::int64_t row_span = ga.h * pa.wp;  // true A rows of one slice
    parallel_for(ca_count, [&](std::int64_t lo_c, std::int64_t hi_c) {
      constexpr int kLanes = 16;
      T part[kLanes];
      for (std::int64_t ca = lo_c; ca < hi_c; ++ca) {
        for (std::int64_t cb = 0; cb < cb_count; ++cb) {
          for (std::int64_t kz = 0; kz < k; ++kz)
            for (std::int64_t ky = 0; ky < k; ++ky)
              for (std::int64_t kx = 0; kx < k; ++kx) {
                for (int l = 0; l < kLanes; ++l) part[l] = 0;
                std::int64_t boff = (kz - p) * pb.slice() + (ky - p) * pb.wp + (kx - p);
                for (std::int64_t n = 0; n < n_count; ++n) {
                  const T* ap = pa.data.data() + (n * ca_count + ca) * pa.volume();
                  const T* bp = pb.data.data() + (n * cb_count + cb) * pb.volume() + boff;
                  for (std::int64_t z = 0; z < ga.d; ++z) {
                    std::int64_t base = (z + m) * pa.slice() + m * pa.wp;
                    const T* __restrict arow = ap + base;
                    const T* __restrict brow = bp + base;
                    std::int64_t i = 0;
                    for (; i + kLanes <= row_span; i += kLanes)
                      for (int l = 0; l < kLanes; ++l) part[l] += arow[i + l] * brow[i + l];
                    for (; i < row_span; ++i) part[0] += arow[i] * brow[i];
                  }
                }
                T sum = 0;
                for (int l = 0; l < kLanes; ++l) sum += part[l];
                gw[(ca * cb_count + cb) * k3 + (kz * k + ky) * k + kx] += sum;
              }
        }
      }
    }, 1);
    return;
  }

  parallel_for(ca_count, [&](std::int64_t lo_c, std::int64_t hi_c) {
    std::vector<T> acc(static_cast<std::size_t>(k3 * ga.w));
    for (std::int64_t ca = lo_c; ca < hi_c; ++ca) {
      for (std::int64_t cb = 0; cb < cb_count; ++cb) {
        std::fill(acc.begin(), acc.end(), T(0));
        for (std::int64_t n = 0; n < n_count; ++n) {
          const T* aplane = a + (n * ca_count + ca) * ga.plane();
          const T* bplane = bsrc + (n * cb_count + cb) * gb.plane();
          for (std::int64_t kz = 0; kz < k; ++kz) {
            std::int64_t zlo, zhi;
            tap_range(s, p, kz, ga.d, gb.d, zlo, zhi);
            for (std::int64_t za = zlo; za <= zhi; ++za) {
              std::int64_t zb = za * s - p + kz;
              for (std::int64_t ky = 0; ky < k; ++ky) {
                std::int64_t ylo, yhi;
                tap_range(s, p, ky, ga.h, gb.h, ylo, yhi);
                for (std::int64_t ya = ylo; ya <= yhi; ++ya) {
                  std::int64_t yb = ya * s - p + ky;
                  const T* arow = aplane + (za * ga.h + ya) * ga.w;
                  const T* brow = bplane + (zb * gb.h + yb) * gb.w;
                  for (std::int64_t kx = 0; kx < k; ++kx) {
                    std::int64_t xlo, xhi;
                    tap_range(s, p, kx, ga.w, gb.w, xlo, xhi);
                    if (xlo > xhi) continue;
                    const T* __restrict bx = brow + (xlo * s - p + kx);
                    const T* __restrict ax = arow + xlo;
                    T* __restrict arow_acc = acc.data() + ((kz * k + ky) * k + kx) * ga.w;
                    std::int64_t count = xhi - xlo + 1;
                    for (std::int64_t x = 0; x < count; ++x)
                      arow_acc[x] += ax[x] * bx[x * s];
                  }
                }
              }
            }
          }
        }
        T* gwp = gw + (ca * cb_count + cb) * k3;
        for (std::int64_t t = 0; t < k3; ++t) {
          T sum = 0;
          const T* row = acc.data() + t * ga.w;
          for (std::int64_t x = 0; x < ga.w; ++x) sum += row[x];
          gwp[t] += sum;
        }
      }
    }
  }, 1);
}

template <class T>
void bias_grad(const T* gout, std::int64_t n_count, std::int64_t c_count, std::int64_t sp,
               T* gb) {
  for (std::int64_t n = 0; n < n_count; ++n)
    for (std::int64_t c = 0; c < c_count; ++c) {
      const T* plane = gout + (n * c_count + c) * sp;
      T s = 0;
      for (std::int64_t i = 0; i < sp; ++i) s += plane[i];
      gb[c] += s;
    }
}

struct ConvDims {
  std::int64_t n, ci, co, k, s, p;
  Grid in, out;
};

template <class T>
ConvDims check_conv_args(const char* op, const Tensor<T>& input, const Tensor<T>& weight,
                         const Tensor<T>& bias, int stride, int padding, bool transpose) {
  if (input.ndim() != 5)
    throw DimensionError(concat(op, ": input must be 5-D [N,C,D,H,W], got ",
                                shape_str(input.shape())));
  if (weight.ndim() != 5)
    throw DimensionError(concat(op, ": weight must be 5-D, got ", shape_str(weight.shape())));
  if (weight.dim(2) != weight.dim(3) || weight.dim(2) != weight.dim(4))
    throw DimensionError(concat(op, ": only cubic kernels are supported, got ",
                                shape_str(weight.shape())));
  if (stride < 1) throw ValueError(concat(op, ": stride must be >= 1, got ", stride));
  if (padding < 0) throw ValueError(concat(op, ": padding must be >= 0, got ", padding));

  ConvDims d;
  d.n = input.dim(0);
  d.k = weight.dim(2);
  d.s = stride;
  d.p = padding;
  d.in = {input.dim(2), input.dim(3), input.dim(4)};

  std::int64_t w_in_channels = transpose ? weight.dim(0) : weight.dim(1);
  if (input.dim(1) != w_in_channels)
    throw DimensionError(concat(op, ": input channels of ", shape_str(input.shape()),
                                " do not match weight ", shape_str(weight.shape())));
  d.ci = input.dim(1);
  d.co = transpose ? weight.dim(1) : weight.dim(0);
  if (bias.ndim() != 1 || bias.numel() != d.co)
    throw DimensionError(concat(op, ": bias must be [", d.co, "], got ",
                                shape_str(bias.shape())));

  auto out_edge = [&](std::int64_t x) {
    return transpose ? (x - 1) * d.s - 2 * d.p + d.k : (x + 2 * d.p - d.k) / d.s + 1;
  };
  if (!transpose && (d.in.d + 2 * d.p < d.k || d.in.h + 2 * d.p < d.k || d.in.w + 2 * d.p < d.k))
    throw DimensionError(concat(op, ": kernel size ", d.k, " exceeds padded input ",
                                shape_str(input.shape()), " with padding ", d.p));
  d.out = {out_edge(d.in.d), out_edge(d.in.h), out_edge(d.in.w)};
  if (d.out.d < 1 || d.out.h < 1 || d.out.w < 1)
    throw DimensionError(concat(op, ": computed non-positive output dims for input ",
                                shape_str(input.shape())));
  return d;
}

}  // namespace

template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding) {
  ConvDims d = check_conv_args("conv3d", input, weight, bias, stride, padding, false);
  std::vector<T> out(static_cast<std::size_t>(d.n * d.co * d.out.plane()));
  corr_kernel(input.data().data(), d.in, d.ci, weight.data().data(), d.k, bias.data().data(),
              out.data(), d.out, d.co, d.n, d.s, d.p);

  auto bwd = [d](TapeNode<T>& nd) {
    auto& xin = *nd.inputs[0];
    auto& win = *nd.inputs[1];
    auto& bin = *nd.inputs[2];
    const T* gout = nd.grad.data();
    if (xin.requires_grad) {
      xin.ensure_grad();
      std::vector<T> gin(xin.value.size(), T(0));
      scatter_kernel(gout, d.out, d.co, win.value.data(), d.k, static_cast<const T*>(nullptr),
                     gin.data(), d.in, d.ci, d.n, d.s, d.p);
      for (std::size_t i = 0; i < gin.size(); ++i) xin.grad[i] += gin[i];
    }
    if (win.requires_grad) {
      win.ensure_grad();
      wgrad_kernel(gout, d.out, d.co, xin.value.data(), d.in, d.ci, win.grad.data(), d.k, d.n,
                   d.s, d.p);
    }
    if (bin.requires_grad) {
      bin.ensure_grad();
      bias_grad(gout, d.n, d.co, d.out.plane(), bin.grad.data());
    }
  };

  auto node = std::make_shared<TapeNode<T>>();
  node->shape = {d.n, d.co, d.out.d, d.out.h, d.out.w};
  node->value = std::move(out);
  node->op = "conv3d";
  bool wants = input.requires_grad() || weight.requires_grad() || bias.requires_grad();
  if (GradMode::enabled() && wants) {
    node->requires_grad = true;
    node->inputs = {input.node(), weight.node(), bias.node()};
    node->backward_fn = bwd;
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> conv_transpose3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           int stride, int padding) {
  ConvDims d = check_conv_args("conv_transpose3d", input, weight, bias, stride, padding, true);
  std::vector<T> out(static_cast<std::size_t>(d.n * d.co * d.out.plane()));
  scatter_kernel(input.data().data(), d.in, d.ci, weight.data().data(), d.k, bias.data().data(),
                 out.data(), d.out, d.co, d.n, d.s, d.p);

  auto bwd = [d](TapeNode<T>& nd) {
    auto& xin = *nd.inputs[0];
    auto& win = *nd.inputs[1];
    auto& bin = *nd.inputs[2];
    const T* gout = nd.grad.data();
    if (xin.requires_grad) {
      xin.ensure_grad();
      std::vector<T> gin(xin.value.size(), T(0));
      corr_kernel(gout, d.out, d.co, win.value.data(), d.k, static_cast<const T*>(nullptr),
                  gin.data(), d.in, d.ci, d.n, d.s, d.p);
      for (std::size_t i = 0; i < gin.size(); ++i) xin.grad[i] += gin[i];
    }
    if (win.requires_grad) {
      win.ensure_grad();
      wgrad_kernel(xin.value.data(), d.in, d.ci, gout, d.out, d.co, win.grad.data(), d.k, d.n,
                   d.s, d.p);
    }
    if (bin.requires_grad) {
      bin.ensure_grad();
      bias_grad(gout, d.n, d.co, d.out.plane(), bin.grad.data());
    }
  };

  auto node = std::make_shared<TapeNode<T>>();
  node->shape = {d.n, d.co, d.out.d, d.out.h, d.out.w};
  node->value = std::move(out);
  node->op = "conv_transpose3d";
  bool wants = input.requires_grad() || weight.requires_grad() || bias.requires_grad();
  if (GradMode::enabled() && wants) {
    node->requires_grad = true;
    node->inputs = {input.node(), weight.node(), bias.node()};
    node->backward_fn = bwd;
  }
  return Tensor<T>(std::move(node));
}

template Tensor<float> conv3d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                              int, int);
template Tensor<double> conv3d(const Tensor<double>&, const Tensor<double>&,
                               const Tensor<double>&, int, int);
template Tensor<float> conv_transpose3d(const Tensor<float>&, const Tensor<float>&,
                                        const Tensor<float>&, int, int);
template Tensor<double> conv_transpose3d(const Tensor<double>&, const Tensor<double>&,
                                         const Tensor<double>&, int, int);

}  // namespace lobeseg
