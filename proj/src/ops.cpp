#include "lobeseg/ops.hpp"

#include <algorithm>
#include <cmath>

namespace lobeseg {

namespace {

template <class T>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> value,
                  std::vector<NodePtr<T>> inputs, std::function<void(TapeNode<T>&)> bwd) {
  auto node = std::make_shared<TapeNode<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = name;
  bool wants_grad = false;
  for (const auto& in : inputs) wants_grad = wants_grad || in->requires_grad;
  if (GradMode::enabled() && wants_grad) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(bwd);
  }
  return Tensor<T>(std::move(node));
}

template <class T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(concat(op, ": shape mismatch ", shape_str(a.shape()), " vs ",
                                shape_str(b.shape())));
}

template <class T>
void accumulate(TapeNode<T>& dst, const T* src, std::size_t n) {
  dst.ensure_grad();
  T* g = dst.grad.data();
  for (std::size_t i = 0; i < n; ++i) g[i] += src[i];
}

// Layout of a [N,C,spatial...] tensor collapsed to three extents.
struct Ncs {
  std::int64_t n, c, sp;
};

template <class T>
Ncs ncs_of(const char* op, const Tensor<T>& x) {
  if (x.ndim() < 2)
    throw DimensionError(concat(op, ": expected at least 2-D [N,C,...], got ",
                                shape_str(x.shape())));
  Ncs r{x.dim(0), x.dim(1), 1};
  for (int i = 2; i < x.ndim(); ++i) r.sp *= x.dim(i);
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("add", a, b);
  std::vector<T> out(a.data().begin(), a.data().end());
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  return make_op<T>("add", a.shape(), std::move(out), {a.node(), b.node()},
                    [](TapeNode<T>& n) {
                      for (int k = 0; k < 2; ++k)
                        if (n.inputs[k]->requires_grad)
                          accumulate(*n.inputs[k], n.grad.data(), n.grad.size());
                    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("sub", a, b);
  std::vector<T> out(a.data().begin(), a.data().end());
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  return make_op<T>("sub", a.shape(), std::move(out), {a.node(), b.node()},
                    [](TapeNode<T>& n) {
                      if (n.inputs[0]->requires_grad)
                        accumulate(*n.inputs[0], n.grad.data(), n.grad.size());
                      if (n.inputs[1]->requires_grad) {
                        n.inputs[1]->ensure_grad();
                        T* g = n.inputs[1]->grad.data();
                        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
                      }
                    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("mul", a, b);
  std::vector<T> out(a.numel());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  return make_op<T>("mul", a.shape(), std::move(out), {a.node(), b.node()},
                    [](TapeNode<T>& n) {
                      const T* va = n.inputs[0]->value.data();
                      const T* vb = n.inputs[1]->value.data();
                      if (n.inputs[0]->requires_grad) {
                        n.inputs[0]->ensure_grad();
                        T* g = n.inputs[0]->grad.data();
                        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * vb[i];
                      }
                      if (n.inputs[1]->requires_grad) {
                        n.inputs[1]->ensure_grad();
                        T* g = n.inputs[1]->grad.data();
                        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * va[i];
                      }
                    });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("div", a, b);
  std::vector<T> out(a.numel());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] / pb[i];
  return make_op<T>("div", a.shape(), std::move(out), {a.node(), b.node()},
                    [](TapeNode<T>& n) {
                      const T* va = n.inputs[0]->value.data();
                      const T* vb = n.inputs[1]->value.data();
                      if (n.inputs[0]->requires_grad) {
                        n.inputs[0]->ensure_grad();
                        T* g = n.inputs[0]->grad.data();
                        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] / vb[i];
                      }
                      if (n.inputs[1]->requires_grad) {
                        n.inputs[1]->ensure_grad();
                        T* g = n.inputs[1]->grad.data();
                        for (std::size_t i = 0; i < n.grad.size(); ++i)
                          g[i] -= n.grad[i] * va[i] / (vb[i] * vb[i]);
                      }
                    });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += c;
  return make_op<T>("add_scalar", a.shape(), std::move(out), {a.node()},
                    [](TapeNode<T>& n) {
                      if (n.inputs[0]->requires_grad)
                        accumulate(*n.inputs[0], n.grad.data(), n.grad.size());
                    });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= c;
  return make_op<T>("mul_scalar", a.shape(), std::move(out), {a.node()},
                    [c](TapeNode<T>& n) {
                      if (!n.inputs[0]->requires_grad) return;
                      n.inputs[0]->ensure_grad();
                      T* g = n.inputs[0]->grad.data();
                      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * c;
                    });
}

// ---------------------------------------------------------------------------
// reductions

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  return make_op<T>("sum_all", {1}, {s}, {a.node()},
                    [](TapeNode<T>& n) {
                      if (!n.inputs[0]->requires_grad) return;
                      n.inputs[0]->ensure_grad();
                      T g = n.grad[0];
                      for (auto& v : n.inputs[0]->grad) v += g;
                    });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  T inv = T(1) / static_cast<T>(a.numel());
  return make_op<T>("mean_all", {1}, {s * inv}, {a.node()},
                    [inv](TapeNode<T>& n) {
                      if (!n.inputs[0]->requires_grad) return;
                      n.inputs[0]->ensure_grad();
                      T g = n.grad[0] * inv;
                      for (auto& v : n.inputs[0]->grad) v += g;
                    });
}

template <class T>
Tensor<T> sum_per_channel(const Tensor<T>& a) {
  Ncs d = ncs_of("sum_per_channel", a);
  std::vector<T> out(static_cast<std::size_t>(d.c), T(0));
  const T* p = a.data().data();
  for (std::int64_t n = 0; n < d.n; ++n)
    for (std::int64_t c = 0; c < d.c; ++c) {
      const T* plane = p + (n * d.c + c) * d.sp;
      T s = 0;
      for (std::int64_t i = 0; i < d.sp; ++i) s += plane[i];
      out[static_cast<std::size_t>(c)] += s;
    }
  return make_op<T>("sum_per_channel", {d.c}, std::move(out), {a.node()},
                    [d](TapeNode<T>& n) {
                      if (!n.inputs[0]->requires_grad) return;
                      n.inputs[0]->ensure_grad();
                      T* g = n.inputs[0]->grad.data();
                      for (std::int64_t b = 0; b < d.n; ++b)
                        for (std::int64_t c = 0; c < d.c; ++c) {
                          T gc = n.grad[static_cast<std::size_t>(c)];
                          T* plane = g + (b * d.c + c) * d.sp;
                          for (std::int64_t i = 0; i < d.sp; ++i) plane[i] += gc;
                        }
                    });
}

// ---------------------------------------------------------------------------
// structure

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  Ncs da = ncs_of("concat_channels", a);
  Ncs db = ncs_of("concat_channels", b);
  if (a.ndim() != b.ndim() || da.n != db.n || da.sp != db.sp)
    throw DimensionError(concat("concat_channels: incompatible shapes ", shape_str(a.shape()),
                                " vs ", shape_str(b.shape())));
  for (int i = 2; i < a.ndim(); ++i)
    if (a.dim(i) != b.dim(i))
      throw DimensionError(concat("concat_channels: incompatible shapes ", shape_str(a.shape()),
                                  " vs ", shape_str(b.shape())));
  Shape out_shape = a.shape();
  out_shape[1] = da.c + db.c;
  std::vector<T> out(static_cast<std::size_t>(da.n * (da.c + db.c) * da.sp));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::int64_t n = 0; n < da.n; ++n) {
    T* dst = out.data() + n * (da.c + db.c) * da.sp;
    std::copy(pa + n * da.c * da.sp, pa + (n + 1) * da.c * da.sp, dst);
    std::copy(pb + n * db.c * db.sp, pb + (n + 1) * db.c * db.sp, dst + da.c * da.sp);
  }
  return make_op<T>("concat_channels", std::move(out_shape), std::move(out),
                    {a.node(), b.node()},
                    [da, db](TapeNode<T>& n) {
                      std::int64_t cs = da.c + db.c;
                      if (n.inputs[0]->requires_grad) {
                        n.inputs[0]->ensure_grad();
                        T* g = n.inputs[0]->grad.data();
                        for (std::int64_t b = 0; b < da.n; ++b) {
                          const T* src = n.grad.data() + b * cs * da.sp;
                          T* dst = g + b * da.c * da.sp;
                          for (std::int64_t i = 0; i < da.c * da.sp; ++i) dst[i] += src[i];
                        }
                      }
                      if (n.inputs[1]->requires_grad) {
                        n.inputs[1]->ensure_grad();
                        T* g = n.inputs[1]->grad.data();
                        for (std::int64_t b = 0; b < da.n; ++b) {
                          const T* src = n.grad.data() + (b * cs + da.c) * da.sp;
                          T* dst = g + b * db.c * db.sp;
                          for (std::int64_t i = 0; i < db.c * db.sp; ++i) dst[i] += src[i];
                        }
                      }
                    });
}

template <class T>
Tensor<T> slice_range(const Tensor<T>& a, std::int64_t begin, std::int64_t end) {
  if (a.ndim() != 1)
    throw DimensionError(concat("slice_range: expected 1-D tensor, got ", shape_str(a.shape())));
  if (begin < 0 || end > a.numel() || begin >= end)
    throw ValueError(concat("slice_range: invalid range [", begin, ",", end, ") for length ",
                            a.numel()));
  std::vector<T> out(a.data().begin() + begin, a.data().begin() + end);
  return make_op<T>("slice_range", {end - begin}, std::move(out), {a.node()},
                    [begin](TapeNode<T>& n) {
                      if (!n.inputs[0]->requires_grad) return;
                      n.inputs[0]->ensure_grad();
                      T* g = n.inputs[0]->grad.data();
                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                        g[static_cast<std::size_t>(begin) + i] += n.grad[i];
                    });
}

// ---------------------------------------------------------------------------
// activations

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const T* p = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    T v = p[i];
    if (v >= 0) {
      T e = std::exp(-v);
      out[i] = T(1) / (T(1) + e);
    } else {
      T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  return make_op<T>("sigmoid", x.shape(), std::move(out), {x.node()},
                    [](TapeNode<T>& n) {
                      if (!n.inputs[0]->requires_grad) return;
                      n.inputs[0]->ensure_grad();
                      T* g = n.inputs[0]->grad.data();
                      const T* s = n.value.data();
                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                        g[i] += n.grad[i] * s[i] * (T(1) - s[i]);
                    });
}

template <class T>
Tensor<T> prelu(const Tensor<T>& x, const Tensor<T>& slopes) {
  Ncs d = ncs_of("prelu", x);
  if (slopes.numel() != d.c)
    throw DimensionError(concat("prelu: expected ", d.c, " per-channel slopes, got ",
                                shape_str(slopes.shape())));
  std::vector<T> out(x.numel());
  const T* p = x.data().data();
  const T* a = slopes.data().data();
  for (std::int64_t n = 0; n < d.n; ++n)
    for (std::int64_t c = 0; c < d.c; ++c) {
      const T* in = p + (n * d.c + c) * d.sp;
      T* o = out.data() + (n * d.c + c) * d.sp;
      T ac = a[c];
      for (std::int64_t i = 0; i < d.sp; ++i) o[i] = in[i] >= 0 ? in[i] : ac * in[i];
    }
  return make_op<T>("prelu", x.shape(), std::move(out), {x.node(), slopes.node()},
                    [d](TapeNode<T>& n) {
                      const T* xv = n.inputs[0]->value.data();
                      const T* av = n.inputs[1]->value.data();
                      if (n.inputs[0]->requires_grad) {
                        n.inputs[0]->ensure_grad();
                        T* g = n.inputs[0]->grad.data();
                        for (std::int64_t b = 0; b < d.n; ++b)
                          for (std::int64_t c = 0; c < d.c; ++c) {
                            std::int64_t base = (b * d.c + c) * d.sp;
                            T ac = av[c];
                            for (std::int64_t i = 0; i < d.sp; ++i)
                              g[base + i] += n.grad[base + i] * (xv[base + i] >= 0 ? T(1) : ac);
                          }
                      }
                      if (n.inputs[1]->requires_grad) {
                        n.inputs[1]->ensure_grad();
                        T* g = n.inputs[1]->grad.data();
                        for (std::int64_t b = 0; b < d.n; ++b)
                          for (std::int64_t c = 0; c < d.c; ++c) {
                            std::int64_t base = (b * d.c + c) * d.sp;
                            T s = 0;
                            for (std::int64_t i = 0; i < d.sp; ++i)
                              if (xv[base + i] < 0) s += n.grad[base + i] * xv[base + i];
                            g[c] += s;
                          }
                      }
                    });
}

// Channel-outer passes keep memory access sequential for large spatial dims.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  Ncs d = ncs_of("softmax_channels", x);
  std::vector<T> out(x.numel());
  std::vector<T> acc(static_cast<std::size_t>(d.sp));
  const T* p = x.data().data();
  for (std::int64_t n = 0; n < d.n; ++n) {
    const T* in = p + n * d.c * d.sp;
    T* o = out.data() + n * d.c * d.sp;
    std::copy(in, in + d.sp, acc.data());  // per-voxel max
    for (std::int64_t c = 1; c < d.c; ++c) {
      const T* row = in + c * d.sp;
      for (std::int64_t i = 0; i < d.sp; ++i) acc[i] = std::max(acc[i], row[i]);
    }
    for (std::int64_t c = 0; c < d.c; ++c) {
      const T* row = in + c * d.sp;
      T* orow = o + c * d.sp;
      for (std::int64_t i = 0; i < d.sp; ++i) orow[i] = std::exp(row[i] - acc[i]);
    }
    std::fill(acc.begin(), acc.end(), T(0));
    for (std::int64_t c = 0; c < d.c; ++c) {
      const T* orow = o + c * d.sp;
      for (std::int64_t i = 0; i < d.sp; ++i) acc[i] += orow[i];
    }
    for (std::int64_t i = 0; i < d.sp; ++i) acc[i] = T(1) / acc[i];
    for (std::int64_t c = 0; c < d.c; ++c) {
      T* orow = o + c * d.sp;
      for (std::int64_t i = 0; i < d.sp; ++i) orow[i] *= acc[i];
    }
  }
  return make_op<T>("softmax_channels", x.shape(), std::move(out), {x.node()},
                    [d](TapeNode<T>& n) {
                      if (!n.inputs[0]->requires_grad) return;
                      n.inputs[0]->ensure_grad();
                      T* g = n.inputs[0]->grad.data();
                      const T* s = n.value.data();
                      std::vector<T> dot(static_cast<std::size_t>(d.sp));
                      for (std::int64_t b = 0; b < d.n; ++b) {
                        std::int64_t base = b * d.c * d.sp;
                        std::fill(dot.begin(), dot.end(), T(0));
                        for (std::int64_t c = 0; c < d.c; ++c) {
                          const T* gr = n.grad.data() + base + c * d.sp;
                          const T* sr = s + base + c * d.sp;
                          for (std::int64_t i = 0; i < d.sp; ++i) dot[i] += gr[i] * sr[i];
                        }
                        for (std::int64_t c = 0; c < d.c; ++c) {
                          const T* gr = n.grad.data() + base + c * d.sp;
                          const T* sr = s + base + c * d.sp;
                          T* go = g + base + c * d.sp;
                          for (std::int64_t i = 0; i < d.sp; ++i)
                            go[i] += sr[i] * (gr[i] - dot[i]);
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// batch norm

template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, Phase phase, double momentum, double eps) {
  Ncs d = ncs_of("batch_norm", x);
  if (gamma.numel() != d.c || beta.numel() != d.c || state.running_mean.numel() != d.c ||
      state.running_var.numel() != d.c)
    throw DimensionError(concat("batch_norm: parameter length mismatch for ", d.c, " channels"));

  const T* p = x.data().data();
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();
  std::int64_t m = d.n * d.sp;  // samples per channel

  std::vector<T> mean(static_cast<std::size_t>(d.c)), invstd(static_cast<std::size_t>(d.c));
  if (phase == Phase::train) {
    // Biased batch statistics; the same convention feeds the running buffers
    // so that eval-time normalization matches training exactly at convergence.
    for (std::int64_t c = 0; c < d.c; ++c) {
      T s = 0;
      for (std::int64_t n = 0; n < d.n; ++n) {
        const T* plane = p + (n * d.c + c) * d.sp;
        for (std::int64_t i = 0; i < d.sp; ++i) s += plane[i];
      }
      T mu = s / static_cast<T>(m);
      T sq = 0;
      for (std::int64_t n = 0; n < d.n; ++n) {
        const T* plane = p + (n * d.c + c) * d.sp;
        for (std::int64_t i = 0; i < d.sp; ++i) {
          T dlt = plane[i] - mu;
          sq += dlt * dlt;
        }
      }
      T var = sq / static_cast<T>(m);
      mean[c] = mu;
      invstd[c] = T(1) / std::sqrt(var + static_cast<T>(eps));
      auto rm = state.running_mean.mutable_data();
      auto rv = state.running_var.mutable_data();
      rm[c] = static_cast<T>((1.0 - momentum) * rm[c] + momentum * mu);
      rv[c] = static_cast<T>((1.0 - momentum) * rv[c] + momentum * var);
    }
  } else {
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    for (std::int64_t c = 0; c < d.c; ++c) {
      mean[c] = rm[c];
      invstd[c] = T(1) / std::sqrt(rv[c] + static_cast<T>(eps));
    }
  }

  std::vector<T> out(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  for (std::int64_t n = 0; n < d.n; ++n)
    for (std::int64_t c = 0; c < d.c; ++c) {
      std::int64_t base = (n * d.c + c) * d.sp;
      T mu = mean[c], is = invstd[c], ga = gv[c], be = bv[c];
      for (std::int64_t i = 0; i < d.sp; ++i) {
        T h = (p[base + i] - mu) * is;
        (*xhat)[base + i] = h;
        out[base + i] = ga * h + be;
      }
    }

  bool train = phase == Phase::train;
  auto inv = std::make_shared<std::vector<T>>(std::move(invstd));
  return make_op<T>("batch_norm", x.shape(), std::move(out),
                    {x.node(), gamma.node(), beta.node()},
                    [d, m, xhat, inv, train](TapeNode<T>& n) {
                      const T* gout = n.grad.data();
                      const T* gv2 = n.inputs[1]->value.data();
                      for (std::int64_t c = 0; c < d.c; ++c) {
                        // per-channel sums of gout and gout*xhat
                        T sg = 0, sgx = 0;
                        for (std::int64_t b = 0; b < d.n; ++b) {
                          std::int64_t base = (b * d.c + c) * d.sp;
                          for (std::int64_t i = 0; i < d.sp; ++i) {
                            sg += gout[base + i];
                            sgx += gout[base + i] * (*xhat)[base + i];
                          }
                        }
                        if (n.inputs[1]->requires_grad) {
                          n.inputs[1]->ensure_grad();
                          n.inputs[1]->grad[c] += sgx;
                        }
                        if (n.inputs[2]->requires_grad) {
                          n.inputs[2]->ensure_grad();
                          n.inputs[2]->grad[c] += sg;
                        }
                        if (n.inputs[0]->requires_grad) {
                          n.inputs[0]->ensure_grad();
                          T* gx = n.inputs[0]->grad.data();
                          T scale = gv2[c] * (*inv)[c];
                          if (train) {
                            T mg = sg / static_cast<T>(m);
                            T mgx = sgx / static_cast<T>(m);
                            for (std::int64_t b = 0; b < d.n; ++b) {
                              std::int64_t base = (b * d.c + c) * d.sp;
                              for (std::int64_t i = 0; i < d.sp; ++i)
                                gx[base + i] += scale * (gout[base + i] - mg -
                                                         (*xhat)[base + i] * mgx);
                            }
                          } else {
                            for (std::int64_t b = 0; b < d.n; ++b) {
                              std::int64_t base = (b * d.c + c) * d.sp;
                              for (std::int64_t i = 0; i < d.sp; ++i)
                                gx[base + i] += scale * gout[base + i];
                            }
                          }
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// dropout

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, Phase phase, std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0)
    throw ValueError(concat("dropout: probability must be in [0,1), got ", p));
  if (phase == Phase::eval || p == 0.0) return x;

  Pcg32 rng(seed);
  auto mask = std::make_shared<std::vector<std::uint8_t>>(x.numel());
  T scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> out(x.numel());
  const T* in = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    bool keep = rng.next_double() >= p;
    (*mask)[i] = keep;
    out[i] = keep ? in[i] * scale : T(0);
  }
  return make_op<T>("dropout", x.shape(), std::move(out), {x.node()},
                    [mask, scale](TapeNode<T>& n) {
                      if (!n.inputs[0]->requires_grad) return;
                      n.inputs[0]->ensure_grad();
                      T* g = n.inputs[0]->grad.data();
                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                        if ((*mask)[i]) g[i] += n.grad[i] * scale;
                    });
}

// ---------------------------------------------------------------------------
// channel-broadcast gate

template <class T>
Tensor<T> mul_gate(const Tensor<T>& x, const Tensor<T>& gate) {
  Ncs d = ncs_of("mul_gate", x);
  Ncs dg = ncs_of("mul_gate", gate);
  if (dg.c != 1 || dg.n != d.n || dg.sp != d.sp)
    throw DimensionError(concat("mul_gate: gate shape ", shape_str(gate.shape()),
                                " incompatible with ", shape_str(x.shape())));
  std::vector<T> out(x.numel());
  const T* p = x.data().data();
  const T* gp = gate.data().data();
  for (std::int64_t n = 0; n < d.n; ++n)
    for (std::int64_t c = 0; c < d.c; ++c) {
      std::int64_t base = (n * d.c + c) * d.sp;
      const T* m = gp + n * d.sp;
      for (std::int64_t i = 0; i < d.sp; ++i) out[base + i] = p[base + i] * m[i];
    }
  return make_op<T>("mul_gate", x.shape(), std::move(out), {x.node(), gate.node()},
                    [d](TapeNode<T>& n) {
                      const T* xv = n.inputs[0]->value.data();
                      const T* gv = n.inputs[1]->value.data();
                      if (n.inputs[0]->requires_grad) {
                        n.inputs[0]->ensure_grad();
                        T* g = n.inputs[0]->grad.data();
                        for (std::int64_t b = 0; b < d.n; ++b)
                          for (std::int64_t c = 0; c < d.c; ++c) {
                            std::int64_t base = (b * d.c + c) * d.sp;
                            const T* m = gv + b * d.sp;
                            for (std::int64_t i = 0; i < d.sp; ++i)
                              g[base + i] += n.grad[base + i] * m[i];
                          }
                      }
                      if (n.inputs[1]->requires_grad) {
                        n.inputs[1]->ensure_grad();
                        T* g = n.inputs[1]->grad.data();
                        for (std::int64_t b = 0; b < d.n; ++b)
                          for (std::int64_t i = 0; i < d.sp; ++i) {
                            T s = 0;
                            for (std::int64_t c = 0; c < d.c; ++c)
                              s += n.grad[(b * d.c + c) * d.sp + i] * xv[(b * d.c + c) * d.sp + i];
                            g[b * d.sp + i] += s;
                          }
                      }
                    });
}

// ---------------------------------------------------------------------------
// argmax helper

template <class T>
std::vector<std::uint8_t> argmax_channels(const Tensor<T>& probs) {
  Ncs d = ncs_of("argmax_channels", probs);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(d.n * d.sp));
  const T* p = probs.data().data();
  for (std::int64_t n = 0; n < d.n; ++n)
    for (std::int64_t i = 0; i < d.sp; ++i) {
      T best = p[n * d.c * d.sp + i];
      std::uint8_t arg = 0;
      for (std::int64_t c = 1; c < d.c; ++c) {
        T v = p[(n * d.c + c) * d.sp + i];
        if (v > best) {
          best = v;
          arg = static_cast<std::uint8_t>(c);
        }
      }
      out[static_cast<std::size_t>(n * d.sp + i)] = arg;
    }
  return out;
}

#define LOBESEG_INSTANTIATE_OPS(T)                                                      \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                   \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                   \
  template Tensor<T> sum_all(const Tensor<T>&);                                         \
  template Tensor<T> mean_all(const Tensor<T>&);                                        \
  template Tensor<T> sum_per_channel(const Tensor<T>&);                                 \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> slice_range(const Tensor<T>&, std::int64_t, std::int64_t);         \
  template Tensor<T> sigmoid(const Tensor<T>&);                                         \
  template Tensor<T> prelu(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> softmax_channels(const Tensor<T>&);                                \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                BatchNormState<T>&, Phase, double, double);             \
  template Tensor<T> dropout(const Tensor<T>&, double, Phase, std::uint64_t);           \
  template Tensor<T> mul_gate(const Tensor<T>&, const Tensor<T>&);                      \
  template std::vector<std::uint8_t> argmax_channels(const Tensor<T>&);

LOBESEG_INSTANTIATE_OPS(float)
LOBESEG_INSTANTIATE_OPS(double)
#undef LOBESEG_INSTANTIATE_OPS

}  // namespace lobeseg
