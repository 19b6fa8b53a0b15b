#ifndef LOBESEG_OPS_HPP
#define LOBESEG_OPS_HPP

#include <cstdint>
#include <vector>

#include "lobeseg/tensor.hpp"

namespace lobeseg {

enum class Phase { train, eval };

// --- elementwise (shapes must match exactly; no broadcasting) ---
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> add_scalar(const Tensor<T>& a, T c);
template <class T> Tensor<T> mul_scalar(const Tensor<T>& a, T c);

// --- reductions ---
template <class T> Tensor<T> sum_all(const Tensor<T>& a);   // -> [1]
template <class T> Tensor<T> mean_all(const Tensor<T>& a);  // -> [1]
// [N,C,...] -> [C], summing batch and all trailing dims.
template <class T> Tensor<T> sum_per_channel(const Tensor<T>& a);

// --- structure ---
template <class T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
// 1-D slice [begin,end), used to drop e.g. the background entry of a per-class vector.
template <class T> Tensor<T> slice_range(const Tensor<T>& a, std::int64_t begin, std::int64_t end);

// --- activations ---
template <class T> Tensor<T> sigmoid(const Tensor<T>& x);
// slopes: one learned negative-side slope per channel (dim 1 of x).
template <class T> Tensor<T> prelu(const Tensor<T>& x, const Tensor<T>& slopes);
// Per-voxel softmax over dim 1 with max subtraction.
template <class T> Tensor<T> softmax_channels(const Tensor<T>& x);

// --- normalization / regularization ---
template <class T>
struct BatchNormState {
  Tensor<T> running_mean;  // [C], non-trainable leaves
  Tensor<T> running_var;   // [C]
};

template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, Phase phase, double momentum = 0.1,
                     double eps = 1e-5);

// Inverted dropout: train mode zeroes with probability p and scales survivors
// by 1/(1-p); eval mode and p == 0 return the input unchanged. The mask is a
// pure function of the seed.
template <class T> Tensor<T> dropout(const Tensor<T>& x, double p, Phase phase, std::uint64_t seed);

// x [N,C,...] * gate [N,1,...], gate broadcast across channels.
template <class T> Tensor<T> mul_gate(const Tensor<T>& x, const Tensor<T>& gate);

// --- convolution ---
// input [N,Cin,D,H,W], weight [Cout,Cin,k,k,k], bias [Cout].
template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding);

// input [N,Cin,D,H,W], weight [Cin,Cout,k,k,k], bias [Cout]. With matching
// stride/padding this is the exact adjoint of conv3d in its first argument.
template <class T>
Tensor<T> conv_transpose3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           int stride, int padding);

// --- non-recorded helpers ---
// Per-voxel argmax over dim 1 of [N,C,...]; ties resolve to the lowest index.
template <class T> std::vector<std::uint8_t> argmax_channels(const Tensor<T>& probs);

#define LOBESEG_EXTERN_OPS(T)                                                              \
  extern template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                       \
  extern template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                       \
  extern template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                       \
  extern template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                       \
  extern template Tensor<T> add_scalar(const Tensor<T>&, T);                               \
  extern template Tensor<T> mul_scalar(const Tensor<T>&, T);                               \
  extern template Tensor<T> sum_all(const Tensor<T>&);                                     \
  extern template Tensor<T> mean_all(const Tensor<T>&);                                    \
  extern template Tensor<T> sum_per_channel(const Tensor<T>&);                             \
  extern template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);           \
  extern template Tensor<T> slice_range(const Tensor<T>&, std::int64_t, std::int64_t);     \
  extern template Tensor<T> sigmoid(const Tensor<T>&);                                     \
  extern template Tensor<T> prelu(const Tensor<T>&, const Tensor<T>&);                     \
  extern template Tensor<T> softmax_channels(const Tensor<T>&);                            \
  extern template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                       BatchNormState<T>&, Phase, double, double);         \
  extern template Tensor<T> dropout(const Tensor<T>&, double, Phase, std::uint64_t);       \
  extern template Tensor<T> mul_gate(const Tensor<T>&, const Tensor<T>&);                  \
  extern template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                   int, int);                                              \
  extern template Tensor<T> conv_transpose3d(const Tensor<T>&, const Tensor<T>&,           \
                                             const Tensor<T>&, int, int);                  \
  extern template std::vector<std::uint8_t> argmax_channels(const Tensor<T>&);

LOBESEG_EXTERN_OPS(float)
LOBESEG_EXTERN_OPS(double)
#undef LOBESEG_EXTERN_OPS

}  // namespace lobeseg

#endif  // LOBESEG_OPS_HPP
