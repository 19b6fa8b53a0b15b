#ifndef LOBESEG_VNET_HPP
#define LOBESEG_VNET_HPP

#include <string>
#include <unordered_map>
#include <vector>

#include "lobeseg/ops.hpp"

namespace lobeseg {

struct ModelConfig {
  std::int64_t input_size = 32;  // cubic edge S
  int depth = 3;                 // resolution levels (paper-scale runs use 6)
  int base_channels = 8;
  int main_classes = 6;
  int aux_classes = 3;
  bool aux_enabled = true;
  double prelu_init = 0.25;
  double dropout_p = 0.5;
  bool batch_norm = true;
  bool attention = false;
  std::uint64_t seed = 0;

  void validate() const;
  std::int64_t bottleneck_edge() const { return input_size >> (depth - 1); }
};

template <class T>
struct Param {
  std::string name;
  Tensor<T> tensor;
};

// Encoder-decoder segmentation network with a shared trunk and two sibling
// softmax heads. Parameters are held in a flat named registry; every
// parameter is initialized from an RNG keyed by (config seed, name), so
// architecturally shared parameters are identical across config variants.
template <class T>
class Model {
 public:
  Model() = default;
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }
  std::vector<Param<T>>& buffers() { return buffers_; }
  const std::vector<Param<T>>& buffers() const { return buffers_; }

  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;
  bool has(const std::string& name) const;

  std::int64_t parameter_count() const;  // trainable scalars
  void zero_grads();

 private:
  void add_param(const std::string& name, Tensor<T> t);
  void add_buffer(const std::string& name, Tensor<T> t);
  void register_layers();

  ModelConfig cfg_;
  std::vector<Param<T>> params_;
  std::vector<Param<T>> buffers_;
  std::unordered_map<std::string, std::pair<int, std::size_t>> index_;  // {0 param,1 buffer}
};

template <class T>
Model<T> build_model(const ModelConfig& cfg) {
  return Model<T>(cfg);
}

struct ForwardOptions {
  Phase phase = Phase::eval;
  std::uint64_t dropout_seed = 0;
  bool force_attention_open = false;  // test hook: saturates every gate to 1
};

template <class T>
struct ForwardResult {
  Tensor<T> main_probs;
  Tensor<T> aux_probs;  // undefined when the aux head is disabled
  Shape bottleneck_shape;
};

template <class T>
ForwardResult<T> forward(Model<T>& model, const Tensor<T>& batch, const ForwardOptions& opts);

// Additive attention gate: alpha = sigmoid(psi(relu(theta(skip) + phi(gating)))),
// output = skip (.) alpha. force_open short-circuits alpha to exactly 1.
template <class T>
struct AttentionGateParams {
  Tensor<T> theta_weight, theta_bias;
  Tensor<T> phi_weight, phi_bias;
  Tensor<T> psi_weight, psi_bias;
};

template <class T>
Tensor<T> attention_gate(const AttentionGateParams<T>& g, const Tensor<T>& skip,
                         const Tensor<T>& gating, bool force_open = false);

extern template class Model<float>;
extern template class Model<double>;
extern template ForwardResult<float> forward(Model<float>&, const Tensor<float>&,
                                             const ForwardOptions&);
extern template ForwardResult<double> forward(Model<double>&, const Tensor<double>&,
                                              const ForwardOptions&);
extern template Tensor<float> attention_gate(const AttentionGateParams<float>&,
                                             const Tensor<float>&, const Tensor<float>&, bool);
extern template Tensor<double> attention_gate(const AttentionGateParams<double>&,
                                              const Tensor<double>&, const Tensor<double>&, bool);

}  // namespace lobeseg

#endif  // LOBESEG_VNET_HPP
