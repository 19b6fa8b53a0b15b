#include "lobeseg/vnet.hpp"

#include <cmath>

namespace lobeseg {

void ModelConfig::validate() const {
  if (depth < 1) throw ConfigError(concat("model depth must be >= 1, got ", depth));
  if (base_channels < 1)
    throw ConfigError(concat("base_channels must be >= 1, got ", base_channels));
  std::int64_t div = std::int64_t(1) << (depth - 1);
  if (input_size < div || input_size % div != 0)
    throw ConfigError(concat("input size ", input_size, " is not divisible by 2^(depth-1) = ",
                             div));
  if (main_classes < 2)
    throw ConfigError(concat("main_classes must be >= 2, got ", main_classes));
  if (aux_enabled && aux_classes < 2)
    throw ConfigError(concat("aux_classes must be >= 2, got ", aux_classes));
  if (dropout_p < 0.0 || dropout_p >= 1.0)
    throw ConfigError(concat("dropout probability must be in [0,1), got ", dropout_p));
}

namespace {

// Every parameter draws from its own stream keyed by (seed, name): shared
// layers end up bitwise identical across config variants that differ only in
// optional extras (aux head, attention gates).
template <class T>
Tensor<T> init_conv_weight(Shape shape, std::int64_t fan_in, const ModelConfig& cfg,
                           const std::string& name) {
  Pcg32 rng(seed_mix(cfg.seed, fnv1a64(name)));
  double a = cfg.prelu_init;
  double stddev = std::sqrt(2.0 / ((1.0 + a * a) * static_cast<double>(fan_in)));
  std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<T>(rng.next_normal() * stddev);
  return Tensor<T>::from_vector(std::move(shape), std::move(v), true);
}

}  // namespace

template <class T>
void Model<T>::add_param(const std::string& name, Tensor<T> t) {
  if (index_.count(name)) throw ContractError(concat("duplicate parameter name ", name));
  index_[name] = {0, params_.size()};
  params_.push_back({name, std::move(t)});
}

template <class T>
void Model<T>::add_buffer(const std::string& name, Tensor<T> t) {
  if (index_.count(name)) throw ContractError(concat("duplicate parameter name ", name));
  index_[name] = {1, buffers_.size()};
  buffers_.push_back({name, std::move(t)});
}

template <class T>
Tensor<T>& Model<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError(concat("no parameter named ", name));
  return it->second.first == 0 ? params_[it->second.second].tensor
                               : buffers_[it->second.second].tensor;
}

template <class T>
const Tensor<T>& Model<T>::at(const std::string& name) const {
  return const_cast<Model<T>*>(this)->at(name);
}

template <class T>
bool Model<T>::has(const std::string& name) const {
  return index_.count(name) > 0;
}

template <class T>
std::int64_t Model<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <class T>
void Model<T>::zero_grads() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <class T>
void Model<T>::register_layers() {
  const ModelConfig& c = cfg_;
  auto conv = [&](const std::string& prefix, std::int64_t cin, std::int64_t cout,
                  std::int64_t k, bool transpose = false) {
    Shape ws = transpose ? Shape{cin, cout, k, k, k} : Shape{cout, cin, k, k, k};
    add_param(prefix + ".weight", init_conv_weight<T>(ws, cin * k * k * k, c, prefix + ".weight"));
    add_param(prefix + ".bias", Tensor<T>::zeros({cout}, true));
  };
  auto bn = [&](const std::string& prefix, std::int64_t ch) {
    if (!c.batch_norm) return;
    add_param(prefix + ".gamma", Tensor<T>::filled({ch}, T(1), true));
    add_param(prefix + ".beta", Tensor<T>::zeros({ch}, true));
    add_buffer(prefix + ".running_mean", Tensor<T>::zeros({ch}));
    add_buffer(prefix + ".running_var", Tensor<T>::filled({ch}, T(1)));
  };
  auto act = [&](const std::string& prefix, std::int64_t ch) {
    add_param(prefix + ".slope", Tensor<T>::filled({ch}, static_cast<T>(c.prelu_init), true));
  };
  auto block = [&](const std::string& prefix, std::int64_t cin, std::int64_t ch) {
    conv(prefix + ".conv1", cin, ch, 3);
    bn(prefix + ".bn1", ch);
    act(prefix + ".act1", ch);
    conv(prefix + ".conv2", ch, ch, 3);
    bn(prefix + ".bn2", ch);
    act(prefix + ".act2", ch);
  };

  std::int64_t base = c.base_channels;
  conv("in.conv", 1, base, 3);
  bn("in.bn", base);
  act("in.act", base);

  for (int i = 0; i < c.depth; ++i) {
    std::int64_t ch = base << i;
    block(concat("enc", i), ch, ch);
    if (i + 1 < c.depth) {
      std::int64_t next = base << (i + 1);
      conv(concat("down", i), ch, next, 2);
      bn(concat("down", i, ".bn"), next);
      act(concat("down", i, ".act"), next);
    }
  }
  for (int i = c.depth - 2; i >= 0; --i) {
    std::int64_t ch = base << i;
    std::int64_t coarse = base << (i + 1);
    conv(concat("up", i, ".tconv"), coarse, ch, 2, /*transpose=*/true);
    bn(concat("up", i, ".bn"), ch);
    act(concat("up", i, ".act"), ch);
    if (c.attention) {
      std::int64_t inter = std::max<std::int64_t>(1, ch / 2);
      conv(concat("att", i, ".theta"), ch, inter, 1);
      conv(concat("att", i, ".phi"), ch, inter, 1);
      conv(concat("att", i, ".psi"), inter, 1, 1);
    }
    block(concat("dec", i), 2 * ch, ch);
  }
  conv("head.main", base, c.main_classes, 1);
  if (c.aux_enabled) conv("head.aux", base, c.aux_classes, 1);
}

template <class T>
Model<T>::Model(ModelConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  register_layers();
}

template <class T>
Tensor<T> attention_gate(const AttentionGateParams<T>& g, const Tensor<T>& skip,
                         const Tensor<T>& gating, bool force_open) {
  if (skip.shape() != gating.shape())
    throw DimensionError(concat("attention_gate: skip ", shape_str(skip.shape()),
                                " vs gating ", shape_str(gating.shape())));
  if (force_open) return skip;  // alpha == 1 exactly
  Tensor<T> mixed = add(conv3d(skip, g.theta_weight, g.theta_bias, 1, 0),
                        conv3d(gating, g.phi_weight, g.phi_bias, 1, 0));
  Tensor<T> zero_slopes = Tensor<T>::zeros({mixed.dim(1)});
  Tensor<T> alpha = sigmoid(conv3d(prelu(mixed, zero_slopes), g.psi_weight, g.psi_bias, 1, 0));
  return mul_gate(skip, alpha);
}

namespace {

template <class T>
struct Runner {
  Model<T>& m;
  const ForwardOptions& opts;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  Tensor<T> bn(const std::string& prefix, const Tensor<T>& x) {
    if (!m.config().batch_norm) return x;
    BatchNormState<T> state{m.at(prefix + ".running_mean"), m.at(prefix + ".running_var")};
    return batch_norm(x, m.at(prefix + ".gamma"), m.at(prefix + ".beta"), state, opts.phase,
                      bn_momentum, bn_eps);
  }
  Tensor<T> act(const std::string& prefix, const Tensor<T>& x) {
    return prelu(x, m.at(prefix + ".slope"));
  }
  Tensor<T> conv(const std::string& prefix, const Tensor<T>& x, int stride, int pad) {
    return conv3d(x, m.at(prefix + ".weight"), m.at(prefix + ".bias"), stride, pad);
  }
  Tensor<T> tconv(const std::string& prefix, const Tensor<T>& x, int stride) {
    return conv_transpose3d(x, m.at(prefix + ".weight"), m.at(prefix + ".bias"), stride, 0);
  }
  // two 3x3x3 convolutions with a residual connection around the pair
  Tensor<T> block(const std::string& prefix, const Tensor<T>& x, const Tensor<T>& residual) {
    Tensor<T> h = act(prefix + ".act1", bn(prefix + ".bn1", conv(prefix + ".conv1", x, 1, 1)));
    Tensor<T> z = bn(prefix + ".bn2", conv(prefix + ".conv2", h, 1, 1));
    return act(prefix + ".act2", add(z, residual));
  }
};

}  // namespace

template <class T>
ForwardResult<T> forward(Model<T>& model, const Tensor<T>& batch, const ForwardOptions& opts) {
  const ModelConfig& c = model.config();
  std::int64_t s = c.input_size;
  if (batch.ndim() != 5 || batch.dim(1) != 1 || batch.dim(2) != s || batch.dim(3) != s ||
      batch.dim(4) != s)
    throw DimensionError(concat("forward: expected batch [N,1,", s, ",", s, ",", s, "], got ",
                                shape_str(batch.shape())));

  Runner<T> r{model, opts};
  Tensor<T> h = r.act("in.act", r.bn("in.bn", r.conv("in.conv", batch, 1, 1)));

  std::vector<Tensor<T>> skips;
  for (int i = 0; i < c.depth; ++i) {
    h = r.block(concat("enc", i), h, h);
    if (i + 1 < c.depth) {
      skips.push_back(h);
      std::string p = concat("down", i);
      h = r.act(p + ".act", r.bn(p + ".bn", r.conv(p, h, 2, 0)));
    }
  }
  Shape bottleneck = h.shape();
  if (c.dropout_p > 0.0)
    h = dropout(h, c.dropout_p, opts.phase, seed_mix(opts.dropout_seed, 0xD80));

  for (int i = c.depth - 2; i >= 0; --i) {
    std::string p = concat("up", i);
    Tensor<T> u = r.act(p + ".act", r.bn(p + ".bn", r.tconv(p + ".tconv", h, 2)));
    Tensor<T> skip = skips[static_cast<std::size_t>(i)];
    if (c.attention) {
      AttentionGateParams<T> g{model.at(concat("att", i, ".theta.weight")),
                               model.at(concat("att", i, ".theta.bias")),
                               model.at(concat("att", i, ".phi.weight")),
                               model.at(concat("att", i, ".phi.bias")),
                               model.at(concat("att", i, ".psi.weight")),
                               model.at(concat("att", i, ".psi.bias"))};
      skip = attention_gate(g, skip, u, opts.force_attention_open);
    }
    h = r.block(concat("dec", i), concat_channels(u, skip), u);
  }

  ForwardResult<T> out;
  out.bottleneck_shape = std::move(bottleneck);
  out.main_probs = softmax_channels(r.conv("head.main", h, 1, 0));
  if (c.aux_enabled) out.aux_probs = softmax_channels(r.conv("head.aux", h, 1, 0));
  return out;
}

template class Model<float>;
template class Model<double>;
template ForwardResult<float> forward(Model<float>&, const Tensor<float>&,
                                      const ForwardOptions&);
template ForwardResult<double> forward(Model<double>&, const Tensor<double>&,
                                       const ForwardOptions&);
template Tensor<float> attention_gate(const AttentionGateParams<float>&, const Tensor<float>&,
                                      const Tensor<float>&, bool);
template Tensor<double> attention_gate(const AttentionGateParams<double>&,
                                       const Tensor<double>&, const Tensor<double>&, bool);

}  // namespace lobeseg
