#ifndef LOBESEG_TRAINER_HPP
#define LOBESEG_TRAINER_HPP

#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "lobeseg/losses.hpp"
#include "lobeseg/vnet.hpp"

namespace lobeseg {

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

enum class OptimizerKind { sgd, adam };

const char* to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& name);

struct AugmentConfig {
  // left-right flips are off by default: lobe labels are side-specific
  bool flip_axial = false;     // D axis
  bool flip_coronal = false;   // H axis
  bool flip_sagittal = false;  // W axis (left-right)
  bool rotate = true;          // about the axial axis
  double max_rotate_deg = 10.0;
  bool intensity_jitter = true;
  double jitter_amp = 0.1;  // additive, post-normalization units
};

struct TrainConfig {
  double lr0 = 0.01;
  int plateau_patience = 50;
  double plateau_factor = 10.0;
  double dropout_p = 0.5;
  LossWeights loss_weights{0.5, 0.5};
  int epochs = 100;
  int batch_size = 1;
  OptimizerKind optimizer = OptimizerKind::adam;
  AdamParams adam;
  AugmentConfig augment;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 disables cadence checkpoints

  void validate() const {
    if (!(lr0 > 0)) throw ConfigError(concat("lr0 must be positive, got ", lr0));
    if (plateau_patience < 1)
      throw ConfigError(concat("plateau patience must be >= 1, got ", plateau_patience));
    if (!(plateau_factor > 1))
      throw ConfigError(concat("plateau factor must be > 1, got ", plateau_factor));
    if (epochs < 1) throw ConfigError(concat("epochs must be >= 1, got ", epochs));
    if (batch_size < 1) throw ConfigError(concat("batch size must be >= 1, got ", batch_size));
    loss_weights.validate();
  }
};

struct LRScheduleState {
  double lr = 0.01;
  double best = -std::numeric_limits<double>::infinity();
  int epochs_since_improvement = 0;
};

// Higher-is-better plateau rule: an improvement beyond 1e-6 resets the
// counter; hitting `patience` stagnant epochs divides the rate by `factor`.
void lr_on_plateau(LRScheduleState& state, double new_val_metric, int patience, double factor);

// ---------------------------------------------------------------------------
// augmentation

struct AugmentParams {
  bool flip[3] = {false, false, false};  // D,H,W
  double angle_rad = 0.0;                // rotation about the axial (D) axis
  double intensity_delta = 0.0;
};

AugmentParams sample_augment(const AugmentConfig& cfg, std::uint64_t seed);

// One geometric transform applied to the image and both label encodings;
// labels use nearest sampling (whole one-hot vectors move together), the
// intensity shift touches only the image.
template <class T>
void apply_augment(const AugmentParams& params, Tensor<T>& vol, Tensor<T>& main_onehot,
                   Tensor<T>& aux_onehot);

// ---------------------------------------------------------------------------
// optimization

template <class T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind, AdamParams hp = {}) : kind_(kind), hp_(hp) {}

  OptimizerKind kind() const { return kind_; }
  const AdamParams& hyper() const { return hp_; }
  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }

  // p <- p - lr*g (sgd) or bias-corrected moment update (adam); every
  // parameter must carry a gradient.
  void step(std::vector<Param<T>>& params, double lr);
  void step(Model<T>& model, double lr) { step(model.params(), lr); }

  std::pair<std::vector<T>, std::vector<T>>& moments(const std::string& name) {
    return moments_[name];
  }
  const std::unordered_map<std::string, std::pair<std::vector<T>, std::vector<T>>>& state()
      const {
    return moments_;
  }

 private:
  OptimizerKind kind_;
  AdamParams hp_;
  std::int64_t t_ = 0;
  std::unordered_map<std::string, std::pair<std::vector<T>, std::vector<T>>> moments_;
};

// ---------------------------------------------------------------------------
// training loop

template <class T>
struct TrainCase {
  std::string id;
  Tensor<T> input;        // [1,1,S,S,S]
  Tensor<T> main_onehot;  // [1,main,S,S,S]
  Tensor<T> aux_onehot;   // [1,aux,S,S,S]
};

struct EpochStats {
  int epoch = 0;
  double loss_total = 0, loss_main = 0, loss_aux = 0;
  double lr = 0;  // rate in effect during the epoch
  double val_dice_mean = 0;
};

using History = std::vector<EpochStats>;

// header: epoch,loss_total,loss_main,loss_aux,lr,val_dice_mean
std::string history_to_csv(const History& history);

struct TrainOptions {
  std::string checkpoint_dir;  // empty disables checkpoint files
  int start_epoch = 0;         // resume support: first epoch is start_epoch+1
};

// Mean over foreground classes of the main head's hard Dice against the
// one-hot ground truth, averaged over cases (the plateau metric).
template <class T>
double validation_dice(Model<T>& model, const std::vector<TrainCase<T>>& cases);

template <class T>
History train(Model<T>& model, const std::vector<TrainCase<T>>& dataset,
              const std::vector<TrainCase<T>>& val_set, const TrainConfig& cfg,
              Optimizer<T>& opt, LRScheduleState& sched, const TrainOptions& opts = {});

extern template void apply_augment(const AugmentParams&, Tensor<float>&, Tensor<float>&,
                                   Tensor<float>&);
extern template void apply_augment(const AugmentParams&, Tensor<double>&, Tensor<double>&,
                                   Tensor<double>&);
extern template class Optimizer<float>;
extern template class Optimizer<double>;
extern template double validation_dice(Model<float>&, const std::vector<TrainCase<float>>&);
extern template double validation_dice(Model<double>&, const std::vector<TrainCase<double>>&);
extern template History train(Model<float>&, const std::vector<TrainCase<float>>&,
                              const std::vector<TrainCase<float>>&, const TrainConfig&,
                              Optimizer<float>&, LRScheduleState&, const TrainOptions&);
extern template History train(Model<double>&, const std::vector<TrainCase<double>>&,
                              const std::vector<TrainCase<double>>&, const TrainConfig&,
                              Optimizer<double>&, LRScheduleState&, const TrainOptions&);

}  // namespace lobeseg

#endif  // LOBESEG_TRAINER_HPP
