#include "lobeseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "lobeseg/io.hpp"

namespace lobeseg {

const char* to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_from_string(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw ValueError(concat("unknown optimizer '", name, "'"));
}

void lr_on_plateau(LRScheduleState& state, double new_val_metric, int patience, double factor) {
  if (new_val_metric > state.best + 1e-6) {
    state.best = new_val_metric;
    state.epochs_since_improvement = 0;
    return;
  }
  if (++state.epochs_since_improvement == patience) {
    state.lr /= factor;
    state.epochs_since_improvement = 0;
  }
}

AugmentParams sample_augment(const AugmentConfig& cfg, std::uint64_t seed) {
  Pcg32 rng(seed_mix(seed, 0xA06));
  AugmentParams p;
  p.flip[0] = cfg.flip_axial && rng.next_double() < 0.5;
  p.flip[1] = cfg.flip_coronal && rng.next_double() < 0.5;
  p.flip[2] = cfg.flip_sagittal && rng.next_double() < 0.5;
  p.angle_rad =
      cfg.rotate ? rng.uniform(-cfg.max_rotate_deg, cfg.max_rotate_deg) * 0.017453292519943295
                 : 0.0;
  p.intensity_delta = cfg.intensity_jitter ? rng.uniform(-cfg.jitter_amp, cfg.jitter_amp) : 0.0;
  return p;
}

namespace {

struct GridDims {
  std::int64_t c, d, h, w;
};

template <class T>
GridDims dims_of(const Tensor<T>& t) {
  return {t.dim(1), t.dim(2), t.dim(3), t.dim(4)};
}

}  // namespace

template <class T>
void apply_augment(const AugmentParams& params, Tensor<T>& vol, Tensor<T>& main_onehot,
                   Tensor<T>& aux_onehot) {
  GridDims g = dims_of(vol);
  if (main_onehot.dim(2) != g.d || aux_onehot.dim(2) != g.d || main_onehot.dim(3) != g.h ||
      aux_onehot.dim(3) != g.h || main_onehot.dim(4) != g.w || aux_onehot.dim(4) != g.w)
    throw DimensionError("apply_augment: spatial dims of image and labels differ");

  bool rotating = params.angle_rad != 0.0;
  double ca = std::cos(params.angle_rad), sa = std::sin(params.angle_rad);
  double cy = (static_cast<double>(g.h) - 1.0) / 2.0;
  double cx = (static_cast<double>(g.w) - 1.0) / 2.0;

  // inverse map: output voxel -> source voxel (rotation about the D axis,
  // then axis mirrors)
  auto source_of = [&](std::int64_t z, std::int64_t y, std::int64_t x, double& sz, double& sy,
                       double& sx) {
    sz = static_cast<double>(z);
    sy = static_cast<double>(y);
    sx = static_cast<double>(x);
    if (rotating) {
      double dy = sy - cy, dx = sx - cx;
      sy = cy + ca * dy - sa * dx;
      sx = cx + sa * dy + ca * dx;
    }
    if (params.flip[0]) sz = static_cast<double>(g.d - 1) - sz;
    if (params.flip[1]) sy = static_cast<double>(g.h - 1) - sy;
    if (params.flip[2]) sx = static_cast<double>(g.w - 1) - sx;
  };

  const T* vin = vol.data().data();
  std::vector<T> vout(static_cast<std::size_t>(g.d * g.h * g.w));
  GridDims gm = dims_of(main_onehot);
  GridDims ga = dims_of(aux_onehot);
  const T* min_ = main_onehot.data().data();
  const T* ain = aux_onehot.data().data();
  std::vector<T> mout(static_cast<std::size_t>(gm.c * g.d * g.h * g.w), T(0));
  std::vector<T> aout(static_cast<std::size_t>(ga.c * g.d * g.h * g.w), T(0));
  std::int64_t sp = g.d * g.h * g.w;

  for (std::int64_t z = 0; z < g.d; ++z)
    for (std::int64_t y = 0; y < g.h; ++y)
      for (std::int64_t x = 0; x < g.w; ++x) {
        double sz, sy, sx;
        source_of(z, y, x, sz, sy, sx);
        std::int64_t out_idx = (z * g.h + y) * g.w + x;

        // image: trilinear with zero fill outside the grid
        double acc = 0;
        std::int64_t z0 = static_cast<std::int64_t>(std::floor(sz));
        std::int64_t y0 = static_cast<std::int64_t>(std::floor(sy));
        std::int64_t x0 = static_cast<std::int64_t>(std::floor(sx));
        double fz = sz - z0, fy = sy - y0, fx = sx - x0;
        for (int dz = 0; dz <= 1; ++dz)
          for (int dy = 0; dy <= 1; ++dy)
            for (int dx = 0; dx <= 1; ++dx) {
              std::int64_t zi = z0 + dz, yi = y0 + dy, xi = x0 + dx;
              if (zi < 0 || zi >= g.d || yi < 0 || yi >= g.h || xi < 0 || xi >= g.w) continue;
              double wgt = (dz ? fz : 1 - fz) * (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
              acc += wgt * vin[(zi * g.h + yi) * g.w + xi];
            }
        vout[static_cast<std::size_t>(out_idx)] =
            static_cast<T>(acc + params.intensity_delta);

        // labels: whole one-hot vector from the nearest source voxel;
        // outside the grid falls back to background
        std::int64_t zn = static_cast<std::int64_t>(std::floor(sz + 0.5));
        std::int64_t yn = static_cast<std::int64_t>(std::floor(sy + 0.5));
        std::int64_t xn = static_cast<std::int64_t>(std::floor(sx + 0.5));
        if (zn >= 0 && zn < g.d && yn >= 0 && yn < g.h && xn >= 0 && xn < g.w) {
          std::int64_t src_idx = (zn * g.h + yn) * g.w + xn;
          for (std::int64_t c = 0; c < gm.c; ++c)
            mout[static_cast<std::size_t>(c * sp + out_idx)] = min_[c * sp + src_idx];
          for (std::int64_t c = 0; c < ga.c; ++c)
            aout[static_cast<std::size_t>(c * sp + out_idx)] = ain[c * sp + src_idx];
        } else {
          mout[static_cast<std::size_t>(out_idx)] = T(1);  // background channel
          aout[static_cast<std::size_t>(out_idx)] = T(1);
        }
      }

  vol = Tensor<T>::from_vector(vol.shape(), std::move(vout));
  main_onehot = Tensor<T>::from_vector(main_onehot.shape(), std::move(mout));
  aux_onehot = Tensor<T>::from_vector(aux_onehot.shape(), std::move(aout));
}

template <class T>
void Optimizer<T>::step(std::vector<Param<T>>& params, double lr) {
  if (kind_ == OptimizerKind::adam) ++t_;
  for (auto& p : params) {
    if (!p.tensor.has_grad())
      throw ContractError(concat("optimizer step: parameter '", p.name, "' has no gradient"));
    auto grad = p.tensor.grad();
    auto value = p.tensor.mutable_data();
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < value.size(); ++i)
        value[i] -= static_cast<T>(lr) * grad[i];
      continue;
    }
    auto& [m, v] = moments_[p.name];
    if (m.empty()) {
      m.assign(value.size(), T(0));
      v.assign(value.size(), T(0));
    }
    T b1 = static_cast<T>(hp_.beta1), b2 = static_cast<T>(hp_.beta2);
    T corr1 = static_cast<T>(1.0 - std::pow(hp_.beta1, static_cast<double>(t_)));
    T corr2 = static_cast<T>(1.0 - std::pow(hp_.beta2, static_cast<double>(t_)));
    T eps = static_cast<T>(hp_.eps);
    T step_size = static_cast<T>(lr);
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
      v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
      T mhat = m[i] / corr1;
      T vhat = v[i] / corr2;
      value[i] -= step_size * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

std::string history_to_csv(const History& history) {
  std::string out = "epoch,loss_total,loss_main,loss_aux,lr,val_dice_mean\n";
  char buf[192];
  for (const auto& e : history) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.loss_total,
                  e.loss_main, e.loss_aux, e.lr, e.val_dice_mean);
    out += buf;
  }
  return out;
}

namespace {

template <class T>
LabelMap labels_from_argmax(const Tensor<T>& probs) {
  LabelMap m;
  m.dims = {probs.dim(2), probs.dim(3), probs.dim(4)};
  m.vocabulary.resize(static_cast<std::size_t>(probs.dim(1)));
  m.voxels = argmax_channels(probs);
  return m;
}

}  // namespace

template <class T>
double validation_dice(Model<T>& model, const std::vector<TrainCase<T>>& cases) {
  if (cases.empty()) return 0.0;
  NoGradGuard no_grad;
  double total = 0;
  for (const auto& c : cases) {
    auto out = forward(model, c.input, {Phase::eval, 0, false});
    LabelMap pred = labels_from_argmax(out.main_probs);
    LabelMap gt = labels_from_argmax(c.main_onehot);
    int classes = static_cast<int>(c.main_onehot.dim(1));
    double sum = 0;
    for (int cls = 1; cls < classes; ++cls) sum += hard_dice(pred, gt, cls);
    total += sum / static_cast<double>(classes - 1);
  }
  return total / static_cast<double>(cases.size());
}

namespace {

// stacks several [1,C,...] case tensors along the batch dim (plain data copy)
template <class T>
Tensor<T> stack_batch(const std::vector<const Tensor<T>*>& parts) {
  if (parts.size() == 1) return *parts[0];
  Shape shape = parts[0]->shape();
  shape[0] = static_cast<std::int64_t>(parts.size());
  std::vector<T> data;
  data.reserve(static_cast<std::size_t>(shape_numel(shape)));
  for (const Tensor<T>* p : parts) data.insert(data.end(), p->data().begin(), p->data().end());
  return Tensor<T>::from_vector(std::move(shape), std::move(data));
}

}  // namespace

template <class T>
History train(Model<T>& model, const std::vector<TrainCase<T>>& dataset,
              const std::vector<TrainCase<T>>& val_set, const TrainConfig& cfg,
              Optimizer<T>& opt, LRScheduleState& sched, const TrainOptions& opts) {
  cfg.validate();
  if (dataset.empty()) throw DataError("train: empty dataset");
  bool aux = model.config().aux_enabled;
  bool any_augment = cfg.augment.flip_axial || cfg.augment.flip_coronal ||
                     cfg.augment.flip_sagittal || cfg.augment.rotate ||
                     cfg.augment.intensity_jitter;
  DiceConfig dice_cfg;
  History history;

  auto write_ckpt = [&](const std::string& name, int epoch) {
    if (opts.checkpoint_dir.empty()) return;
    std::filesystem::create_directories(opts.checkpoint_dir);
    Checkpoint ckpt = make_checkpoint(model, &opt, sched, epoch);
    save_checkpoint(opts.checkpoint_dir + "/" + name, ckpt);
  };

  double best_seen = sched.best;
  for (int epoch = opts.start_epoch + 1; epoch <= cfg.epochs; ++epoch) {
    // deterministic shuffle keyed by (seed, epoch)
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Pcg32 shuffle_rng(seed_mix(cfg.seed, static_cast<std::uint64_t>(epoch), 0x0D0));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.below(static_cast<std::uint32_t>(i))]);

    double lr_used = sched.lr;
    double sum_total = 0, sum_main = 0, sum_aux = 0;
    int steps = 0;
    for (std::size_t pos = 0; pos < order.size(); pos += cfg.batch_size) {
      std::size_t take = std::min<std::size_t>(cfg.batch_size, order.size() - pos);
      std::vector<Tensor<T>> vols, mains, auxs;
      for (std::size_t b = 0; b < take; ++b) {
        const TrainCase<T>& c = dataset[order[pos + b]];
        Tensor<T> v = c.input, mo = c.main_onehot, ao = c.aux_onehot;
        if (any_augment) {
          AugmentParams ap = sample_augment(
              cfg.augment, seed_mix(cfg.seed, static_cast<std::uint64_t>(epoch),
                                    static_cast<std::uint64_t>(order[pos + b])));
          apply_augment(ap, v, mo, ao);
        }
        vols.push_back(std::move(v));
        mains.push_back(std::move(mo));
        auxs.push_back(std::move(ao));
      }
      std::vector<const Tensor<T>*> vp, mp, ap;
      for (std::size_t b = 0; b < take; ++b) {
        vp.push_back(&vols[b]);
        mp.push_back(&mains[b]);
        ap.push_back(&auxs[b]);
      }
      Tensor<T> batch = stack_batch(vp);
      Tensor<T> main_gt = stack_batch(mp);
      Tensor<T> aux_gt = stack_batch(ap);

      ForwardOptions fwd_opts{Phase::train,
                              seed_mix(cfg.seed, static_cast<std::uint64_t>(epoch),
                                       static_cast<std::uint64_t>(steps), 0xD70),
                              false};
      model.zero_grads();
      auto out = forward(model, batch, fwd_opts);
      Tensor<T> l_main = dice_loss(out.main_probs, main_gt, dice_cfg);
      Tensor<T> l_aux =
          aux ? dice_loss(out.aux_probs, aux_gt, dice_cfg) : Tensor<T>::scalar(T(0));
      Tensor<T> total = combined_loss(l_main, l_aux, cfg.loss_weights);
      double loss_val = static_cast<double>(total.item());
      if (!std::isfinite(loss_val))
        throw Error(concat("non-finite training loss at epoch ", epoch, ", batch ", steps));
      backward(total);
      opt.step(model, sched.lr);

      sum_total += loss_val;
      sum_main += static_cast<double>(l_main.item());
      sum_aux += static_cast<double>(l_aux.item());
      ++steps;
    }

    double val = validation_dice(model, val_set.empty() ? dataset : val_set);
    EpochStats stats;
    stats.epoch = epoch;
    stats.loss_total = sum_total / steps;
    stats.loss_main = sum_main / steps;
    stats.loss_aux = sum_aux / steps;
    stats.lr = lr_used;
    stats.val_dice_mean = val;
    history.push_back(stats);

    lr_on_plateau(sched, val, cfg.plateau_patience, cfg.plateau_factor);

    if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0)
      write_ckpt(concat("ckpt_epoch", epoch, ".vlck"), epoch);
    if (val > best_seen) {
      best_seen = val;
      write_ckpt("best.vlck", epoch);
    }
  }
  write_ckpt("last.vlck", cfg.epochs);
  return history;
}

template void apply_augment(const AugmentParams&, Tensor<float>&, Tensor<float>&,
                            Tensor<float>&);
template void apply_augment(const AugmentParams&, Tensor<double>&, Tensor<double>&,
                            Tensor<double>&);
template class Optimizer<float>;
template class Optimizer<double>;
template double validation_dice(Model<float>&, const std::vector<TrainCase<float>>&);
template double validation_dice(Model<double>&, const std::vector<TrainCase<double>>&);
template History train(Model<float>&, const std::vector<TrainCase<float>>&,
                       const std::vector<TrainCase<float>>&, const TrainConfig&,
                       Optimizer<float>&, LRScheduleState&, const TrainOptions&);
template History train(Model<double>&, const std::vector<TrainCase<double>>&,
                       const std::vector<TrainCase<double>>&, const TrainConfig&,
                       Optimizer<double>&, LRScheduleState&, const TrainOptions&);

}  // namespace lobeseg
