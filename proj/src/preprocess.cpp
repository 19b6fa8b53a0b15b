#include "lobeseg/preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace lobeseg {

Volume clip_hu(const Volume& vol, const PreprocessConfig& cfg) {
  cfg.validate();
  Volume out = vol;
  for (auto& v : out.voxels) v = std::clamp(v, cfg.hu_lo, cfg.hu_hi);
  return out;
}

Volume zscore(const Volume& vol, double eps) {
  if (vol.voxels.empty()) throw DataError("zscore: empty volume");
  double mean = 0;
  for (float v : vol.voxels) mean += v;
  mean /= static_cast<double>(vol.voxels.size());
  double sq = 0;
  for (float v : vol.voxels) sq += (v - mean) * (v - mean);
  double stddev = std::sqrt(sq / static_cast<double>(vol.voxels.size()));
  double inv = 1.0 / (stddev + eps);
  Volume out = vol;
  for (auto& v : out.voxels) v = static_cast<float>((v - mean) * inv);
  return out;
}

namespace {

struct AxisMap {
  std::vector<std::int64_t> lo, hi, nearest;
  std::vector<double> frac;
};

AxisMap build_axis_map(std::int64_t src_n, std::int64_t dst_n) {
  AxisMap m;
  m.lo.resize(dst_n);
  m.hi.resize(dst_n);
  m.nearest.resize(dst_n);
  m.frac.resize(dst_n);
  double scale = static_cast<double>(src_n) / static_cast<double>(dst_n);
  for (std::int64_t i = 0; i < dst_n; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    double floor_src = std::floor(src);
    std::int64_t i0 = static_cast<std::int64_t>(floor_src);
    m.frac[i] = src - floor_src;
    m.lo[i] = std::clamp<std::int64_t>(i0, 0, src_n - 1);
    m.hi[i] = std::clamp<std::int64_t>(i0 + 1, 0, src_n - 1);
    // round half up, then clamp
    m.nearest[i] = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(std::floor(src + 0.5)), 0, src_n - 1);
  }
  return m;
}

void check_target(const Dims3& target) {
  if (target[0] < 1 || target[1] < 1 || target[2] < 1)
    throw DimensionError(concat("resample: invalid target dims ", dims_str(target)));
}

}  // namespace

Volume resample(const Volume& vol, Dims3 target, Interp interp) {
  vol.validate();
  check_target(target);
  Volume out;
  out.dims = target;
  // physical extent is preserved, so spacing scales with the dim ratio
  for (int a = 0; a < 3; ++a)
    out.spacing[a] = static_cast<float>(vol.spacing[a] * static_cast<double>(vol.dims[a]) /
                                        static_cast<double>(target[a]));
  out.voxels.resize(static_cast<std::size_t>(dims_numel(target)));

  AxisMap mz = build_axis_map(vol.dims[0], target[0]);
  AxisMap my = build_axis_map(vol.dims[1], target[1]);
  AxisMap mx = build_axis_map(vol.dims[2], target[2]);

  if (interp == Interp::nearest) {
    for (std::int64_t z = 0; z < target[0]; ++z)
      for (std::int64_t y = 0; y < target[1]; ++y)
        for (std::int64_t x = 0; x < target[2]; ++x)
          out.at(z, y, x) = vol.at(mz.nearest[z], my.nearest[y], mx.nearest[x]);
    return out;
  }

  for (std::int64_t z = 0; z < target[0]; ++z) {
    double fz = mz.frac[z];
    for (std::int64_t y = 0; y < target[1]; ++y) {
      double fy = my.frac[y];
      for (std::int64_t x = 0; x < target[2]; ++x) {
        double fx = mx.frac[x];
        double c00 = vol.at(mz.lo[z], my.lo[y], mx.lo[x]) * (1 - fx) +
                     vol.at(mz.lo[z], my.lo[y], mx.hi[x]) * fx;
        double c01 = vol.at(mz.lo[z], my.hi[y], mx.lo[x]) * (1 - fx) +
                     vol.at(mz.lo[z], my.hi[y], mx.hi[x]) * fx;
        double c10 = vol.at(mz.hi[z], my.lo[y], mx.lo[x]) * (1 - fx) +
                     vol.at(mz.hi[z], my.lo[y], mx.hi[x]) * fx;
        double c11 = vol.at(mz.hi[z], my.hi[y], mx.lo[x]) * (1 - fx) +
                     vol.at(mz.hi[z], my.hi[y], mx.hi[x]) * fx;
        double c0 = c00 * (1 - fy) + c01 * fy;
        double c1 = c10 * (1 - fy) + c11 * fy;
        out.at(z, y, x) = static_cast<float>(c0 * (1 - fz) + c1 * fz);
      }
    }
  }
  return out;
}

LabelMap resample(const LabelMap& labels, Dims3 target, Interp interp) {
  if (interp != Interp::nearest)
    throw ContractError("resample: label maps require nearest interpolation");
  labels.validate();
  check_target(target);
  LabelMap out;
  out.dims = target;
  out.vocabulary = labels.vocabulary;
  for (int a = 0; a < 3; ++a)
    out.spacing[a] = static_cast<float>(labels.spacing[a] * static_cast<double>(labels.dims[a]) /
                                        static_cast<double>(target[a]));
  out.voxels.resize(static_cast<std::size_t>(dims_numel(target)));
  AxisMap mz = build_axis_map(labels.dims[0], target[0]);
  AxisMap my = build_axis_map(labels.dims[1], target[1]);
  AxisMap mx = build_axis_map(labels.dims[2], target[2]);
  for (std::int64_t z = 0; z < target[0]; ++z)
    for (std::int64_t y = 0; y < target[1]; ++y)
      for (std::int64_t x = 0; x < target[2]; ++x)
        out.at(z, y, x) = labels.at(mz.nearest[z], my.nearest[y], mx.nearest[x]);
  return out;
}

int main_class_of(std::uint8_t label, int main_classes) {
  if (is_airway_class(label)) return 0;  // airways are background for the lobe task
  if (label >= main_classes)
    throw DataError(concat("unknown label index ", int(label), " for ", main_classes,
                           "-class lobe encoding"));
  return label;
}

int aux_class_of(std::uint8_t label, int aux_classes) {
  if (aux_classes != 3)
    throw ConfigError(concat("aux one-hot mapping is defined for 3 classes, got ", aux_classes));
  if (label == kTrachea) return 1;
  if (label == kBronchi) return 2;
  if (label > kBronchi)
    throw DataError(concat("unknown label index ", int(label), " for airway encoding"));
  return 0;
}

template <class T>
PreprocessedCase<T> preprocess_case(const Volume& vol, const LabelMap& labels,
                                    const PreprocessConfig& cfg) {
  cfg.validate();
  if (vol.dims != labels.dims)
    throw DimensionError(concat("preprocess_case: volume dims ", dims_str(vol.dims),
                                " vs labels ", dims_str(labels.dims)));
  std::int64_t s = cfg.target_edge;
  Volume prepped = resample(zscore(clip_hu(vol, cfg), cfg.eps), {s, s, s}, Interp::trilinear);
  LabelMap lab = resample(labels, {s, s, s}, Interp::nearest);

  std::int64_t sp = s * s * s;
  std::vector<T> input(static_cast<std::size_t>(sp));
  for (std::int64_t i = 0; i < sp; ++i) input[i] = static_cast<T>(prepped.voxels[i]);

  std::vector<T> main_oh(static_cast<std::size_t>(cfg.main_classes * sp), T(0));
  std::vector<T> aux_oh(static_cast<std::size_t>(cfg.aux_classes * sp), T(0));
  for (std::int64_t i = 0; i < sp; ++i) {
    std::uint8_t label = lab.voxels[i];
    main_oh[static_cast<std::size_t>(main_class_of(label, cfg.main_classes)) * sp + i] = T(1);
    aux_oh[static_cast<std::size_t>(aux_class_of(label, cfg.aux_classes)) * sp + i] = T(1);
  }

  PreprocessedCase<T> out;
  out.input = Tensor<T>::from_vector({1, 1, s, s, s}, std::move(input));
  out.main_onehot = Tensor<T>::from_vector({1, cfg.main_classes, s, s, s}, std::move(main_oh));
  out.aux_onehot = Tensor<T>::from_vector({1, cfg.aux_classes, s, s, s}, std::move(aux_oh));
  return out;
}

template PreprocessedCase<float> preprocess_case(const Volume&, const LabelMap&,
                                                 const PreprocessConfig&);
template PreprocessedCase<double> preprocess_case(const Volume&, const LabelMap&,
                                                  const PreprocessConfig&);

}  // namespace lobeseg
