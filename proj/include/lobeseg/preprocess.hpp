#ifndef LOBESEG_PREPROCESS_HPP
#define LOBESEG_PREPROCESS_HPP

#include "lobeseg/tensor.hpp"
#include "lobeseg/volume.hpp"

namespace lobeseg {

struct PreprocessConfig {
  float hu_lo = -1000.0f;
  float hu_hi = 400.0f;
  std::int64_t target_edge = 32;  // cubic resample target S
  double eps = 1e-8;              // z-score guard for constant volumes
  int main_classes = 6;           // background + five lobes
  int aux_classes = 3;            // background + two airway classes

  void validate() const {
    if (!(hu_lo < hu_hi))
      throw ConfigError(concat("preprocess: hu_lo ", hu_lo, " must be < hu_hi ", hu_hi));
    if (target_edge < 8)
      throw ConfigError(concat("preprocess: target edge must be >= 8, got ", target_edge));
    if (!(eps > 0)) throw ConfigError("preprocess: eps must be positive");
  }
};

enum class Interp { trilinear, nearest };

// Truncate HU values into [hu_lo, hu_hi]; in-range voxels are unchanged.
Volume clip_hu(const Volume& vol, const PreprocessConfig& cfg);

// Normalize to zero mean / unit variance (population statistics). A constant
// volume maps to all zeros via the eps guard.
Volume zscore(const Volume& vol, double eps = 1e-8);

// Resample to target dims. Trilinear uses the align-corners-false coordinate
// mapping src = (dst+0.5)*scale - 0.5 with border-replicate sampling; nearest
// rounds the same mapping half-up. Interior arithmetic is double precision.
Volume resample(const Volume& vol, Dims3 target, Interp interp);

// Label maps only support nearest interpolation.
LabelMap resample(const LabelMap& labels, Dims3 target, Interp interp);

// Label-index routing between the two task heads: airways count as background
// for the lobe task, lobes count as background for the airway task.
int main_class_of(std::uint8_t label, int main_classes);
int aux_class_of(std::uint8_t label, int aux_classes);

template <class T>
struct PreprocessedCase {
  Tensor<T> input;        // [1,1,S,S,S]
  Tensor<T> main_onehot;  // [1,main_classes,S,S,S]
  Tensor<T> aux_onehot;   // [1,aux_classes,S,S,S]
};

// Full pipeline in fixed order: clip -> normalize -> resample -> one-hot split.
template <class T>
PreprocessedCase<T> preprocess_case(const Volume& vol, const LabelMap& labels,
                                    const PreprocessConfig& cfg);

extern template PreprocessedCase<float> preprocess_case(const Volume&, const LabelMap&,
                                                        const PreprocessConfig&);
extern template PreprocessedCase<double> preprocess_case(const Volume&, const LabelMap&,
                                                         const PreprocessConfig&);

}  // namespace lobeseg

#endif  // LOBESEG_PREPROCESS_HPP
