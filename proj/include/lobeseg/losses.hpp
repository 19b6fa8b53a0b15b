#ifndef LOBESEG_LOSSES_HPP
#define LOBESEG_LOSSES_HPP

#include <string>
#include <vector>

#include "lobeseg/ops.hpp"
#include "lobeseg/volume.hpp"

namespace lobeseg {

struct DiceConfig {
  double delta = 1e-5;             // smoothing term, must be > 0
  bool include_background = true;  // background channel participates in the loss mean
  // Drop the conventional factor 2 in the numerator (the per-class overlap
  // ratio then peaks at 1/2 for a perfect prediction). Off by default.
  bool literal_numerator = false;

  void validate() const {
    if (!(delta > 0)) throw ConfigError(concat("dice delta must be > 0, got ", delta));
  }
};

struct LossWeights {
  double lambda_main = 0.5;
  double lambda_aux = 0.5;

  void validate() const {
    if (lambda_main < 0 || lambda_aux < 0)
      throw ConfigError("loss weights must be non-negative");
    if (!(lambda_main + lambda_aux > 0))
      throw ConfigError("loss weights must not both be zero");
  }
};

// Per-class soft Dice (2*sum(p*g)+d)/(sum(p^2)+sum(g^2)+d) -> [C], differentiable
// through probs.
template <class T>
Tensor<T> dice_per_class(const Tensor<T>& probs, const Tensor<T>& onehot, const DiceConfig& cfg);

// 1 - mean over classes of the per-class soft Dice (background excluded from
// the mean when include_background is false).
template <class T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& onehot, const DiceConfig& cfg);

double combined_loss(double l_main, double l_aux, const LossWeights& w);
template <class T>
Tensor<T> combined_loss(const Tensor<T>& l_main, const Tensor<T>& l_aux, const LossWeights& w);

// Hard overlap 2|A&B|/(|A|+|B|) of one class between two label maps; 1.0 when
// both sets are empty.
double hard_dice(const LabelMap& pred, const LabelMap& gt, int class_id);

struct TTestResult {
  double t = 0;
  double p = 1;
  double df = 0;
  bool degenerate = false;  // zero-variance input
};

// paired: one-sample t on a-b differences; unpaired: Welch's two-sample test.
// Two-sided p from the t-distribution survival function.
TTestResult t_test(const std::vector<double>& sample_a, const std::vector<double>& sample_b,
                   bool paired);

struct EmphysemaStats {
  std::string region;
  double percent_laa = 0;         // % of region voxels at or below the HU threshold
  double percentile_density = 0;  // HU value at the given percentile (nearest rank)
};

EmphysemaStats emphysema_stats(const Volume& vol, const std::vector<std::uint8_t>& region_mask,
                               double threshold_hu = -950.0, double percentile = 15.0,
                               std::string region_name = "region");

EmphysemaStats emphysema_stats_for_classes(const Volume& vol, const LabelMap& mask,
                                           const std::vector<std::uint8_t>& class_ids,
                                           double threshold_hu, double percentile,
                                           std::string region_name);

// Per-class evaluation table in the style of the published model comparisons.
struct DiceReport {
  std::vector<std::string> class_names;
  std::vector<std::string> case_ids;
  std::vector<std::vector<double>> per_case;  // [case][class]
  std::vector<double> mean;                   // per class
  std::vector<double> stddev;                 // sample std per class
  std::vector<double> p_value;                // empty unless a comparison is attached
  std::vector<bool> significant;              // p < 0.05

  static DiceReport build(std::vector<std::string> class_names,
                          std::vector<std::string> case_ids,
                          std::vector<std::vector<double>> per_case);
  void attach_comparison(const DiceReport& other, bool paired);

  // header: class,mean,std,p_value,significant
  std::string to_csv() const;
  // long form: case_id,class,dice
  std::string per_case_csv() const;
};

extern template Tensor<float> dice_per_class(const Tensor<float>&, const Tensor<float>&,
                                             const DiceConfig&);
extern template Tensor<double> dice_per_class(const Tensor<double>&, const Tensor<double>&,
                                              const DiceConfig&);
extern template Tensor<float> dice_loss(const Tensor<float>&, const Tensor<float>&,
                                        const DiceConfig&);
extern template Tensor<double> dice_loss(const Tensor<double>&, const Tensor<double>&,
                                         const DiceConfig&);
extern template Tensor<float> combined_loss(const Tensor<float>&, const Tensor<float>&,
                                            const LossWeights&);
extern template Tensor<double> combined_loss(const Tensor<double>&, const Tensor<double>&,
                                             const LossWeights&);

}  // namespace lobeseg

#endif  // LOBESEG_LOSSES_HPP
