#include "lobeseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <boost/math/distributions/students_t.hpp>

namespace lobeseg {

template <class T>
Tensor<T> dice_per_class(const Tensor<T>& probs, const Tensor<T>& onehot, const DiceConfig& cfg) {
  cfg.validate();
  if (probs.shape() != onehot.shape())
    throw DimensionError(concat("dice_per_class: probs ", shape_str(probs.shape()),
                                " vs onehot ", shape_str(onehot.shape())));
  if (probs.ndim() < 2)
    throw DimensionError(concat("dice_per_class: expected [N,C,...], got ",
                                shape_str(probs.shape())));
  T delta = static_cast<T>(cfg.delta);
  T factor = cfg.literal_numerator ? T(1) : T(2);
  Tensor<T> inter = sum_per_channel(mul(probs, onehot));
  Tensor<T> pp = sum_per_channel(mul(probs, probs));
  Tensor<T> gg = sum_per_channel(mul(onehot, onehot));
  Tensor<T> numer = add_scalar(mul_scalar(inter, factor), delta);
  Tensor<T> denom = add_scalar(add(pp, gg), delta);
  return div(numer, denom);
}

template <class T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& onehot, const DiceConfig& cfg) {
  Tensor<T> dice = dice_per_class(probs, onehot, cfg);
  if (!cfg.include_background && dice.numel() > 1)
    dice = slice_range(dice, 1, dice.numel());
  return add_scalar(mul_scalar(mean_all(dice), T(-1)), T(1));
}

double combined_loss(double l_main, double l_aux, const LossWeights& w) {
  w.validate();
  return w.lambda_main * l_main + w.lambda_aux * l_aux;
}

template <class T>
Tensor<T> combined_loss(const Tensor<T>& l_main, const Tensor<T>& l_aux, const LossWeights& w) {
  w.validate();
  return add(mul_scalar(l_main, static_cast<T>(w.lambda_main)),
             mul_scalar(l_aux, static_cast<T>(w.lambda_aux)));
}

double hard_dice(const LabelMap& pred, const LabelMap& gt, int class_id) {
  if (pred.dims != gt.dims)
    throw DimensionError(concat("hard_dice: dims ", dims_str(pred.dims), " vs ",
                                dims_str(gt.dims)));
  std::int64_t a = 0, b = 0, inter = 0;
  for (std::size_t i = 0; i < pred.voxels.size(); ++i) {
    bool in_a = pred.voxels[i] == class_id;
    bool in_b = gt.voxels[i] == class_id;
    a += in_a;
    b += in_b;
    inter += in_a && in_b;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

namespace {

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_var(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0;
  double s = 0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s / static_cast<double>(v.size() - 1);
}

double two_sided_p(double t, double df) {
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
}

TTestResult degenerate_result(double mean_diff) {
  TTestResult r;
  r.degenerate = true;
  if (mean_diff == 0.0) {
    r.t = 0;
    r.p = 1;
  } else {
    r.t = mean_diff > 0 ? std::numeric_limits<double>::infinity()
                        : -std::numeric_limits<double>::infinity();
    r.p = 0;
  }
  return r;
}

}  // namespace

TTestResult t_test(const std::vector<double>& sample_a, const std::vector<double>& sample_b,
                   bool paired) {
  if (sample_a.size() < 2 || sample_b.size() < 2)
    throw ValueError(concat("t_test: need at least 2 samples per group, got ", sample_a.size(),
                            " and ", sample_b.size()));
  if (paired) {
    if (sample_a.size() != sample_b.size())
      throw DimensionError(concat("t_test: paired samples differ in length: ", sample_a.size(),
                                  " vs ", sample_b.size()));
    std::vector<double> diff(sample_a.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = sample_a[i] - sample_b[i];
    double md = mean_of(diff);
    double var = sample_var(diff, md);
    double n = static_cast<double>(diff.size());
    if (var == 0.0) {
      TTestResult r = degenerate_result(md);
      r.df = n - 1;
      return r;
    }
    TTestResult r;
    r.df = n - 1;
    r.t = md / std::sqrt(var / n);
    r.p = two_sided_p(r.t, r.df);
    return r;
  }

  double ma = mean_of(sample_a), mb = mean_of(sample_b);
  double va = sample_var(sample_a, ma), vb = sample_var(sample_b, mb);
  double na = static_cast<double>(sample_a.size()), nb = static_cast<double>(sample_b.size());
  double se2 = va / na + vb / nb;
  if (se2 == 0.0) {
    TTestResult r = degenerate_result(ma - mb);
    r.df = na + nb - 2;
    return r;
  }
  TTestResult r;
  r.t = (ma - mb) / std::sqrt(se2);
  // Welch-Satterthwaite degrees of freedom.
  double term_a = (va / na) * (va / na) / (na - 1);
  double term_b = (vb / nb) * (vb / nb) / (nb - 1);
  r.df = se2 * se2 / (term_a + term_b);
  r.p = two_sided_p(r.t, r.df);
  return r;
}

EmphysemaStats emphysema_stats(const Volume& vol, const std::vector<std::uint8_t>& region_mask,
                               double threshold_hu, double percentile, std::string region_name) {
  if (region_mask.size() != vol.voxels.size())
    throw DimensionError(concat("emphysema_stats: mask length ", region_mask.size(),
                                " does not match volume ", vol.voxels.size()));
  if (!(percentile > 0.0 && percentile <= 100.0))
    throw ValueError(concat("emphysema_stats: percentile must be in (0,100], got ", percentile));
  std::vector<float> region_hu;
  std::int64_t low = 0;
  for (std::size_t i = 0; i < region_mask.size(); ++i) {
    if (!region_mask[i]) continue;
    region_hu.push_back(vol.voxels[i]);
    if (vol.voxels[i] <= threshold_hu) ++low;
  }
  if (region_hu.empty())
    throw DataError(concat("emphysema_stats: empty region '", region_name, "'"));

  EmphysemaStats s;
  s.region = std::move(region_name);
  s.percent_laa = 100.0 * static_cast<double>(low) / static_cast<double>(region_hu.size());
  std::sort(region_hu.begin(), region_hu.end());
  // nearest-rank percentile: value at index ceil(P/100 * n), 1-based
  std::size_t rank = static_cast<std::size_t>(
      std::ceil(percentile / 100.0 * static_cast<double>(region_hu.size())));
  if (rank < 1) rank = 1;
  if (rank > region_hu.size()) rank = region_hu.size();
  s.percentile_density = region_hu[rank - 1];
  return s;
}

EmphysemaStats emphysema_stats_for_classes(const Volume& vol, const LabelMap& mask,
                                           const std::vector<std::uint8_t>& class_ids,
                                           double threshold_hu, double percentile,
                                           std::string region_name) {
  if (mask.dims != vol.dims)
    throw DimensionError(concat("emphysema_stats: mask dims ", dims_str(mask.dims),
                                " vs volume ", dims_str(vol.dims)));
  std::vector<std::uint8_t> region(vol.voxels.size(), 0);
  for (std::size_t i = 0; i < region.size(); ++i)
    for (std::uint8_t c : class_ids)
      if (mask.voxels[i] == c) {
        region[i] = 1;
        break;
      }
  return emphysema_stats(vol, region, threshold_hu, percentile, std::move(region_name));
}

DiceReport DiceReport::build(std::vector<std::string> class_names,
                             std::vector<std::string> case_ids,
                             std::vector<std::vector<double>> per_case) {
  DiceReport r;
  r.class_names = std::move(class_names);
  r.case_ids = std::move(case_ids);
  r.per_case = std::move(per_case);
  if (r.per_case.size() != r.case_ids.size())
    throw DimensionError("DiceReport: one score row per case required");
  for (const auto& row : r.per_case)
    if (row.size() != r.class_names.size())
      throw DimensionError("DiceReport: one score per class required");
  std::size_t nc = r.class_names.size();
  r.mean.assign(nc, 0.0);
  r.stddev.assign(nc, 0.0);
  std::size_t n = r.per_case.size();
  if (n == 0) return r;
  for (std::size_t c = 0; c < nc; ++c) {
    double m = 0;
    for (const auto& row : r.per_case) m += row[c];
    m /= static_cast<double>(n);
    r.mean[c] = m;
    if (n > 1) {
      double s = 0;
      for (const auto& row : r.per_case) s += (row[c] - m) * (row[c] - m);
      r.stddev[c] = std::sqrt(s / static_cast<double>(n - 1));
    }
  }
  return r;
}

void DiceReport::attach_comparison(const DiceReport& other, bool paired) {
  if (other.class_names != class_names)
    throw DimensionError("DiceReport comparison: class sets differ");
  p_value.assign(class_names.size(), 1.0);
  significant.assign(class_names.size(), false);
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    std::vector<double> a, b;
    for (const auto& row : per_case) a.push_back(row[c]);
    for (const auto& row : other.per_case) b.push_back(row[c]);
    TTestResult t = t_test(a, b, paired);
    p_value[c] = t.p;
    significant[c] = t.p < 0.05;
  }
}

namespace {
std::string fmt_double(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}
}  // namespace

std::string DiceReport::to_csv() const {
  std::string out = "class,mean,std,p_value,significant\n";
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    out += class_names[c];
    out += ',';
    out += fmt_double(mean[c]);
    out += ',';
    out += fmt_double(stddev[c]);
    out += ',';
    if (!p_value.empty()) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.6g", p_value[c]);
      out += buf;
      out += ',';
      out += significant[c] ? "*" : "";
    } else {
      out += ',';
    }
    out += '\n';
  }
  return out;
}

std::string DiceReport::per_case_csv() const {
  std::string out = "case_id,class,dice\n";
  for (std::size_t i = 0; i < case_ids.size(); ++i)
    for (std::size_t c = 0; c < class_names.size(); ++c) {
      out += case_ids[i];
      out += ',';
      out += class_names[c];
      out += ',';
      out += fmt_double(per_case[i][c]);
      out += '\n';
    }
  return out;
}

template Tensor<float> dice_per_class(const Tensor<float>&, const Tensor<float>&,
                                      const DiceConfig&);
template Tensor<double> dice_per_class(const Tensor<double>&, const Tensor<double>&,
                                       const DiceConfig&);
template Tensor<float> dice_loss(const Tensor<float>&, const Tensor<float>&, const DiceConfig&);
template Tensor<double> dice_loss(const Tensor<double>&, const Tensor<double>&,
                                  const DiceConfig&);
template Tensor<float> combined_loss(const Tensor<float>&, const Tensor<float>&,
                                     const LossWeights&);
template Tensor<double> combined_loss(const Tensor<double>&, const Tensor<double>&,
                                      const LossWeights&);

}  // namespace lobeseg
