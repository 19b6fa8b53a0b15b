#include "lobeseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace lobeseg {

const char* to_string(DiseaseMode mode) {
  switch (mode) {
    case DiseaseMode::none: return "none";
    case DiseaseMode::cancer: return "cancer";
    case DiseaseMode::covid: return "covid";
    case DiseaseMode::copd: return "copd";
    case DiseaseMode::collapse: return "collapse";
  }
  return "none";
}

DiseaseMode disease_from_string(const std::string& name) {
  if (name == "none") return DiseaseMode::none;
  if (name == "cancer") return DiseaseMode::cancer;
  if (name == "covid") return DiseaseMode::covid;
  if (name == "copd") return DiseaseMode::copd;
  if (name == "collapse") return DiseaseMode::collapse;
  throw ValueError(concat("unknown disease mode '", name, "'"));
}

namespace {

using Vec3 = std::array<double, 3>;  // (x,y,z)

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 add(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 scale(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
Vec3 unit(const Vec3& a) {
  double n = norm(a);
  return {a[0] / n, a[1] / n, a[2] / n};
}

bool inside(const Ellipsoid& e, const Vec3& p) {
  double s = 0;
  for (int i = 0; i < 3; ++i) {
    double d = (p[i] - e.center[i]) / e.radii[i];
    s += d * d;
  }
  return s < 1.0;
}

double signed_side(const FissurePlane& f, const Vec3& p) {
  Vec3 n = unit(f.normal);
  double s = dot(sub(p, f.point), n);
  return s + f.wave_amp * std::sin(6.283185307179586 * f.wave_freq * p[0] + f.wave_phase);
}

std::uint8_t lobe_of(const PhantomSpec& spec, const Vec3& p) {
  if (inside(spec.right_lung, p)) {
    if (signed_side(spec.right_oblique, p) < 0) return kLowerRightLobe;
    if (signed_side(spec.right_horizontal, p) < 0) return kMiddleRightLobe;
    return kUpperRightLobe;
  }
  if (inside(spec.left_lung, p)) {
    if (signed_side(spec.left_oblique, p) < 0) return kLowerLeftLobe;
    return kUpperLeftLobe;
  }
  return kBackground;
}

// squared distance from point q to segment [a,b], all in voxel coordinates
double segment_dist2(const Vec3& q, const Vec3& a, const Vec3& b) {
  Vec3 ab = sub(b, a);
  double len2 = dot(ab, ab);
  double t = len2 > 0 ? std::clamp(dot(sub(q, a), ab) / len2, 0.0, 1.0) : 0.0;
  Vec3 c = add(a, scale(ab, t));
  Vec3 d = sub(q, c);
  return dot(d, d);
}

struct Segment {
  Vec3 a, b;      // normalized coordinates
  double radius;  // normalized
  std::uint8_t cls;
  int branch_id;  // -1 for trunk pieces
};

Vec3 voxel_center(std::int64_t z, std::int64_t y, std::int64_t x, double inv_s) {
  return {(x + 0.5) * inv_s, (y + 0.5) * inv_s, (z + 0.5) * inv_s};
}

void paint_segment(const Segment& seg, std::int64_t s, LabelMap& labels,
                   std::vector<BranchDebug>* branches) {
  // thin branches keep a minimum rasterized thickness at coarse grids
  double rv = std::max(seg.radius * static_cast<double>(s), 0.62);
  Vec3 av = {seg.a[0] * s, seg.a[1] * s, seg.a[2] * s};
  Vec3 bv = {seg.b[0] * s, seg.b[1] * s, seg.b[2] * s};
  auto lo = [&](int i) {
    return std::max<std::int64_t>(
        0, static_cast<std::int64_t>(std::floor(std::min(av[i], bv[i]) - rv - 1)));
  };
  auto hi = [&](int i) {
    return std::min<std::int64_t>(
        s - 1, static_cast<std::int64_t>(std::ceil(std::max(av[i], bv[i]) + rv + 1)));
  };
  double r2 = rv * rv;
  for (std::int64_t z = lo(2); z <= hi(2); ++z)
    for (std::int64_t y = lo(1); y <= hi(1); ++y)
      for (std::int64_t x = lo(0); x <= hi(0); ++x) {
        Vec3 q = {x + 0.5, y + 0.5, z + 0.5};
        if (segment_dist2(q, av, bv) > r2) continue;
        std::int64_t idx = labels.index(z, y, x);
        labels.voxels[static_cast<std::size_t>(idx)] = seg.cls;
        if (branches && seg.branch_id >= 0)
          (*branches)[static_cast<std::size_t>(seg.branch_id)].voxel_indices.push_back(idx);
      }
}

Vec3 hilum_of(const Ellipsoid& lung, bool right_side) {
  double medial = right_side ? 1.0 : -1.0;
  return {lung.center[0] + medial * 0.55 * lung.radii[0], lung.center[1],
          lung.center[2] + 0.10 * lung.radii[2]};
}

}  // namespace

void PhantomSpec::validate() const {
  if (grid_edge < 16)
    throw ConfigError(concat("phantom grid edge must be >= 16, got ", grid_edge));
  if (severity < 0.0 || severity > 1.0)
    throw ConfigError(concat("phantom severity must be in [0,1], got ", severity));
  for (const Ellipsoid* e : {&right_lung, &left_lung}) {
    for (int i = 0; i < 3; ++i) {
      if (!(e->radii[i] > 0.01))
        throw ConfigError(concat("lung radius must exceed 0.01, got ", e->radii[i]));
      if (e->center[i] - e->radii[i] < 0.01 || e->center[i] + e->radii[i] > 0.99)
        throw ConfigError("lung ellipsoid leaves the grid");
    }
  }
  if (right_lung.center[0] + right_lung.radii[0] >= left_lung.center[0] - left_lung.radii[0])
    throw ConfigError("lung ellipsoids overlap");
  for (const FissurePlane* f : {&right_oblique, &right_horizontal, &left_oblique})
    if (norm(f->normal) < 1e-9) throw ConfigError("degenerate fissure plane normal");
  if (!(airway.trunk_radius > 0 && airway.primary_radius > 0 && airway.branch_radius > 0))
    throw ConfigError("airway radii must be positive");
  if (!(noise_sigma >= 0)) throw ConfigError("noise sigma must be non-negative");
}

std::pair<Volume, LabelMap> generate_phantom(const PhantomSpec& spec, PhantomDetail* detail) {
  spec.validate();
  std::int64_t s = spec.grid_edge;
  double inv_s = 1.0 / static_cast<double>(s);

  LabelMap labels;
  labels.dims = {s, s, s};
  labels.vocabulary = lung_vocabulary();
  float mm = static_cast<float>(300.0 / static_cast<double>(s));
  labels.spacing = {mm, mm, mm};
  labels.voxels.assign(static_cast<std::size_t>(s * s * s), kBackground);

  // lobe labels and centroids
  std::array<Vec3, 8> centroid_sum{};
  std::array<std::int64_t, 8> counts{};
  for (std::int64_t z = 0; z < s; ++z)
    for (std::int64_t y = 0; y < s; ++y)
      for (std::int64_t x = 0; x < s; ++x) {
        Vec3 p = voxel_center(z, y, x, inv_s);
        std::uint8_t c = lobe_of(spec, p);
        if (c != kBackground) {
          labels.at(z, y, x) = c;
          centroid_sum[c] = add(centroid_sum[c], p);
          ++counts[c];
        }
      }

  // airway tree: trachea down to the carina, primaries to each hilum, then a
  // branch routed into every lobe (plus small distal twigs)
  Vec3 carina = {0.5, 0.5, 0.58};
  Vec3 trachea_top = {0.5, 0.5, 0.92};
  Vec3 hil_r = hilum_of(spec.right_lung, true);
  Vec3 hil_l = hilum_of(spec.left_lung, false);

  std::vector<Segment> trunk = {
      {trachea_top, carina, spec.airway.trunk_radius, kTrachea, -1},
      {carina, hil_r, spec.airway.primary_radius, kTrachea, -1},
      {carina, hil_l, spec.airway.primary_radius, kTrachea, -1},
  };

  std::vector<Segment> branch_segments;
  std::vector<BranchDebug> branches;
  const std::uint8_t lobes[5] = {kLowerRightLobe, kMiddleRightLobe, kUpperRightLobe,
                                 kLowerLeftLobe, kUpperLeftLobe};
  for (std::uint8_t lobe : lobes) {
    if (counts[lobe] == 0) continue;
    Vec3 centroid = scale(centroid_sum[lobe], 1.0 / static_cast<double>(counts[lobe]));
    Vec3 hilum = is_right_lung_lobe(lobe) ? hil_r : hil_l;
    // march from the hilum towards the centroid until we are inside the lobe
    Vec3 dir = sub(centroid, hilum);
    double dist = norm(dir);
    Vec3 d = unit(dir);
    double step = 0.25 * inv_s;
    double t_entry = 0.0;
    for (double t = 0.0; t <= dist; t += step) {
      Vec3 p = add(hilum, scale(d, t));
      std::int64_t zx = std::clamp<std::int64_t>(static_cast<std::int64_t>(p[2] * s), 0, s - 1);
      std::int64_t yx = std::clamp<std::int64_t>(static_cast<std::int64_t>(p[1] * s), 0, s - 1);
      std::int64_t xx = std::clamp<std::int64_t>(static_cast<std::int64_t>(p[0] * s), 0, s - 1);
      if (labels.at(zx, yx, xx) == lobe) {
        t_entry = t;
        break;
      }
    }
    Vec3 entry = add(hilum, scale(d, std::max(0.0, t_entry - inv_s)));
    int branch_id = static_cast<int>(branches.size());
    branches.push_back({lobe, {}});
    // feeder from the hilum to the lobe entry stays a primary-class segment
    branch_segments.push_back({hilum, entry, spec.airway.primary_radius * 0.8, kTrachea, -1});
    branch_segments.push_back({entry, centroid, spec.airway.branch_radius, kBronchi, branch_id});
    if (spec.airway.branch_depth >= 2) {
      // two short distal twigs, deterministically splayed in the x-y plane
      Vec3 bd = unit(sub(centroid, entry));
      for (double ang : {0.9, -0.9}) {
        double ca = std::cos(ang), sa = std::sin(ang);
        Vec3 twig_dir = {bd[0] * ca - bd[1] * sa, bd[0] * sa + bd[1] * ca, bd[2] * 0.5};
        Vec3 tip = add(centroid, scale(unit(twig_dir), 0.035));
        branch_segments.push_back(
            {centroid, tip, spec.airway.branch_radius * 0.8, kBronchi, branch_id});
      }
    }
  }

  for (const Segment& seg : trunk) paint_segment(seg, s, labels, nullptr);
  for (const Segment& seg : branch_segments)
    paint_segment(seg, s, labels, seg.branch_id >= 0 ? &branches : nullptr);

  // HU field: per-tissue level plus seeded noise, single stream in voxel order
  Volume vol;
  vol.dims = labels.dims;
  vol.spacing = labels.spacing;
  vol.voxels.resize(labels.voxels.size());
  Pcg32 rng(seed_mix(spec.seed, 0x9A17));
  for (std::size_t i = 0; i < vol.voxels.size(); ++i) {
    std::uint8_t c = labels.voxels[i];
    double level = c == kBackground           ? spec.background_hu
                   : is_airway_class(c)       ? spec.airway_hu
                                              : spec.lung_hu;
    vol.voxels[i] = static_cast<float>(level + spec.noise_sigma * rng.next_normal());
  }

  if (detail) detail->lobar_branches = std::move(branches);
  return {std::move(vol), std::move(labels)};
}

std::uint8_t collapse_target_lobe(std::uint64_t seed, const LabelMap& labels) {
  auto counts = labels.class_counts();
  std::uint64_t start = seed_mix(seed, 0xC011) % 5;
  for (int k = 0; k < 5; ++k) {
    std::uint8_t lobe = static_cast<std::uint8_t>(1 + (start + k) % 5);
    if (lobe < counts.size() && counts[lobe] > 0) return lobe;
  }
  throw DataError("collapse: no lobe voxels present");
}

namespace {

std::vector<std::int64_t> lung_voxel_indices(const LabelMap& labels) {
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < labels.voxels.size(); ++i)
    if (is_lobe_class(labels.voxels[i])) out.push_back(static_cast<std::int64_t>(i));
  return out;
}

Vec3 index_to_vox(const LabelMap& labels, std::int64_t idx) {
  std::int64_t w = labels.dims[2], h = labels.dims[1];
  std::int64_t z = idx / (h * w);
  std::int64_t y = (idx / w) % h;
  std::int64_t x = idx % w;
  return {x + 0.5, y + 0.5, z + 0.5};
}

void bump_sphere(Volume& vol, const LabelMap& labels, Vec3 center_vox, double radius_vox,
                 double hu_delta) {
  std::int64_t zlo = std::max<std::int64_t>(0, std::int64_t(center_vox[2] - radius_vox - 1));
  std::int64_t zhi = std::min(vol.dims[0] - 1, std::int64_t(center_vox[2] + radius_vox + 1));
  std::int64_t ylo = std::max<std::int64_t>(0, std::int64_t(center_vox[1] - radius_vox - 1));
  std::int64_t yhi = std::min(vol.dims[1] - 1, std::int64_t(center_vox[1] + radius_vox + 1));
  std::int64_t xlo = std::max<std::int64_t>(0, std::int64_t(center_vox[0] - radius_vox - 1));
  std::int64_t xhi = std::min(vol.dims[2] - 1, std::int64_t(center_vox[0] + radius_vox + 1));
  double r2 = radius_vox * radius_vox;
  for (std::int64_t z = zlo; z <= zhi; ++z)
    for (std::int64_t y = ylo; y <= yhi; ++y)
      for (std::int64_t x = xlo; x <= xhi; ++x) {
        double dz = z + 0.5 - center_vox[2], dy = y + 0.5 - center_vox[1],
               dx = x + 0.5 - center_vox[0];
        if (dz * dz + dy * dy + dx * dx > r2) continue;
        if (!is_lobe_class(labels.at(z, y, x))) continue;
        vol.at(z, y, x) += static_cast<float>(hu_delta);
      }
}

void apply_cancer(Volume& vol, const LabelMap& labels, double severity, Pcg32& rng) {
  // candidate centers: voxels on a fissure (adjacent different lobes of one lung)
  std::vector<std::int64_t> fissure;
  std::int64_t d = labels.dims[0], h = labels.dims[1], w = labels.dims[2];
  for (std::int64_t z = 1; z + 1 < d; ++z)
    for (std::int64_t y = 1; y + 1 < h; ++y)
      for (std::int64_t x = 1; x + 1 < w; ++x) {
        std::uint8_t c = labels.at(z, y, x);
        if (!is_lobe_class(c)) continue;
        std::uint8_t zn = labels.at(z + 1, y, x), yn = labels.at(z, y + 1, x),
                     xn = labels.at(z, y, x + 1);
        for (std::uint8_t nb : {zn, yn, xn})
          if (is_lobe_class(nb) && nb != c &&
              is_right_lung_lobe(nb) == is_right_lung_lobe(c)) {
            fissure.push_back(labels.index(z, y, x));
            break;
          }
      }
  if (fissure.empty()) throw DataError("cancer: no fissure surface found");
  Vec3 center =
      index_to_vox(labels, fissure[rng.below(static_cast<std::uint32_t>(fissure.size()))]);
  double radius = (0.04 + 0.10 * severity) * static_cast<double>(labels.dims[0]);
  bump_sphere(vol, labels, center, radius, 600.0);
}

void apply_covid(Volume& vol, const LabelMap& labels, double severity, Pcg32& rng) {
  auto lung = lung_voxel_indices(labels);
  if (lung.empty()) throw DataError("covid: no lung voxels");
  int patches = 2 + static_cast<int>(std::lround(6.0 * severity));
  for (int k = 0; k < patches; ++k) {
    Vec3 center = index_to_vox(labels, lung[rng.below(static_cast<std::uint32_t>(lung.size()))]);
    double radius = (0.03 + 0.05 * rng.next_double()) * static_cast<double>(labels.dims[0]);
    bump_sphere(vol, labels, center, radius, 400.0);
  }
}

void apply_copd(Volume& vol, const LabelMap& labels, double severity, Pcg32& rng) {
  auto lung = lung_voxel_indices(labels);
  if (lung.empty()) throw DataError("copd: no lung voxels");
  double scale_vox = static_cast<double>(labels.dims[0]) / 64.0;
  std::int64_t target =
      static_cast<std::int64_t>(0.30 * severity * static_cast<double>(lung.size()));
  std::vector<bool> converted(vol.voxels.size(), false);
  std::int64_t done = 0;
  int guard = 0;
  while (done < target && guard++ < 100000) {
    Vec3 c = index_to_vox(labels, lung[rng.below(static_cast<std::uint32_t>(lung.size()))]);
    double r = rng.uniform(1.5, 3.0) * scale_vox;
    std::int64_t zlo = std::max<std::int64_t>(0, std::int64_t(c[2] - r - 1));
    std::int64_t zhi = std::min(labels.dims[0] - 1, std::int64_t(c[2] + r + 1));
    std::int64_t ylo = std::max<std::int64_t>(0, std::int64_t(c[1] - r - 1));
    std::int64_t yhi = std::min(labels.dims[1] - 1, std::int64_t(c[1] + r + 1));
    std::int64_t xlo = std::max<std::int64_t>(0, std::int64_t(c[0] - r - 1));
    std::int64_t xhi = std::min(labels.dims[2] - 1, std::int64_t(c[0] + r + 1));
    for (std::int64_t z = zlo; z <= zhi; ++z)
      for (std::int64_t y = ylo; y <= yhi; ++y)
        for (std::int64_t x = xlo; x <= xhi; ++x) {
          double dz = z + 0.5 - c[2], dy = y + 0.5 - c[1], dx = x + 0.5 - c[0];
          if (dz * dz + dy * dy + dx * dx > r * r) continue;
          std::int64_t idx = labels.index(z, y, x);
          if (!is_lobe_class(labels.voxels[static_cast<std::size_t>(idx)])) continue;
          if (converted[static_cast<std::size_t>(idx)]) continue;
          converted[static_cast<std::size_t>(idx)] = true;
          // emphysematous pocket: comfortably below the -950 HU threshold
          vol.voxels[static_cast<std::size_t>(idx)] =
              static_cast<float>(-960.0 - rng.uniform(0.0, 35.0));
          ++done;
        }
  }
}

void apply_collapse(Volume& vol, LabelMap& labels, double severity, std::uint64_t seed) {
  std::uint8_t target = collapse_target_lobe(seed, labels);
  bool right = is_right_lung_lobe(target);
  double lambda = 1.0 - 0.5 * severity;

  std::int64_t d = labels.dims[0], h = labels.dims[1], w = labels.dims[2];
  // lung centroid and a hilum pulled toward the midline
  double cx = 0, cy = 0, cz = 0;
  std::int64_t n = 0;
  for (std::int64_t z = 0; z < d; ++z)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        std::uint8_t c = labels.at(z, y, x);
        if (is_lobe_class(c) && is_right_lung_lobe(c) == right) {
          cx += x + 0.5;
          cy += y + 0.5;
          cz += z + 0.5;
          ++n;
        }
      }
  if (n == 0) throw DataError("collapse: empty lung");
  cx /= n;
  cy /= n;
  cz /= n;
  double mid = static_cast<double>(w) / 2.0;
  Vec3 hilum = {cx + 0.6 * (mid - cx), cy, cz};

  LabelMap orig = labels;
  std::vector<std::int64_t> freed;
  for (std::int64_t z = 0; z < d; ++z)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        if (orig.at(z, y, x) != target) continue;
        // the collapsed lobe is the inverse image of the shrink map
        double px = hilum[0] + (x + 0.5 - hilum[0]) / lambda;
        double py = hilum[1] + (y + 0.5 - hilum[1]) / lambda;
        double pz = hilum[2] + (z + 0.5 - hilum[2]) / lambda;
        std::int64_t xi = static_cast<std::int64_t>(std::floor(px));
        std::int64_t yi = static_cast<std::int64_t>(std::floor(py));
        std::int64_t zi = static_cast<std::int64_t>(std::floor(pz));
        bool keep = zi >= 0 && zi < d && yi >= 0 && yi < h && xi >= 0 && xi < w &&
                    orig.at(zi, yi, xi) == target;
        if (keep) {
          vol.at(z, y, x) += static_cast<float>(500.0 * severity);  // densified atelectasis
        } else {
          freed.push_back(labels.index(z, y, x));
        }
      }

  // freed voxels join the nearest remaining lobe of the same lung (iterative
  // dilation in fixed voxel order, then a centroid fallback for islands)
  std::vector<std::uint8_t> assigned(labels.voxels.size(), 0);
  for (std::int64_t idx : freed) labels.voxels[static_cast<std::size_t>(idx)] = kBackground;
  const std::int64_t neigh[6] = {-h * w, h * w, -w, w, -1, 1};
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::int64_t idx : freed) {
      if (assigned[static_cast<std::size_t>(idx)]) continue;
      for (std::int64_t step : neigh) {
        std::int64_t nidx = idx + step;
        if (nidx < 0 || nidx >= static_cast<std::int64_t>(labels.voxels.size())) continue;
        std::uint8_t c = labels.voxels[static_cast<std::size_t>(nidx)];
        if (is_lobe_class(c) && c != target && is_right_lung_lobe(c) == right) {
          labels.voxels[static_cast<std::size_t>(idx)] = c;
          assigned[static_cast<std::size_t>(idx)] = 1;
          changed = true;
          break;
        }
      }
    }
  }
  // islands: nearest sibling-lobe centroid
  std::array<Vec3, 8> csum{};
  std::array<std::int64_t, 8> ccount{};
  for (std::int64_t z = 0; z < d; ++z)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        std::uint8_t c = labels.at(z, y, x);
        if (is_lobe_class(c) && c != target && is_right_lung_lobe(c) == right) {
          csum[c] = add(csum[c], {x + 0.5, y + 0.5, z + 0.5});
          ++ccount[c];
        }
      }
  for (std::int64_t idx : freed) {
    if (assigned[static_cast<std::size_t>(idx)]) continue;
    Vec3 p = index_to_vox(labels, idx);
    double best = 1e300;
    std::uint8_t best_c = target;
    for (int c = kLowerRightLobe; c <= kUpperLeftLobe; ++c) {
      if (ccount[c] == 0 || c == target ||
          is_right_lung_lobe(static_cast<std::uint8_t>(c)) != right)
        continue;
      Vec3 cen = scale(csum[c], 1.0 / static_cast<double>(ccount[c]));
      Vec3 dv = sub(p, cen);
      double dist = dot(dv, dv);
      if (dist < best) {
        best = dist;
        best_c = static_cast<std::uint8_t>(c);
      }
    }
    labels.voxels[static_cast<std::size_t>(idx)] = best_c;
  }
}

}  // namespace

std::pair<Volume, LabelMap> apply_disease(const Volume& vol, const LabelMap& labels,
                                          DiseaseMode mode, double severity,
                                          std::uint64_t seed) {
  if (severity < 0.0 || severity > 1.0)
    throw ValueError(concat("disease severity must be in [0,1], got ", severity));
  if (vol.dims != labels.dims)
    throw DimensionError(concat("apply_disease: volume dims ", dims_str(vol.dims), " vs labels ",
                                dims_str(labels.dims)));
  Volume out_vol = vol;
  LabelMap out_lab = labels;
  if (mode == DiseaseMode::none || severity == 0.0)
    return {std::move(out_vol), std::move(out_lab)};

  Pcg32 rng(seed_mix(seed, 0xD15EA5E));
  switch (mode) {
    case DiseaseMode::cancer: apply_cancer(out_vol, out_lab, severity, rng); break;
    case DiseaseMode::covid: apply_covid(out_vol, out_lab, severity, rng); break;
    case DiseaseMode::copd: apply_copd(out_vol, out_lab, severity, rng); break;
    case DiseaseMode::collapse: apply_collapse(out_vol, out_lab, severity, seed); break;
    default: throw ValueError("unknown disease mode");
  }
  return {std::move(out_vol), std::move(out_lab)};
}

std::pair<Volume, LabelMap> generate_case(const PhantomSpec& spec) {
  auto [vol, labels] = generate_phantom(spec);
  if (spec.disease == DiseaseMode::none || spec.severity == 0.0)
    return {std::move(vol), std::move(labels)};
  return apply_disease(vol, labels, spec.disease, spec.severity, seed_mix(spec.seed, 0xD0));
}

namespace {

FissurePlane jitter_plane(const FissurePlane& f, double lung_rz, const JitterRanges& j,
                          Pcg32& rng) {
  FissurePlane out = f;
  Vec3 n = unit(f.normal);
  double shift = rng.uniform(-j.plane_offset, j.plane_offset) * lung_rz;
  out.point = add(f.point, scale(n, shift));
  double a1 = rng.uniform(-j.plane_tilt_deg, j.plane_tilt_deg) * 0.017453292519943295;
  double a2 = rng.uniform(-j.plane_tilt_deg, j.plane_tilt_deg) * 0.017453292519943295;
  // tilt in the (y,z) then (x,z) planes
  Vec3 t1 = {n[0], n[1] * std::cos(a1) - n[2] * std::sin(a1),
             n[1] * std::sin(a1) + n[2] * std::cos(a1)};
  out.normal = {t1[0] * std::cos(a2) - t1[2] * std::sin(a2), t1[1],
                t1[0] * std::sin(a2) + t1[2] * std::cos(a2)};
  out.wave_phase = rng.uniform(0.0, 6.283185307179586);
  out.wave_amp = f.wave_amp * (1.0 + rng.uniform(-0.3, 0.3));
  return out;
}

Ellipsoid jitter_ellipsoid(const Ellipsoid& e, const JitterRanges& j, Pcg32& rng) {
  Ellipsoid out = e;
  for (int i = 0; i < 3; ++i) {
    out.radii[i] = e.radii[i] * (1.0 + rng.uniform(-j.radii, j.radii));
    out.center[i] = e.center[i] + rng.uniform(-j.center, j.center);
  }
  return out;
}

}  // namespace

std::vector<CaseSpec> make_dataset(int n_cases, const PhantomSpec& tmpl,
                                   const JitterRanges& jitter, std::uint64_t seed) {
  if (n_cases < 1) throw ValueError(concat("make_dataset: need n >= 1, got ", n_cases));
  std::vector<CaseSpec> cases;
  cases.reserve(static_cast<std::size_t>(n_cases));
  for (int i = 0; i < n_cases; ++i) {
    PhantomSpec spec;
    bool ok = false;
    for (int attempt = 0; attempt < 10 && !ok; ++attempt) {
      Pcg32 rng(
          seed_mix(seed, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(attempt)));
      spec = tmpl;
      spec.right_lung = jitter_ellipsoid(tmpl.right_lung, jitter, rng);
      spec.left_lung = jitter_ellipsoid(tmpl.left_lung, jitter, rng);
      // keep fissure anchor points riding on the jittered lung centers
      auto reanchor = [&](const FissurePlane& f, const Ellipsoid& before,
                          const Ellipsoid& after) {
        FissurePlane moved = f;
        moved.point = add(after.center, sub(f.point, before.center));
        return moved;
      };
      spec.right_oblique =
          jitter_plane(reanchor(tmpl.right_oblique, tmpl.right_lung, spec.right_lung),
                       spec.right_lung.radii[2], jitter, rng);
      spec.right_horizontal =
          jitter_plane(reanchor(tmpl.right_horizontal, tmpl.right_lung, spec.right_lung),
                       spec.right_lung.radii[2], jitter, rng);
      spec.left_oblique =
          jitter_plane(reanchor(tmpl.left_oblique, tmpl.left_lung, spec.left_lung),
                       spec.left_lung.radii[2], jitter, rng);
      spec.airway.trunk_radius = tmpl.airway.trunk_radius *
                                 (1.0 + rng.uniform(-jitter.airway_radius, jitter.airway_radius));
      spec.airway.primary_radius =
          tmpl.airway.primary_radius *
          (1.0 + rng.uniform(-jitter.airway_radius, jitter.airway_radius));
      spec.airway.branch_radius =
          tmpl.airway.branch_radius *
          (1.0 + rng.uniform(-jitter.airway_radius, jitter.airway_radius));
      spec.background_hu = tmpl.background_hu + rng.uniform(-jitter.hu_level, jitter.hu_level);
      spec.lung_hu = tmpl.lung_hu + rng.uniform(-jitter.hu_level, jitter.hu_level);
      spec.airway_hu = tmpl.airway_hu + rng.uniform(-jitter.hu_level, jitter.hu_level);
      spec.seed = seed_mix(seed, static_cast<std::uint64_t>(i), 0xF00D);
      try {
        spec.validate();
        ok = true;
      } catch (const ConfigError&) {
        ok = false;
      }
    }
    if (!ok)
      throw ConfigError(concat("make_dataset: could not draw a valid phantom for case ", i,
                               " after 10 attempts"));
    char id[32];
    std::snprintf(id, sizeof(id), "case%04d", i);
    cases.push_back({id, spec});
  }
  return cases;
}

}  // namespace lobeseg
