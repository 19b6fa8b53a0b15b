#ifndef LOBESEG_PHANTOM_HPP
#define LOBESEG_PHANTOM_HPP

#include <string>
#include <utility>
#include <vector>

#include "lobeseg/volume.hpp"

namespace lobeseg {

// Geometry is expressed in normalized coordinates: voxel (z,y,x) sits at
// ((x+0.5)/S, (y+0.5)/S, (z+0.5)/S) with z increasing towards the head.

struct Ellipsoid {
  std::array<double, 3> center{0.5, 0.5, 0.5};  // (x,y,z)
  std::array<double, 3> radii{0.2, 0.2, 0.3};
};

// Oriented fissure plane with a small sinusoidal ripple along x.
struct FissurePlane {
  std::array<double, 3> point{0.5, 0.5, 0.5};
  std::array<double, 3> normal{0.0, 0.0, 1.0};
  double wave_amp = 0.015;
  double wave_freq = 2.0;  // cycles across the grid
  double wave_phase = 0.0;
};

struct AirwaySpec {
  double trunk_radius = 0.032;    // trachea
  double primary_radius = 0.020;  // main-stem bronchi
  double branch_radius = 0.010;   // lobar branches
  int branch_depth = 2;           // 1 = lobar branch only, >=2 adds distal twigs
};

enum class DiseaseMode { none, cancer, covid, copd, collapse };

const char* to_string(DiseaseMode mode);
DiseaseMode disease_from_string(const std::string& name);

struct PhantomSpec {
  std::int64_t grid_edge = 64;
  Ellipsoid right_lung{{0.32, 0.52, 0.50}, {0.165, 0.225, 0.400}};
  Ellipsoid left_lung{{0.68, 0.50, 0.50}, {0.155, 0.215, 0.385}};
  // right oblique fissure separates the lower-right lobe from the rest
  FissurePlane right_oblique{{0.32, 0.52, 0.4651}, {0.0, 0.30, 1.0}};
  // right horizontal fissure separates middle from upper
  FissurePlane right_horizontal{{0.32, 0.52, 0.5578}, {0.0, 0.25, 1.0}};
  FissurePlane left_oblique{{0.68, 0.50, 0.4817}, {0.0, 0.30, 1.0}};
  AirwaySpec airway;
  double background_hu = 40.0;
  double lung_hu = -850.0;
  double airway_hu = -990.0;
  double noise_sigma = 15.0;
  DiseaseMode disease = DiseaseMode::none;
  double severity = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Per-branch voxel bookkeeping for geometry audits.
struct BranchDebug {
  std::uint8_t target_lobe = 0;
  std::vector<std::int64_t> voxel_indices;
};

struct PhantomDetail {
  std::vector<BranchDebug> lobar_branches;
};

// Healthy phantom: two ellipsoid lungs split into five lobes by fissure
// planes, a trachea descending to per-lobe bronchial branches, per-tissue HU
// levels plus seeded Gaussian noise.
std::pair<Volume, LabelMap> generate_phantom(const PhantomSpec& spec,
                                             PhantomDetail* detail = nullptr);

// Disease perturbations on an existing case; labels stay consistent and the
// grid and vocabulary never change. severity 0 returns the input unchanged.
std::pair<Volume, LabelMap> apply_disease(const Volume& vol, const LabelMap& labels,
                                          DiseaseMode mode, double severity, std::uint64_t seed);

// Deterministic choice of the lobe a collapse affects (skips empty lobes).
std::uint8_t collapse_target_lobe(std::uint64_t seed, const LabelMap& labels);

// generate_phantom + apply_disease per the spec's own disease fields.
std::pair<Volume, LabelMap> generate_case(const PhantomSpec& spec);

struct JitterRanges {
  double radii = 0.20;          // relative
  double center = 0.07;        // absolute, normalized units
  double plane_offset = 0.09;   // along the plane normal, fraction of lung z-radius
  double plane_tilt_deg = 12.0;  // rotation of plane normals
  double airway_radius = 0.10;  // relative
  double hu_level = 25.0;       // absolute HU shift of tissue levels
};

struct CaseSpec {
  std::string id;
  PhantomSpec spec;
};

// n jittered copies of a template, deterministic per (seed, index); invalid
// jitters are re-drawn up to 10 times before giving up.
std::vector<CaseSpec> make_dataset(int n_cases, const PhantomSpec& tmpl,
                                   const JitterRanges& jitter, std::uint64_t seed);

}  // namespace lobeseg

#endif  // LOBESEG_PHANTOM_HPP
