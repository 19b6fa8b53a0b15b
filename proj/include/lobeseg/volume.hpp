#ifndef LOBESEG_VOLUME_HPP
#define LOBESEG_VOLUME_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lobeseg/common.hpp"

namespace lobeseg {

using Dims3 = std::array<std::int64_t, 3>;  // (D,H,W), W fastest

inline std::int64_t dims_numel(const Dims3& d) { return d[0] * d[1] * d[2]; }

inline std::string dims_str(const Dims3& d) {
  return concat("[", d[0], ",", d[1], ",", d[2], "]");
}

// HU voxel grid with physical spacing (mm per axis).
struct Volume {
  Dims3 dims{0, 0, 0};
  std::vector<float> voxels;  // row-major
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};

  std::int64_t numel() const { return dims_numel(dims); }
  std::int64_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return (z * dims[1] + y) * dims[2] + x;
  }
  float& at(std::int64_t z, std::int64_t y, std::int64_t x) {
    return voxels[static_cast<std::size_t>(index(z, y, x))];
  }
  float at(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return voxels[static_cast<std::size_t>(index(z, y, x))];
  }
  void validate() const;
};

// Integer class-index grid plus its class-name vocabulary.
struct LabelMap {
  Dims3 dims{0, 0, 0};
  std::vector<std::uint8_t> voxels;
  std::vector<std::string> vocabulary;
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};

  std::int64_t numel() const { return dims_numel(dims); }
  std::int64_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return (z * dims[1] + y) * dims[2] + x;
  }
  std::uint8_t& at(std::int64_t z, std::int64_t y, std::int64_t x) {
    return voxels[static_cast<std::size_t>(index(z, y, x))];
  }
  std::uint8_t at(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return voxels[static_cast<std::size_t>(index(z, y, x))];
  }
  void validate() const;
  std::vector<std::int64_t> class_counts() const;
};

// Canonical lung class indices used throughout the pipeline.
enum LungClass : std::uint8_t {
  kBackground = 0,
  kLowerRightLobe = 1,
  kMiddleRightLobe = 2,
  kUpperRightLobe = 3,
  kLowerLeftLobe = 4,
  kUpperLeftLobe = 5,
  kTrachea = 6,  // trachea & primary bronchi
  kBronchi = 7,  // lobar & segmental bronchi
};

const std::vector<std::string>& lung_vocabulary();

inline bool is_lobe_class(std::uint8_t c) { return c >= kLowerRightLobe && c <= kUpperLeftLobe; }
inline bool is_airway_class(std::uint8_t c) { return c == kTrachea || c == kBronchi; }
inline bool is_right_lung_lobe(std::uint8_t c) {
  return c >= kLowerRightLobe && c <= kUpperRightLobe;
}

}  // namespace lobeseg

#endif  // LOBESEG_VOLUME_HPP
