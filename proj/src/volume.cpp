#include "lobeseg/volume.hpp"

namespace lobeseg {

void Volume::validate() const {
  if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
    throw DimensionError(concat("volume dims must be >= 1, got ", dims_str(dims)));
  if (static_cast<std::int64_t>(voxels.size()) != numel())
    throw DimensionError(concat("volume voxel count ", voxels.size(), " does not match dims ",
                                dims_str(dims)));
  for (float s : spacing)
    if (!(s > 0.0f)) throw ValueError(concat("volume spacing must be positive, got ", s));
}

void LabelMap::validate() const {
  if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
    throw DimensionError(concat("label map dims must be >= 1, got ", dims_str(dims)));
  if (static_cast<std::int64_t>(voxels.size()) != numel())
    throw DimensionError(concat("label voxel count ", voxels.size(), " does not match dims ",
                                dims_str(dims)));
  std::size_t n_classes = vocabulary.size();
  for (std::uint8_t v : voxels)
    if (v >= n_classes)
      throw DataError(concat("label index ", int(v), " outside vocabulary of size ", n_classes));
}

std::vector<std::int64_t> LabelMap::class_counts() const {
  std::vector<std::int64_t> counts(vocabulary.size(), 0);
  for (std::uint8_t v : voxels) {
    if (v < counts.size()) ++counts[v];
  }
  return counts;
}

const std::vector<std::string>& lung_vocabulary() {
  static const std::vector<std::string> names = {
      "background",
      "LR lobe",
      "MR lobe",
      "UR lobe",
      "LL lobe",
      "UL lobe",
      "trachea & primary bronchi",
      "lobar & segmental bronchi",
  };
  return names;
}

}  // namespace lobeseg
