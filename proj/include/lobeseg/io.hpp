#ifndef LOBESEG_IO_HPP
#define LOBESEG_IO_HPP

#include <string>
#include <variant>
#include <vector>

#include "lobeseg/trainer.hpp"
#include "lobeseg/vnet.hpp"
#include "lobeseg/volume.hpp"

namespace lobeseg {

// ---------------------------------------------------------------------------
// Native volume container. All integers and floats little-endian.
//
//   magic   "VLBV"              4 bytes
//   version u32                 (currently 1)
//   kind    u8                  0 = HU volume (f32), 1 = label map (u8)
//   dtype   u8                  0 = f32, 1 = u8
//   dims    3 x u32             (D,H,W)
//   spacing 3 x f32             mm per axis
//   payload row-major voxels

using AnyVolume = std::variant<Volume, LabelMap>;

void write_volume(const std::string& path, const Volume& vol);
void write_volume(const std::string& path, const LabelMap& labels);
AnyVolume read_volume(const std::string& path);
Volume read_hu_volume(const std::string& path);
LabelMap read_label_map(const std::string& path);

// ---------------------------------------------------------------------------
// Minimal NIfTI-1 ingestion: single-file .nii or whole-file-gzip .nii.gz,
// dim[0] == 3, datatype i16 or f32, scl_slope/scl_inter applied when the
// slope is nonzero. Byte-swapped files are handled.
Volume read_nifti1(const std::string& path);

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointBlob {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct OptStateBlob {
  std::string name;
  std::vector<float> m, v;
};

struct Checkpoint {
  std::uint32_t version = 1;
  ModelConfig config;
  std::uint32_t epoch = 0;
  LRScheduleState schedule;
  std::vector<CheckpointBlob> blobs;  // trainable parameters then buffers
  std::uint8_t opt_kind = 0;          // 0 none, 1 sgd, 2 adam
  AdamParams adam;
  std::uint64_t adam_steps = 0;
  std::vector<OptStateBlob> opt_state;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

template <class T>
Checkpoint make_checkpoint(const Model<T>& model, const Optimizer<T>* opt,
                           const LRScheduleState& sched, int epoch);

// Fills an existing model's parameters and buffers by name; a mismatched
// shape or a missing/unknown name raises an error naming the parameter.
template <class T>
void load_into_model(const Checkpoint& ckpt, Model<T>& model);

template <class T>
void load_optimizer_state(const Checkpoint& ckpt, Optimizer<T>& opt);

// ---------------------------------------------------------------------------
// small file helpers

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

extern template Checkpoint make_checkpoint(const Model<float>&, const Optimizer<float>*,
                                           const LRScheduleState&, int);
extern template Checkpoint make_checkpoint(const Model<double>&, const Optimizer<double>*,
                                           const LRScheduleState&, int);
extern template void load_into_model(const Checkpoint&, Model<float>&);
extern template void load_into_model(const Checkpoint&, Model<double>&);
extern template void load_optimizer_state(const Checkpoint&, Optimizer<float>&);
extern template void load_optimizer_state(const Checkpoint&, Optimizer<double>&);

}  // namespace lobeseg

#endif  // LOBESEG_IO_HPP
