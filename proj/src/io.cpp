#include "lobeseg/io.hpp"

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace lobeseg {

namespace {

constexpr char kVolumeMagic[4] = {'V', 'L', 'B', 'V'};
constexpr char kCheckpointMagic[4] = {'V', 'L', 'C', 'K'};

// little-endian scalar writers (the build targets little-endian hosts; the
// readers validate magic bytes, so a foreign byte order fails loudly)
template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& data, std::string path)
      : data_(data), path_(std::move(path)) {}

  template <class T>
  T get() {
    if (pos_ + sizeof(T) > data_.size())
      throw FormatError(concat(path_, ": truncated file at offset ", pos_));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_bytes(std::size_t n) {
    if (pos_ + n > data_.size())
      throw FormatError(concat(path_, ": truncated file at offset ", pos_));
    std::string out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::string read_binary_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(concat("cannot open ", path));
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (!in.good() && !in.eof()) throw IoError(concat("read failure on ", path));
  return data;
}

void write_binary_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(concat("cannot open ", path, " for writing"));
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out.good()) throw IoError(concat("write failure on ", path));
}

std::string volume_header(std::uint8_t kind, std::uint8_t dtype, const Dims3& dims,
                          const std::array<float, 3>& spacing) {
  std::string out;
  out.append(kVolumeMagic, 4);
  put<std::uint32_t>(out, 1);
  put<std::uint8_t>(out, kind);
  put<std::uint8_t>(out, dtype);
  for (auto d : dims) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (auto s : spacing) put<float>(out, s);
  return out;
}

}  // namespace

void write_volume(const std::string& path, const Volume& vol) {
  vol.validate();
  std::string out = volume_header(0, 0, vol.dims, vol.spacing);
  out.append(reinterpret_cast<const char*>(vol.voxels.data()), vol.voxels.size() * sizeof(float));
  write_binary_file(path, out);
}

void write_volume(const std::string& path, const LabelMap& labels) {
  labels.validate();
  std::string out = volume_header(1, 1, labels.dims, labels.spacing);
  out.append(reinterpret_cast<const char*>(labels.voxels.data()), labels.voxels.size());
  write_binary_file(path, out);
}

AnyVolume read_volume(const std::string& path) {
  std::string data = read_binary_file(path);
  Reader r(data, path);
  std::string magic = r.get_bytes(4);
  if (std::memcmp(magic.data(), kVolumeMagic, 4) != 0)
    throw FormatError(concat(path, ": bad magic '", magic, "', expected VLBV"));
  std::uint32_t version = r.get<std::uint32_t>();
  if (version != 1)
    throw UnsupportedError(concat(path, ": unsupported volume format version ", version));
  std::uint8_t kind = r.get<std::uint8_t>();
  std::uint8_t dtype = r.get<std::uint8_t>();
  Dims3 dims;
  for (auto& d : dims) d = r.get<std::uint32_t>();
  std::array<float, 3> spacing;
  for (auto& s : spacing) s = r.get<float>();

  if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
    throw FormatError(concat(path, ": invalid dims ", dims_str(dims)));
  std::size_t elem = dtype == 0 ? 4 : 1;
  // never allocate more than the header-declared payload, and insist the
  // file actually contains it
  std::uint64_t declared = static_cast<std::uint64_t>(dims_numel(dims)) * elem;
  if (r.remaining() != declared)
    throw FormatError(concat(path, ": payload length mismatch, expected ", declared,
                             " bytes, actual ", r.remaining()));

  if (kind == 0) {
    if (dtype != 0) throw FormatError(concat(path, ": HU volume must be f32"));
    Volume vol;
    vol.dims = dims;
    vol.spacing = spacing;
    vol.voxels.resize(static_cast<std::size_t>(dims_numel(dims)));
    std::string payload = r.get_bytes(static_cast<std::size_t>(declared));
    std::memcpy(vol.voxels.data(), payload.data(), payload.size());
    return vol;
  }
  if (kind == 1) {
    if (dtype != 1) throw FormatError(concat(path, ": label map must be u8"));
    LabelMap labels;
    labels.dims = dims;
    labels.spacing = spacing;
    labels.vocabulary = lung_vocabulary();
    std::string payload = r.get_bytes(static_cast<std::size_t>(declared));
    labels.voxels.assign(payload.begin(), payload.end());
    labels.validate();
    return labels;
  }
  throw FormatError(concat(path, ": unknown volume kind ", int(kind)));
}

Volume read_hu_volume(const std::string& path) {
  AnyVolume any = read_volume(path);
  if (!std::holds_alternative<Volume>(any))
    throw FormatError(concat(path, ": expected an HU volume, found a label map"));
  return std::get<Volume>(std::move(any));
}

LabelMap read_label_map(const std::string& path) {
  AnyVolume any = read_volume(path);
  if (!std::holds_alternative<LabelMap>(any))
    throw FormatError(concat(path, ": expected a label map, found an HU volume"));
  return std::get<LabelMap>(std::move(any));
}

// ---------------------------------------------------------------------------
// NIfTI-1

namespace {

bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string gunzip_file(const std::string& path) {
  gzFile gz = gzopen(path.c_str(), "rb");
  if (!gz) throw IoError(concat("cannot open ", path));
  std::string out;
  char buf[1 << 16];
  int n;
  while ((n = gzread(gz, buf, sizeof(buf))) > 0) out.append(buf, static_cast<std::size_t>(n));
  bool ok = n == 0;
  gzclose(gz);
  if (!ok) throw FormatError(concat(path, ": gzip stream error"));
  return out;
}

template <class T>
T swab(T v) {
  char* p = reinterpret_cast<char*>(&v);
  std::reverse(p, p + sizeof(T));
  return v;
}

}  // namespace

Volume read_nifti1(const std::string& path) {
  std::string data = has_suffix(path, ".gz") ? gunzip_file(path) : read_binary_file(path);
  if (data.size() < 348) throw FormatError(concat(path, ": shorter than a NIfTI-1 header"));

  auto read_i32 = [&](std::size_t off) {
    std::int32_t v;
    std::memcpy(&v, data.data() + off, 4);
    return v;
  };
  std::int32_t sizeof_hdr = read_i32(0);
  bool swap = false;
  if (sizeof_hdr != 348) {
    if (swab(sizeof_hdr) == 348)
      swap = true;
    else
      throw FormatError(concat(path, ": sizeof_hdr is ", sizeof_hdr, ", expected 348"));
  }
  char magic[4];
  std::memcpy(magic, data.data() + 344, 4);
  if (!((std::memcmp(magic, "n+1", 4) == 0) || (std::memcmp(magic, "ni1", 4) == 0)))
    throw FormatError(concat(path, ": missing NIfTI-1 magic"));
  if (std::memcmp(magic, "ni1", 4) == 0)
    throw UnsupportedError(concat(path, ": two-file NIfTI-1 (.hdr/.img) is not supported"));

  auto get_i16 = [&](std::size_t off) {
    std::int16_t v;
    std::memcpy(&v, data.data() + off, 2);
    return swap ? swab(v) : v;
  };
  auto get_f32 = [&](std::size_t off) {
    float v;
    std::memcpy(&v, data.data() + off, 4);
    return swap ? swab(v) : v;
  };

  std::int16_t ndim = get_i16(40);
  if (ndim != 3) {
    // tolerate trailing singleton dims (e.g. dim[0]=4 with nt==1) is NOT done:
    // the contract asks for an explicit unsupported-feature error
    throw UnsupportedError(concat(path, ": dim[0] = ", ndim, ", only 3-D volumes supported"));
  }
  std::int64_t nx = get_i16(42), ny = get_i16(44), nz = get_i16(46);
  if (nx < 1 || ny < 1 || nz < 1)
    throw FormatError(concat(path, ": invalid dims ", nx, "x", ny, "x", nz));
  std::int16_t datatype = get_i16(70);
  float px = get_f32(80), py = get_f32(84), pz = get_f32(88);
  float vox_offset = get_f32(108);
  float scl_slope = get_f32(112), scl_inter = get_f32(116);

  std::size_t offset = static_cast<std::size_t>(vox_offset);
  if (offset < 348) offset = 352;
  std::uint64_t count = static_cast<std::uint64_t>(nx) * ny * nz;

  Volume vol;
  // the file's fastest axis (x) maps to our fastest axis (W)
  vol.dims = {nz, ny, nx};
  vol.spacing = {pz > 0 ? pz : 1.0f, py > 0 ? py : 1.0f, px > 0 ? px : 1.0f};
  vol.voxels.resize(static_cast<std::size_t>(count));

  auto need = [&](std::uint64_t bytes) {
    if (data.size() < offset + bytes)
      throw FormatError(concat(path, ": payload length mismatch, expected ", bytes,
                               " bytes, actual ", data.size() - offset));
  };
  bool apply_scale = scl_slope != 0.0f;
  if (datatype == 4) {  // i16
    need(count * 2);
    for (std::uint64_t i = 0; i < count; ++i) {
      std::int16_t raw;
      std::memcpy(&raw, data.data() + offset + i * 2, 2);
      if (swap) raw = swab(raw);
      float v = static_cast<float>(raw);
      vol.voxels[static_cast<std::size_t>(i)] = apply_scale ? scl_slope * v + scl_inter : v;
    }
  } else if (datatype == 16) {  // f32
    need(count * 4);
    for (std::uint64_t i = 0; i < count; ++i) {
      float raw;
      std::memcpy(&raw, data.data() + offset + i * 4, 4);
      if (swap) raw = swab(raw);
      vol.voxels[static_cast<std::size_t>(i)] = apply_scale ? scl_slope * raw + scl_inter : raw;
    }
  } else {
    throw UnsupportedError(concat(path, ": unsupported NIfTI datatype ", datatype,
                                  " (supported: 4 = i16, 16 = f32)"));
  }
  return vol;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

nlohmann::json model_config_json(const ModelConfig& c) {
  return nlohmann::json{{"input_size", c.input_size},
                        {"depth", c.depth},
                        {"base_channels", c.base_channels},
                        {"main_classes", c.main_classes},
                        {"aux_classes", c.aux_classes},
                        {"aux_enabled", c.aux_enabled},
                        {"prelu_init", c.prelu_init},
                        {"dropout_p", c.dropout_p},
                        {"batch_norm", c.batch_norm},
                        {"attention", c.attention},
                        {"seed", c.seed}};
}

ModelConfig model_config_from(const nlohmann::json& j) {
  ModelConfig c;
  c.input_size = j.at("input_size").get<std::int64_t>();
  c.depth = j.at("depth").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.main_classes = j.at("main_classes").get<int>();
  c.aux_classes = j.at("aux_classes").get<int>();
  c.aux_enabled = j.at("aux_enabled").get<bool>();
  c.prelu_init = j.at("prelu_init").get<double>();
  c.dropout_p = j.at("dropout_p").get<double>();
  c.batch_norm = j.at("batch_norm").get<bool>();
  c.attention = j.at("attention").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

void put_blob(std::string& out, const CheckpointBlob& b) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(b.name.size()));
  out.append(b.name);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(b.shape.size()));
  for (auto d : b.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(b.data.size()));
  out.append(reinterpret_cast<const char*>(b.data.data()), b.data.size() * sizeof(float));
}

CheckpointBlob get_blob(Reader& r) {
  CheckpointBlob b;
  std::uint32_t name_len = r.get<std::uint32_t>();
  b.name = r.get_bytes(name_len);
  std::uint32_t ndim = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < ndim; ++i) b.shape.push_back(r.get<std::uint32_t>());
  std::uint64_t n = r.get<std::uint64_t>();
  std::string payload = r.get_bytes(static_cast<std::size_t>(n * sizeof(float)));
  b.data.resize(static_cast<std::size_t>(n));
  std::memcpy(b.data.data(), payload.data(), payload.size());
  return b;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  put<std::uint32_t>(out, ckpt.version);
  std::string cfg = model_config_json(ckpt.config).dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out.append(cfg);
  put<std::uint32_t>(out, ckpt.epoch);
  put<double>(out, ckpt.schedule.lr);
  put<double>(out, ckpt.schedule.best);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.schedule.epochs_since_improvement));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.blobs.size()));
  for (const auto& b : ckpt.blobs) put_blob(out, b);
  put<std::uint8_t>(out, ckpt.opt_kind);
  if (ckpt.opt_kind != 0) {
    put<double>(out, ckpt.adam.beta1);
    put<double>(out, ckpt.adam.beta2);
    put<double>(out, ckpt.adam.eps);
    put<std::uint64_t>(out, ckpt.adam_steps);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.opt_state.size()));
    for (const auto& s : ckpt.opt_state) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(s.name.size()));
      out.append(s.name);
      put<std::uint64_t>(out, static_cast<std::uint64_t>(s.m.size()));
      out.append(reinterpret_cast<const char*>(s.m.data()), s.m.size() * sizeof(float));
      out.append(reinterpret_cast<const char*>(s.v.data()), s.v.size() * sizeof(float));
    }
  }
  write_binary_file(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::string data = read_binary_file(path);
  Reader r(data, path);
  std::string magic = r.get_bytes(4);
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0)
    throw FormatError(concat(path, ": bad magic, expected VLCK"));
  Checkpoint ckpt;
  ckpt.version = r.get<std::uint32_t>();
  if (ckpt.version != 1)
    throw UnsupportedError(concat(path, ": incompatible checkpoint version ", ckpt.version));
  std::uint32_t cfg_len = r.get<std::uint32_t>();
  nlohmann::json cfg = nlohmann::json::parse(r.get_bytes(cfg_len));
  ckpt.config = model_config_from(cfg);
  ckpt.epoch = r.get<std::uint32_t>();
  ckpt.schedule.lr = r.get<double>();
  ckpt.schedule.best = r.get<double>();
  ckpt.schedule.epochs_since_improvement = static_cast<int>(r.get<std::uint32_t>());
  std::uint32_t n_blobs = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_blobs; ++i) ckpt.blobs.push_back(get_blob(r));
  ckpt.opt_kind = r.get<std::uint8_t>();
  if (ckpt.opt_kind != 0) {
    ckpt.adam.beta1 = r.get<double>();
    ckpt.adam.beta2 = r.get<double>();
    ckpt.adam.eps = r.get<double>();
    ckpt.adam_steps = r.get<std::uint64_t>();
    std::uint32_t n_opt = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n_opt; ++i) {
      OptStateBlob s;
      std::uint32_t name_len = r.get<std::uint32_t>();
      s.name = r.get_bytes(name_len);
      std::uint64_t n = r.get<std::uint64_t>();
      std::string mbytes = r.get_bytes(static_cast<std::size_t>(n * sizeof(float)));
      std::string vbytes = r.get_bytes(static_cast<std::size_t>(n * sizeof(float)));
      s.m.resize(static_cast<std::size_t>(n));
      s.v.resize(static_cast<std::size_t>(n));
      std::memcpy(s.m.data(), mbytes.data(), mbytes.size());
      std::memcpy(s.v.data(), vbytes.data(), vbytes.size());
      ckpt.opt_state.push_back(std::move(s));
    }
  }
  if (r.remaining() != 0)
    throw FormatError(concat(path, ": ", r.remaining(), " trailing bytes"));
  return ckpt;
}

template <class T>
Checkpoint make_checkpoint(const Model<T>& model, const Optimizer<T>* opt,
                           const LRScheduleState& sched, int epoch) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  ckpt.epoch = static_cast<std::uint32_t>(epoch);
  ckpt.schedule = sched;
  auto add = [&](const Param<T>& p) {
    CheckpointBlob b;
    b.name = p.name;
    b.shape = p.tensor.shape();
    b.data.assign(p.tensor.data().begin(), p.tensor.data().end());
    ckpt.blobs.push_back(std::move(b));
  };
  for (const auto& p : model.params()) add(p);
  for (const auto& p : model.buffers()) add(p);
  if (opt) {
    ckpt.opt_kind = opt->kind() == OptimizerKind::sgd ? 1 : 2;
    ckpt.adam = opt->hyper();
    ckpt.adam_steps = static_cast<std::uint64_t>(opt->steps());
    for (const auto& [name, mv] : opt->state()) {
      OptStateBlob s;
      s.name = name;
      s.m.assign(mv.first.begin(), mv.first.end());
      s.v.assign(mv.second.begin(), mv.second.end());
      ckpt.opt_state.push_back(std::move(s));
    }
    // state() iterates a hash map; keep files byte-stable
    std::sort(ckpt.opt_state.begin(), ckpt.opt_state.end(),
              [](const OptStateBlob& a, const OptStateBlob& b) { return a.name < b.name; });
  }
  return ckpt;
}

template <class T>
void load_into_model(const Checkpoint& ckpt, Model<T>& model) {
  std::size_t expected = model.params().size() + model.buffers().size();
  if (ckpt.blobs.size() != expected)
    throw FormatError(concat("checkpoint has ", ckpt.blobs.size(), " blobs, model expects ",
                             expected));
  for (const auto& b : ckpt.blobs) {
    if (!model.has(b.name)) throw FormatError(concat("checkpoint parameter '", b.name,
                                                     "' does not exist in the model"));
    Tensor<T>& t = model.at(b.name);
    if (t.shape() != b.shape)
      throw DimensionError(concat("checkpoint parameter '", b.name, "' has shape ",
                                  shape_str(b.shape), ", model expects ",
                                  shape_str(t.shape())));
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(b.data[i]);
  }
}

template <class T>
void load_optimizer_state(const Checkpoint& ckpt, Optimizer<T>& opt) {
  opt.set_steps(static_cast<std::int64_t>(ckpt.adam_steps));
  for (const auto& s : ckpt.opt_state) {
    auto& mv = opt.moments(s.name);
    mv.first.assign(s.m.begin(), s.m.end());
    mv.second.assign(s.v.begin(), s.v.end());
  }
}

void write_text_file(const std::string& path, const std::string& content) {
  write_binary_file(path, content);
}

std::string read_text_file(const std::string& path) { return read_binary_file(path); }

template Checkpoint make_checkpoint(const Model<float>&, const Optimizer<float>*,
                                    const LRScheduleState&, int);
template Checkpoint make_checkpoint(const Model<double>&, const Optimizer<double>*,
                                    const LRScheduleState&, int);
template void load_into_model(const Checkpoint&, Model<float>&);
template void load_into_model(const Checkpoint&, Model<double>&);
template void load_optimizer_state(const Checkpoint&, Optimizer<float>&);
template void load_optimizer_state(const Checkpoint&, Optimizer<double>&);

}  // namespace lobeseg
