#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "lobeseg/io.hpp"

using namespace lobeseg;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
  fs::path dir = fs::temp_directory_path() / "lobeseg_io_test";
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void spit(const fs::path& p, const std::string& data) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
}

// Builds a single-file NIfTI-1 image from scratch using the public header
// field offsets (sizeof_hdr@0, dim@40, datatype@70, bitpix@72, pixdim@76,
// vox_offset@108, scl_slope@112, scl_inter@116, magic@344).
std::string craft_nifti(std::int16_t ndim, std::int16_t nx, std::int16_t ny, std::int16_t nz,
                        std::int16_t datatype, float scl_slope, float scl_inter,
                        const std::string& payload, float px = 1.0f, float py = 1.0f,
                        float pz = 1.0f) {
  std::string h(352, '\0');
  auto put_i32 = [&](std::size_t off, std::int32_t v) { std::memcpy(&h[off], &v, 4); };
  auto put_i16 = [&](std::size_t off, std::int16_t v) { std::memcpy(&h[off], &v, 2); };
  auto put_f32 = [&](std::size_t off, float v) { std::memcpy(&h[off], &v, 4); };
  put_i32(0, 348);
  put_i16(40, ndim);
  put_i16(42, nx);
  put_i16(44, ny);
  put_i16(46, nz);
  for (int i = 4; i < 8; ++i) put_i16(40 + 2 * static_cast<std::size_t>(i), 1);
  put_i16(70, datatype);
  put_i16(72, datatype == 4 ? 16 : 32);
  put_f32(76, 1.0f);
  put_f32(80, px);
  put_f32(84, py);
  put_f32(88, pz);
  put_f32(108, 352.0f);
  put_f32(112, scl_slope);
  put_f32(116, scl_inter);
  std::memcpy(&h[344], "n+1\0", 4);
  return h + payload;
}

}  // namespace

TEST_CASE("native volume round trip is bitwise") {
  auto dir = tmp_dir();
  Volume vol;
  vol.dims = {3, 4, 5};
  vol.spacing = {1.5f, 0.7f, 2.25f};
  vol.voxels.resize(60);
  Pcg32 rng(5);
  for (auto& v : vol.voxels) v = static_cast<float>(rng.uniform(-1000, 400));

  auto path = (dir / "vol.vlbv").string();
  write_volume(path, vol);
  Volume back = read_hu_volume(path);
  CHECK(back.dims == vol.dims);
  CHECK(back.spacing == vol.spacing);
  CHECK(back.voxels == vol.voxels);

  // write -> read -> write produces identical bytes
  auto path2 = (dir / "vol2.vlbv").string();
  write_volume(path2, back);
  CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("native file layout: 2x2x2 f32 volume is exactly 66 bytes") {
  auto dir = tmp_dir();
  Volume vol;
  vol.dims = {2, 2, 2};
  vol.voxels.assign(8, 1.0f);
  auto path = (dir / "tiny.vlbv").string();
  write_volume(path, vol);
  CHECK(fs::file_size(path) == 66);  // 4+4+1+1+12+12 header + 32 payload

  std::string bytes = slurp(path);
  CHECK(bytes.substr(0, 4) == "VLBV");
}

TEST_CASE("label map with vocabulary index 7 round-trips exactly") {
  auto dir = tmp_dir();
  LabelMap labels;
  labels.dims = {2, 3, 2};
  labels.vocabulary = lung_vocabulary();
  labels.voxels = {0, 1, 2, 3, 4, 5, 6, 7, 7, 0, 3, 7};
  auto path = (dir / "labels.vlbv").string();
  write_volume(path, labels);
  LabelMap back = read_label_map(path);
  CHECK(back.voxels == labels.voxels);
  CHECK(back.vocabulary == lung_vocabulary());
}

TEST_CASE("hostile native inputs fail loudly") {
  auto dir = tmp_dir();
  Volume vol;
  vol.dims = {2, 2, 2};
  vol.voxels.assign(8, 0.0f);
  auto path = (dir / "hostile.vlbv").string();
  write_volume(path, vol);

  std::string good = slurp(path);
  std::string bad_magic = good;
  bad_magic.replace(0, 4, "XXXX");
  spit(dir / "bad_magic.vlbv", bad_magic);
  CHECK_THROWS_AS(read_volume((dir / "bad_magic.vlbv").string()), FormatError);

  std::string truncated = good.substr(0, good.size() - 7);
  spit(dir / "trunc.vlbv", truncated);
  try {
    read_volume((dir / "trunc.vlbv").string());
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    std::string msg = e.what();
    CHECK(msg.find("32") != std::string::npos);  // expected payload
    CHECK(msg.find("25") != std::string::npos);  // actual payload
  }

  // oversized declared dims must not allocate: payload check precedes
  std::string huge = good;
  std::uint32_t big = 0x40000000u;
  std::memcpy(huge.data() + 10, &big, 4);
  spit(dir / "huge.vlbv", huge);
  CHECK_THROWS_AS(read_volume((dir / "huge.vlbv").string()), FormatError);
}

TEST_CASE("crafted NIfTI-1 header parses with dims, spacing, and scaling") {
  auto dir = tmp_dir();
  std::vector<float> payload(64);
  for (int i = 0; i < 64; ++i) payload[i] = static_cast<float>(i);
  std::string raw(reinterpret_cast<char*>(payload.data()), payload.size() * 4);
  spit(dir / "a.nii", craft_nifti(3, 4, 4, 4, 16, 0.0f, 0.0f, raw, 1.5f, 1.5f, 2.0f));

  Volume vol = read_nifti1((dir / "a.nii").string());
  CHECK(vol.dims == Dims3{4, 4, 4});
  CHECK(vol.spacing[0] == 2.0f);  // slowest axis spacing from pixdim[3]
  CHECK(vol.spacing[2] == 1.5f);
  for (int i = 0; i < 64; ++i) CHECK(vol.voxels[i] == static_cast<float>(i));
}

TEST_CASE("NIfTI scl_slope/scl_inter affine scaling") {
  auto dir = tmp_dir();
  std::vector<std::int16_t> payload(8, 24);
  std::string raw(reinterpret_cast<char*>(payload.data()), payload.size() * 2);
  spit(dir / "scaled.nii", craft_nifti(3, 2, 2, 2, 4, 1.0f, -1024.0f, raw));
  Volume vol = read_nifti1((dir / "scaled.nii").string());
  for (float v : vol.voxels) CHECK(v == -1000.0f);
}

TEST_CASE("NIfTI unsupported features raise explicit errors") {
  auto dir = tmp_dir();
  std::string raw(64 * 4, '\0');
  spit(dir / "d4.nii", craft_nifti(4, 4, 4, 4, 16, 0, 0, raw));
  CHECK_THROWS_AS(read_nifti1((dir / "d4.nii").string()), UnsupportedError);

  spit(dir / "dtype.nii", craft_nifti(3, 4, 4, 4, 2 /*u8*/, 0, 0, raw));
  CHECK_THROWS_AS(read_nifti1((dir / "dtype.nii").string()), UnsupportedError);

  std::string junk(400, 'j');
  spit(dir / "junk.nii", junk);
  CHECK_THROWS_AS(read_nifti1((dir / "junk.nii").string()), FormatError);
}

TEST_CASE("gzip-compressed NIfTI is read transparently") {
  auto dir = tmp_dir();
  std::vector<float> payload(27);
  for (int i = 0; i < 27; ++i) payload[i] = 10.0f * static_cast<float>(i);
  std::string raw(reinterpret_cast<char*>(payload.data()), payload.size() * 4);
  std::string file = craft_nifti(3, 3, 3, 3, 16, 0, 0, raw);

  auto gzpath = (dir / "c.nii.gz").string();
  gzFile gz = gzopen(gzpath.c_str(), "wb");
  REQUIRE(gz != nullptr);
  gzwrite(gz, file.data(), static_cast<unsigned>(file.size()));
  gzclose(gz);

  Volume vol = read_nifti1(gzpath);
  CHECK(vol.dims == Dims3{3, 3, 3});
  for (int i = 0; i < 27; ++i) CHECK(vol.voxels[i] == 10.0f * static_cast<float>(i));
}

TEST_CASE("checkpoint round trip") {
  auto dir = tmp_dir();
  ModelConfig mc;
  mc.input_size = 16;
  mc.depth = 2;
  mc.base_channels = 2;
  mc.seed = 9;
  auto model = build_model<float>(mc);
  Optimizer<float> opt(OptimizerKind::adam);
  // take one step so optimizer state is non-trivial
  std::vector<Param<float>> single;
  single.push_back({"probe", Tensor<float>::scalar(1.0f, true)});
  backward(mul(single[0].tensor, single[0].tensor));
  opt.step(single, 0.01);

  LRScheduleState sched;
  sched.lr = 0.005;
  sched.best = 0.91;
  sched.epochs_since_improvement = 7;

  Checkpoint ckpt = make_checkpoint(model, &opt, sched, 42);
  auto p1 = (dir / "a.vlck").string();
  auto p2 = (dir / "b.vlck").string();
  save_checkpoint(p1, ckpt);
  Checkpoint loaded = load_checkpoint(p1);
  save_checkpoint(p2, loaded);
  CHECK(slurp(p1) == slurp(p2));  // save -> load -> save is byte-identical

  CHECK(loaded.epoch == 42);
  CHECK(loaded.schedule.lr == 0.005);
  CHECK(loaded.schedule.best == 0.91);
  CHECK(loaded.schedule.epochs_since_improvement == 7);
  CHECK(loaded.config.input_size == 16);

  // parameters restore bitwise
  auto restored = build_model<float>(loaded.config);
  for (auto& p : restored.params()) {
    auto vals = p.tensor.mutable_data();
    for (auto& v : vals) v = -123.0f;
  }
  load_into_model(loaded, restored);
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    auto a = model.params()[i].tensor.data();
    auto b = restored.params()[i].tensor.data();
    for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k] == b[k]);
  }

  // a mismatched architecture names the offending parameter
  ModelConfig other = mc;
  other.base_channels = 4;
  auto wrong = build_model<float>(other);
  try {
    load_into_model(loaded, wrong);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("in.conv.weight") != std::string::npos);
  }

  // version gate
  std::string bytes = slurp(p1);
  std::uint32_t v9 = 9;
  std::memcpy(bytes.data() + 4, &v9, 4);
  spit(dir / "v9.vlck", bytes);
  CHECK_THROWS_AS(load_checkpoint((dir / "v9.vlck").string()), UnsupportedError);
}
