// Python bindings for the segmentation core: phantom generation,
// preprocessing, metrics, model inference, and volume I/O on numpy arrays.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "lobeseg/config.hpp"
#include "lobeseg/gradcheck.hpp"
#include "lobeseg/io.hpp"
#include "lobeseg/phantom.hpp"
#include "lobeseg/preprocess.hpp"
#include "lobeseg/trainer.hpp"

namespace py = pybind11;
using namespace lobeseg;
using nlohmann::json;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

json dict_to_json(const py::object& obj) {
  if (obj.is_none()) return json::object();
  py::module_ pyjson = py::module_::import("json");
  std::string dumped = py::cast<std::string>(pyjson.attr("dumps")(obj));
  return json::parse(dumped);
}

py::object json_to_dict(const json& j) {
  py::module_ pyjson = py::module_::import("json");
  return pyjson.attr("loads")(j.dump());
}

Volume volume_from_array(const FloatArray& arr,
                         std::array<float, 3> spacing = {1.0f, 1.0f, 1.0f}) {
  if (arr.ndim() != 3) throw DimensionError("expected a 3-D array (D,H,W)");
  Volume v;
  v.dims = {arr.shape(0), arr.shape(1), arr.shape(2)};
  v.spacing = spacing;
  v.voxels.assign(arr.data(), arr.data() + arr.size());
  return v;
}

LabelMap labels_from_array(const ByteArray& arr) {
  if (arr.ndim() != 3) throw DimensionError("expected a 3-D array (D,H,W)");
  LabelMap m;
  m.dims = {arr.shape(0), arr.shape(1), arr.shape(2)};
  m.vocabulary = lung_vocabulary();
  m.voxels.assign(arr.data(), arr.data() + arr.size());
  return m;
}

py::array volume_to_array(const Volume& v) {
  py::array_t<float> arr({v.dims[0], v.dims[1], v.dims[2]});
  std::copy(v.voxels.begin(), v.voxels.end(), arr.mutable_data());
  return arr;
}

py::array labels_to_array(const LabelMap& m) {
  py::array_t<std::uint8_t> arr({m.dims[0], m.dims[1], m.dims[2]});
  std::copy(m.voxels.begin(), m.voxels.end(), arr.mutable_data());
  return arr;
}

Tensor<float> tensor_from_array(const FloatArray& arr) {
  Shape shape(arr.ndim());
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[static_cast<std::size_t>(i)] = arr.shape(i);
  std::vector<float> data(arr.data(), arr.data() + arr.size());
  return Tensor<float>::from_vector(std::move(shape), std::move(data));
}

py::array tensor_to_array(const Tensor<float>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> arr(shape);
  std::copy(t.data().begin(), t.data().end(), arr.mutable_data());
  return arr;
}

// [C,D,H,W] probability/one-hot arrays get an implicit batch dim
Tensor<float> chw_tensor(const FloatArray& arr) {
  if (arr.ndim() != 4) throw DimensionError("expected a 4-D array (C,D,H,W)");
  Shape shape{1, arr.shape(0), arr.shape(1), arr.shape(2), arr.shape(3)};
  std::vector<float> data(arr.data(), arr.data() + arr.size());
  return Tensor<float>::from_vector(std::move(shape), std::move(data));
}

class PyModel {
 public:
  explicit PyModel(const py::object& config)
      : model_(build_model<float>(model_config_from_json(dict_to_json(config)))) {}
  explicit PyModel(Model<float> m) : model_(std::move(m)) {}

  py::tuple forward(const FloatArray& input) {
    Tensor<float> batch;
    if (input.ndim() == 3) {
      Shape shape{1, 1, input.shape(0), input.shape(1), input.shape(2)};
      std::vector<float> data(input.data(), input.data() + input.size());
      batch = Tensor<float>::from_vector(std::move(shape), std::move(data));
    } else if (input.ndim() == 5) {
      batch = tensor_from_array(input);
    } else {
      throw DimensionError("forward expects (D,H,W) or (N,1,D,H,W)");
    }
    NoGradGuard no_grad;
    auto out = lobeseg::forward(model_, batch, {Phase::eval, 0, false});
    py::object aux = py::none();
    if (model_.config().aux_enabled) aux = tensor_to_array(out.aux_probs);
    return py::make_tuple(tensor_to_array(out.main_probs), aux);
  }

  std::int64_t parameter_count() const { return model_.parameter_count(); }
  py::object config() const { return json_to_dict(to_json(model_.config())); }

  Model<float>& model() { return model_; }

 private:
  Model<float> model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "volumetric lobe/airway segmentation core";

  py::register_exception<Error>(m, "LobesegError");

  // phantom generation
  m.def("default_phantom_spec",
        [](std::int64_t grid_edge, std::uint64_t seed) {
          PhantomSpec spec;
          spec.grid_edge = grid_edge;
          spec.seed = seed;
          return json_to_dict(to_json(spec));
        },
        py::arg("grid_edge") = 64, py::arg("seed") = 0);

  m.def("generate_phantom",
        [](const py::object& spec_dict) {
          PhantomSpec spec = phantom_spec_from_json(dict_to_json(spec_dict));
          auto [vol, labels] = generate_case(spec);
          return py::make_tuple(volume_to_array(vol), labels_to_array(labels),
                                py::make_tuple(vol.spacing[0], vol.spacing[1], vol.spacing[2]));
        },
        py::arg("spec"), "Generate (hu_volume, labels, spacing) from a spec dict.");

  m.def("make_dataset",
        [](int n, const py::object& spec_dict, std::uint64_t seed) {
          PhantomSpec tmpl = phantom_spec_from_json(dict_to_json(spec_dict));
          py::list out;
          for (const auto& c : make_dataset(n, tmpl, JitterRanges{}, seed)) {
            py::dict entry;
            entry["id"] = c.id;
            entry["spec"] = json_to_dict(to_json(c.spec));
            out.append(entry);
          }
          return out;
        },
        py::arg("n"), py::arg("spec"), py::arg("seed") = 0);

  m.def("apply_disease",
        [](const FloatArray& vol, const ByteArray& labels, const std::string& mode,
           double severity, std::uint64_t seed) {
          auto [dv, dl] = apply_disease(volume_from_array(vol), labels_from_array(labels),
                                        disease_from_string(mode), severity, seed);
          return py::make_tuple(volume_to_array(dv), labels_to_array(dl));
        },
        py::arg("hu_volume"), py::arg("labels"), py::arg("mode"), py::arg("severity"),
        py::arg("seed") = 0);

  m.def("lung_class_names", [] { return lung_vocabulary(); });

  // preprocessing
  m.def("clip_hu",
        [](const FloatArray& vol, float lo, float hi) {
          PreprocessConfig cfg;
          cfg.hu_lo = lo;
          cfg.hu_hi = hi;
          return volume_to_array(clip_hu(volume_from_array(vol), cfg));
        },
        py::arg("hu_volume"), py::arg("hu_lo") = -1000.0f, py::arg("hu_hi") = 400.0f);

  m.def("zscore",
        [](const FloatArray& vol, double eps) {
          return volume_to_array(zscore(volume_from_array(vol), eps));
        },
        py::arg("volume"), py::arg("eps") = 1e-8);

  m.def("resample",
        [](const FloatArray& vol, std::int64_t d, std::int64_t h, std::int64_t w,
           const std::string& interp) {
          Interp mode = interp == "nearest" ? Interp::nearest : Interp::trilinear;
          return volume_to_array(resample(volume_from_array(vol), {d, h, w}, mode));
        },
        py::arg("volume"), py::arg("d"), py::arg("h"), py::arg("w"),
        py::arg("interp") = "trilinear");

  m.def("resample_labels",
        [](const ByteArray& labels, std::int64_t d, std::int64_t h, std::int64_t w) {
          return labels_to_array(resample(labels_from_array(labels), {d, h, w}, Interp::nearest));
        },
        py::arg("labels"), py::arg("d"), py::arg("h"), py::arg("w"));

  m.def("preprocess_case",
        [](const FloatArray& vol, const ByteArray& labels, std::int64_t target_edge) {
          PreprocessConfig cfg;
          cfg.target_edge = target_edge;
          auto pc = preprocess_case<float>(volume_from_array(vol), labels_from_array(labels), cfg);
          return py::make_tuple(tensor_to_array(pc.input), tensor_to_array(pc.main_onehot),
                                tensor_to_array(pc.aux_onehot));
        },
        py::arg("hu_volume"), py::arg("labels"), py::arg("target_edge") = 32,
        "clip -> zscore -> resample -> one-hot split; returns (input, main, aux).");

  // metrics
  m.def("dice_per_class",
        [](const FloatArray& probs, const FloatArray& onehot, double delta) {
          DiceConfig cfg;
          cfg.delta = delta;
          NoGradGuard no_grad;
          auto dice = dice_per_class(chw_tensor(probs), chw_tensor(onehot), cfg);
          return std::vector<double>(dice.data().begin(), dice.data().end());
        },
        py::arg("probs"), py::arg("onehot"), py::arg("delta") = 1e-5);

  m.def("dice_loss",
        [](const FloatArray& probs, const FloatArray& onehot, double delta,
           bool include_background) {
          DiceConfig cfg;
          cfg.delta = delta;
          cfg.include_background = include_background;
          NoGradGuard no_grad;
          return static_cast<double>(dice_loss(chw_tensor(probs), chw_tensor(onehot), cfg).item());
        },
        py::arg("probs"), py::arg("onehot"), py::arg("delta") = 1e-5,
        py::arg("include_background") = true);

  m.def("hard_dice",
        [](const ByteArray& pred, const ByteArray& gt, int class_id) {
          return hard_dice(labels_from_array(pred), labels_from_array(gt), class_id);
        },
        py::arg("pred"), py::arg("gt"), py::arg("class_id"));

  m.def("t_test",
        [](const std::vector<double>& a, const std::vector<double>& b, bool paired) {
          TTestResult r = t_test(a, b, paired);
          py::dict out;
          out["t"] = r.t;
          out["p"] = r.p;
          out["df"] = r.df;
          out["degenerate"] = r.degenerate;
          return out;
        },
        py::arg("sample_a"), py::arg("sample_b"), py::arg("paired") = false);

  m.def("emphysema_stats",
        [](const FloatArray& vol, const ByteArray& region_mask, double threshold_hu,
           double percentile) {
          Volume v = volume_from_array(vol);
          std::vector<std::uint8_t> mask(region_mask.data(),
                                         region_mask.data() + region_mask.size());
          EmphysemaStats s = emphysema_stats(v, mask, threshold_hu, percentile);
          py::dict out;
          out["percent_laa"] = s.percent_laa;
          out["percentile_density"] = s.percentile_density;
          return out;
        },
        py::arg("hu_volume"), py::arg("region_mask"), py::arg("threshold_hu") = -950.0,
        py::arg("percentile") = 15.0);

  // model
  py::class_<PyModel>(m, "Model")
      .def(py::init<const py::object&>(), py::arg("config"))
      .def("forward", &PyModel::forward, py::arg("input"),
           "Run eval-mode inference; returns (main_probs, aux_probs or None).")
      .def_property_readonly("parameter_count", &PyModel::parameter_count)
      .def_property_readonly("config", &PyModel::config);

  m.def("load_model",
        [](const std::string& path) {
          Checkpoint ckpt = load_checkpoint(path);
          Model<float> model = build_model<float>(ckpt.config);
          load_into_model(ckpt, model);
          return PyModel(std::move(model));
        },
        py::arg("checkpoint_path"));

  // io
  m.def("read_volume",
        [](const std::string& path) {
          AnyVolume any = read_volume(path);
          if (std::holds_alternative<Volume>(any)) {
            const Volume& v = std::get<Volume>(any);
            return py::make_tuple(volume_to_array(v), "hu");
          }
          const LabelMap& l = std::get<LabelMap>(any);
          return py::make_tuple(labels_to_array(l), "labels");
        },
        py::arg("path"));

  m.def("write_volume",
        [](const std::string& path, const py::array& arr, std::array<float, 3> spacing) {
          if (py::isinstance<py::array_t<std::uint8_t>>(arr)) {
            LabelMap l = labels_from_array(arr.cast<ByteArray>());
            l.spacing = spacing;
            write_volume(path, l);
          } else {
            Volume v = volume_from_array(arr.cast<FloatArray>(), spacing);
            write_volume(path, v);
          }
        },
        py::arg("path"), py::arg("array"),
        py::arg("spacing") = std::array<float, 3>{1.0f, 1.0f, 1.0f});

  m.def("read_nifti1",
        [](const std::string& path) {
          Volume v = read_nifti1(path);
          return py::make_tuple(volume_to_array(v),
                                py::make_tuple(v.spacing[0], v.spacing[1], v.spacing[2]));
        },
        py::arg("path"));

  m.def("gradcheck",
        [](int seeds) {
          py::dict out;
          for (const auto& r : run_gradcheck_suite(seeds)) out[r.op.c_str()] = r.max_rel_err;
          return out;
        },
        py::arg("seeds") = 5);

  m.def("set_num_threads", &set_num_threads, py::arg("n"));
}
