#include "lobeseg/config.hpp"

#include <fstream>

namespace lobeseg {

using nlohmann::json;

nlohmann::json to_json(const ModelConfig& c) {
  return json{{"input_size", c.input_size}, {"depth", c.depth},
              {"base_channels", c.base_channels}, {"main_classes", c.main_classes},
              {"aux_classes", c.aux_classes}, {"aux_enabled", c.aux_enabled},
              {"prelu_init", c.prelu_init}, {"dropout_p", c.dropout_p},
              {"batch_norm", c.batch_norm}, {"attention", c.attention}, {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.input_size = j.value("input_size", c.input_size);
  c.depth = j.value("depth", c.depth);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.main_classes = j.value("main_classes", c.main_classes);
  c.aux_classes = j.value("aux_classes", c.aux_classes);
  c.aux_enabled = j.value("aux_enabled", c.aux_enabled);
  c.prelu_init = j.value("prelu_init", c.prelu_init);
  c.dropout_p = j.value("dropout_p", c.dropout_p);
  c.batch_norm = j.value("batch_norm", c.batch_norm);
  c.attention = j.value("attention", c.attention);
  c.seed = j.value("seed", c.seed);
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return json{{"lr0", c.lr0},
              {"plateau_patience", c.plateau_patience},
              {"plateau_factor", c.plateau_factor},
              {"dropout_p", c.dropout_p},
              {"lambda_main", c.loss_weights.lambda_main},
              {"lambda_aux", c.loss_weights.lambda_aux},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"optimizer", to_string(c.optimizer)},
              {"adam", json{{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2},
                            {"eps", c.adam.eps}}},
              {"augment", json{{"flip_axial", c.augment.flip_axial},
                               {"flip_coronal", c.augment.flip_coronal},
                               {"flip_sagittal", c.augment.flip_sagittal},
                               {"rotate", c.augment.rotate},
                               {"max_rotate_deg", c.augment.max_rotate_deg},
                               {"intensity_jitter", c.augment.intensity_jitter},
                               {"jitter_amp", c.augment.jitter_amp}}},
              {"seed", c.seed},
              {"checkpoint_every", c.checkpoint_every}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.lr0 = j.value("lr0", c.lr0);
  c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
  c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
  c.dropout_p = j.value("dropout_p", c.dropout_p);
  c.loss_weights.lambda_main = j.value("lambda_main", c.loss_weights.lambda_main);
  c.loss_weights.lambda_aux = j.value("lambda_aux", c.loss_weights.lambda_aux);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j.at("optimizer"));
  if (j.contains("adam")) {
    const json& a = j.at("adam");
    c.adam.beta1 = a.value("beta1", c.adam.beta1);
    c.adam.beta2 = a.value("beta2", c.adam.beta2);
    c.adam.eps = a.value("eps", c.adam.eps);
  }
  if (j.contains("augment")) {
    const json& a = j.at("augment");
    c.augment.flip_axial = a.value("flip_axial", c.augment.flip_axial);
    c.augment.flip_coronal = a.value("flip_coronal", c.augment.flip_coronal);
    c.augment.flip_sagittal = a.value("flip_sagittal", c.augment.flip_sagittal);
    c.augment.rotate = a.value("rotate", c.augment.rotate);
    c.augment.max_rotate_deg = a.value("max_rotate_deg", c.augment.max_rotate_deg);
    c.augment.intensity_jitter = a.value("intensity_jitter", c.augment.intensity_jitter);
    c.augment.jitter_amp = a.value("jitter_amp", c.augment.jitter_amp);
  }
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  return c;
}

nlohmann::json to_json(const PreprocessConfig& c) {
  return json{{"hu_lo", c.hu_lo},       {"hu_hi", c.hu_hi},
              {"target_edge", c.target_edge}, {"eps", c.eps},
              {"main_classes", c.main_classes}, {"aux_classes", c.aux_classes}};
}

PreprocessConfig preprocess_config_from_json(const json& j) {
  PreprocessConfig c;
  c.hu_lo = j.value("hu_lo", c.hu_lo);
  c.hu_hi = j.value("hu_hi", c.hu_hi);
  c.target_edge = j.value("target_edge", c.target_edge);
  c.eps = j.value("eps", c.eps);
  c.main_classes = j.value("main_classes", c.main_classes);
  c.aux_classes = j.value("aux_classes", c.aux_classes);
  return c;
}

namespace {

json to_json(const Ellipsoid& e) {
  return json{{"center", e.center}, {"radii", e.radii}};
}

Ellipsoid ellipsoid_from_json(const json& j, const Ellipsoid& dflt) {
  Ellipsoid e = dflt;
  if (j.contains("center")) e.center = j.at("center").get<std::array<double, 3>>();
  if (j.contains("radii")) e.radii = j.at("radii").get<std::array<double, 3>>();
  return e;
}

json to_json(const FissurePlane& f) {
  return json{{"point", f.point},
              {"normal", f.normal},
              {"wave_amp", f.wave_amp},
              {"wave_freq", f.wave_freq},
              {"wave_phase", f.wave_phase}};
}

FissurePlane plane_from_json(const json& j, const FissurePlane& dflt) {
  FissurePlane f = dflt;
  if (j.contains("point")) f.point = j.at("point").get<std::array<double, 3>>();
  if (j.contains("normal")) f.normal = j.at("normal").get<std::array<double, 3>>();
  f.wave_amp = j.value("wave_amp", f.wave_amp);
  f.wave_freq = j.value("wave_freq", f.wave_freq);
  f.wave_phase = j.value("wave_phase", f.wave_phase);
  return f;
}

}  // namespace

nlohmann::json to_json(const PhantomSpec& c) {
  return json{{"grid_edge", c.grid_edge},
              {"right_lung", to_json(c.right_lung)},
              {"left_lung", to_json(c.left_lung)},
              {"right_oblique", to_json(c.right_oblique)},
              {"right_horizontal", to_json(c.right_horizontal)},
              {"left_oblique", to_json(c.left_oblique)},
              {"airway", json{{"trunk_radius", c.airway.trunk_radius},
                              {"primary_radius", c.airway.primary_radius},
                              {"branch_radius", c.airway.branch_radius},
                              {"branch_depth", c.airway.branch_depth}}},
              {"background_hu", c.background_hu},
              {"lung_hu", c.lung_hu},
              {"airway_hu", c.airway_hu},
              {"noise_sigma", c.noise_sigma},
              {"disease", to_string(c.disease)},
              {"severity", c.severity},
              {"seed", c.seed}};
}

PhantomSpec phantom_spec_from_json(const json& j) {
  PhantomSpec c;
  c.grid_edge = j.value("grid_edge", c.grid_edge);
  if (j.contains("right_lung")) c.right_lung = ellipsoid_from_json(j.at("right_lung"), c.right_lung);
  if (j.contains("left_lung")) c.left_lung = ellipsoid_from_json(j.at("left_lung"), c.left_lung);
  if (j.contains("right_oblique"))
    c.right_oblique = plane_from_json(j.at("right_oblique"), c.right_oblique);
  if (j.contains("right_horizontal"))
    c.right_horizontal = plane_from_json(j.at("right_horizontal"), c.right_horizontal);
  if (j.contains("left_oblique"))
    c.left_oblique = plane_from_json(j.at("left_oblique"), c.left_oblique);
  if (j.contains("airway")) {
    const json& a = j.at("airway");
    c.airway.trunk_radius = a.value("trunk_radius", c.airway.trunk_radius);
    c.airway.primary_radius = a.value("primary_radius", c.airway.primary_radius);
    c.airway.branch_radius = a.value("branch_radius", c.airway.branch_radius);
    c.airway.branch_depth = a.value("branch_depth", c.airway.branch_depth);
  }
  c.background_hu = j.value("background_hu", c.background_hu);
  c.lung_hu = j.value("lung_hu", c.lung_hu);
  c.airway_hu = j.value("airway_hu", c.airway_hu);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  if (j.contains("disease")) c.disease = disease_from_string(j.at("disease"));
  c.severity = j.value("severity", c.severity);
  c.seed = j.value("seed", c.seed);
  return c;
}

nlohmann::json to_json(const RunConfig& c) {
  return json{{"model", to_json(c.model)},
              {"train", to_json(c.train)},
              {"preprocess", to_json(c.preprocess)},
              {"phantom", to_json(c.phantom)},
              {"paths", json{{"train_data", c.paths.train_data},
                             {"val_data", c.paths.val_data},
                             {"out_dir", c.paths.out_dir}}}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("preprocess")) c.preprocess = preprocess_config_from_json(j.at("preprocess"));
  if (j.contains("phantom")) c.phantom = phantom_spec_from_json(j.at("phantom"));
  if (j.contains("paths")) {
    const json& p = j.at("paths");
    c.paths.train_data = p.value("train_data", "");
    c.paths.val_data = p.value("val_data", "");
    c.paths.out_dir = p.value("out_dir", "");
  }
  return c;
}

namespace {

void reject_unknown_keys(const json& user, const json& schema, const std::string& prefix) {
  if (!user.is_object()) return;
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!schema.is_object() || !schema.contains(it.key()))
      throw ConfigError(concat("unknown config key '", path, "'"));
    reject_unknown_keys(it.value(), schema.at(it.key()), path);
  }
}

}  // namespace

void apply_override(json& j, const std::string& spec) {
  auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError(concat("override must look like key.path=value, got '", spec, "'"));
  std::string path = spec.substr(0, eq);
  std::string value = spec.substr(eq + 1);

  json* node = &j;
  std::size_t start = 0;
  while (true) {
    std::size_t dot = path.find('.', start);
    std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ConfigError(concat("bad override path '", path, "'"));
    if (dot == std::string::npos) {
      json parsed;
      try {
        parsed = json::parse(value);
      } catch (const json::exception&) {
        parsed = value;  // bare word -> string
      }
      (*node)[key] = parsed;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError(concat("cannot open config file ", path));
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError(concat("config parse error in ", path, ": ", e.what()));
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  json schema = to_json(RunConfig{});
  reject_unknown_keys(j, schema, "");
  RunConfig cfg = run_config_from_json(j);
  cfg.model.validate();
  cfg.train.validate();
  cfg.preprocess.validate();
  return cfg;
}

}  // namespace lobeseg
