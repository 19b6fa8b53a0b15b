// lobeseg: volumetric lobe/airway segmentation workbench.
//
// Subcommands cover the whole workflow: gen-phantoms -> preprocess -> train
// -> eval / predict / stats, plus a gradcheck diagnostic. Exit codes: 0 on
// success, 1 on runtime failure, 2 on usage or configuration errors.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include <json.hpp>

#include "lobeseg/config.hpp"
#include "lobeseg/gradcheck.hpp"
#include "lobeseg/io.hpp"
#include "lobeseg/phantom.hpp"
#include "lobeseg/preprocess.hpp"
#include "lobeseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace lobeseg;
using nlohmann::json;

namespace {

bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

Volume load_any_volume(const std::string& path) {
  if (has_suffix(path, ".nii") || has_suffix(path, ".nii.gz")) return read_nifti1(path);
  return read_hu_volume(path);
}

struct ManifestCase {
  std::string id;
  PhantomSpec spec;
};

json manifest_json(std::uint64_t seed, const std::vector<CaseSpec>& cases) {
  json out;
  out["seed"] = seed;
  json list = json::array();
  for (const auto& c : cases) {
    json entry;
    entry["id"] = c.id;
    entry["seed"] = c.spec.seed;
    entry["disease"] = to_string(c.spec.disease);
    entry["severity"] = c.spec.severity;
    entry["spec"] = to_json(c.spec);
    list.push_back(entry);
  }
  out["cases"] = list;
  return out;
}

std::vector<ManifestCase> read_manifest(const std::string& dir) {
  json j = json::parse(read_text_file(dir + "/manifest.json"));
  std::vector<ManifestCase> cases;
  for (const auto& entry : j.at("cases"))
    cases.push_back({entry.at("id").get<std::string>(),
                     phantom_spec_from_json(entry.at("spec"))});
  return cases;
}

int cmd_gen_phantoms(const std::string& out_dir, int n, std::uint64_t seed, std::int64_t size,
                     const std::string& disease, double severity) {
  PhantomSpec tmpl;
  tmpl.grid_edge = size;
  tmpl.disease = disease_from_string(disease);
  tmpl.severity = severity;
  auto cases = make_dataset(n, tmpl, JitterRanges{}, seed);
  fs::create_directories(out_dir);
  for (const auto& c : cases) {
    auto [vol, labels] = generate_case(c.spec);
    write_volume(out_dir + "/" + c.id + "_vol.vlbv", vol);
    write_volume(out_dir + "/" + c.id + "_lab.vlbv", labels);
  }
  write_text_file(out_dir + "/manifest.json", manifest_json(seed, cases).dump(2) + "\n");
  std::printf("wrote %d cases to %s\n", n, out_dir.c_str());
  return 0;
}

int cmd_preprocess(const std::string& in_dir, const std::string& out_dir,
                   const PreprocessConfig& cfg) {
  auto cases = read_manifest(in_dir);
  fs::create_directories(out_dir);
  for (const auto& c : cases) {
    Volume vol = read_hu_volume(in_dir + "/" + c.id + "_vol.vlbv");
    LabelMap labels = read_label_map(in_dir + "/" + c.id + "_lab.vlbv");
    std::int64_t s = cfg.target_edge;
    Volume img = resample(zscore(clip_hu(vol, cfg), cfg.eps), {s, s, s}, Interp::trilinear);
    LabelMap lab = resample(labels, {s, s, s}, Interp::nearest);
    write_volume(out_dir + "/" + c.id + "_img.vlbv", img);
    write_volume(out_dir + "/" + c.id + "_lab.vlbv", lab);
  }
  std::string manifest = read_text_file(in_dir + "/manifest.json");
  write_text_file(out_dir + "/manifest.json", manifest);
  std::printf("preprocessed %zu cases to %s\n", cases.size(), out_dir.c_str());
  return 0;
}

template <class T>
std::vector<TrainCase<T>> load_preprocessed(const std::string& dir,
                                            const PreprocessConfig& cfg) {
  std::vector<TrainCase<T>> out;
  for (const auto& c : read_manifest(dir)) {
    Volume img = read_hu_volume(dir + "/" + c.id + "_img.vlbv");
    LabelMap lab = read_label_map(dir + "/" + c.id + "_lab.vlbv");
    if (img.dims != lab.dims)
      throw DataError(concat(c.id, ": image dims ", dims_str(img.dims), " vs labels ",
                             dims_str(lab.dims)));
    std::int64_t sp = img.numel();
    std::vector<T> input(img.voxels.begin(), img.voxels.end());
    std::vector<T> main_oh(static_cast<std::size_t>(cfg.main_classes * sp), T(0));
    std::vector<T> aux_oh(static_cast<std::size_t>(cfg.aux_classes * sp), T(0));
    for (std::int64_t i = 0; i < sp; ++i) {
      std::uint8_t label = lab.voxels[static_cast<std::size_t>(i)];
      main_oh[static_cast<std::size_t>(main_class_of(label, cfg.main_classes)) * sp + i] = T(1);
      aux_oh[static_cast<std::size_t>(aux_class_of(label, cfg.aux_classes)) * sp + i] = T(1);
    }
    Dims3 d = img.dims;
    TrainCase<T> tc;
    tc.id = c.id;
    tc.input = Tensor<T>::from_vector({1, 1, d[0], d[1], d[2]}, std::move(input));
    tc.main_onehot =
        Tensor<T>::from_vector({1, cfg.main_classes, d[0], d[1], d[2]}, std::move(main_oh));
    tc.aux_onehot =
        Tensor<T>::from_vector({1, cfg.aux_classes, d[0], d[1], d[2]}, std::move(aux_oh));
    out.push_back(std::move(tc));
  }
  return out;
}

int cmd_train(RunConfig cfg, bool single_task, const std::string& resume) {
  if (cfg.paths.train_data.empty()) throw ConfigError("train: paths.train_data is required");
  if (cfg.paths.out_dir.empty()) throw ConfigError("train: paths.out_dir is required");
  if (single_task) {
    cfg.train.loss_weights.lambda_aux = 0.0;
    cfg.model.aux_enabled = false;
  }
  cfg.model.dropout_p = cfg.train.dropout_p;

  auto dataset = load_preprocessed<float>(cfg.paths.train_data, cfg.preprocess);
  auto val = cfg.paths.val_data.empty()
                 ? dataset
                 : load_preprocessed<float>(cfg.paths.val_data, cfg.preprocess);

  Model<float> model = build_model<float>(cfg.model);
  Optimizer<float> opt(cfg.train.optimizer, cfg.train.adam);
  LRScheduleState sched;
  sched.lr = cfg.train.lr0;
  TrainOptions opts;
  opts.checkpoint_dir = cfg.paths.out_dir;
  if (!resume.empty()) {
    Checkpoint ckpt = load_checkpoint(resume);
    model = build_model<float>(ckpt.config);
    load_into_model(ckpt, model);
    load_optimizer_state(ckpt, opt);
    sched = ckpt.schedule;
    opts.start_epoch = static_cast<int>(ckpt.epoch);
  }

  History history = train(model, dataset, val, cfg.train, opt, sched, opts);
  fs::create_directories(cfg.paths.out_dir);
  write_text_file(cfg.paths.out_dir + "/history.csv", history_to_csv(history));
  if (!history.empty())
    std::printf("trained %d epochs, final loss %.4f, val dice %.4f\n",
                history.back().epoch, history.back().loss_total,
                history.back().val_dice_mean);
  return 0;
}

// per-case per-class hard Dice of a checkpointed model over a raw phantom dir
DiceReport evaluate_model(const std::string& ckpt_path, const std::string& data_dir) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  Model<float> model = build_model<float>(ckpt.config);
  load_into_model(ckpt, model);

  PreprocessConfig pre;
  pre.target_edge = model.config().input_size;
  pre.main_classes = model.config().main_classes;

  std::vector<std::string> class_names;
  for (int c = 1; c < model.config().main_classes; ++c)
    class_names.push_back(lung_vocabulary()[static_cast<std::size_t>(c)]);

  std::vector<std::string> case_ids;
  std::vector<std::vector<double>> scores;
  for (const auto& c : read_manifest(data_dir)) {
    Volume vol = read_hu_volume(data_dir + "/" + c.id + "_vol.vlbv");
    LabelMap labels = read_label_map(data_dir + "/" + c.id + "_lab.vlbv");
    auto pc = preprocess_case<float>(vol, labels, pre);
    NoGradGuard no_grad;
    auto out = forward(model, pc.input, {Phase::eval, 0, false});
    LabelMap pred;
    pred.dims = {pre.target_edge, pre.target_edge, pre.target_edge};
    pred.vocabulary = lung_vocabulary();
    pred.voxels = argmax_channels(out.main_probs);
    LabelMap gt;
    gt.dims = pred.dims;
    gt.vocabulary = lung_vocabulary();
    gt.voxels = argmax_channels(pc.main_onehot);
    std::vector<double> row;
    for (int cls = 1; cls < model.config().main_classes; ++cls)
      row.push_back(hard_dice(pred, gt, cls));
    case_ids.push_back(c.id);
    scores.push_back(std::move(row));
  }
  return DiceReport::build(class_names, case_ids, scores);
}

int cmd_eval(const std::string& model_path, const std::string& data_dir,
             const std::string& compare_path, const std::string& out_csv,
             const std::string& per_case_csv, bool unpaired) {
  DiceReport report = evaluate_model(model_path, data_dir);
  if (!compare_path.empty()) {
    DiceReport other = evaluate_model(compare_path, data_dir);
    report.attach_comparison(other, /*paired=*/!unpaired);
  }
  std::string csv = report.to_csv();
  if (!out_csv.empty())
    write_text_file(out_csv, csv);
  else
    std::fputs(csv.c_str(), stdout);
  if (!per_case_csv.empty()) write_text_file(per_case_csv, report.per_case_csv());
  return 0;
}

int cmd_predict(const std::string& model_path, const std::string& in_path,
                const std::string& out_dir) {
  Checkpoint ckpt = load_checkpoint(model_path);
  Model<float> model = build_model<float>(ckpt.config);
  load_into_model(ckpt, model);

  Volume vol = load_any_volume(in_path);
  PreprocessConfig pre;
  pre.target_edge = model.config().input_size;
  std::int64_t s = pre.target_edge;
  Volume img = resample(zscore(clip_hu(vol, pre), pre.eps), {s, s, s}, Interp::trilinear);
  std::vector<float> input(img.voxels.begin(), img.voxels.end());
  auto batch = Tensor<float>::from_vector({1, 1, s, s, s}, std::move(input));

  NoGradGuard no_grad;
  auto out = forward(model, batch, {Phase::eval, 0, false});
  fs::create_directories(out_dir);

  LabelMap main_lab;
  main_lab.dims = {s, s, s};
  main_lab.spacing = img.spacing;
  main_lab.vocabulary = lung_vocabulary();
  main_lab.voxels = argmax_channels(out.main_probs);
  write_volume(out_dir + "/main_labels.vlbv", main_lab);

  if (model.config().aux_enabled) {
    LabelMap aux_lab;
    aux_lab.dims = {s, s, s};
    aux_lab.spacing = img.spacing;
    aux_lab.vocabulary = {"background", "trachea & primary bronchi",
                          "lobar & segmental bronchi"};
    aux_lab.voxels = argmax_channels(out.aux_probs);
    write_volume(out_dir + "/aux_labels.vlbv", aux_lab);
  }
  std::printf("wrote predictions to %s\n", out_dir.c_str());
  return 0;
}

int cmd_stats(const std::string& in_path, const std::string& mask_path, double threshold,
              double percentile, const std::string& out_csv) {
  Volume vol = load_any_volume(in_path);
  LabelMap mask = read_label_map(mask_path);

  struct Region {
    std::string name;
    std::vector<std::uint8_t> classes;
  };
  std::vector<Region> regions = {
      {"Both lungs", {1, 2, 3, 4, 5}},
      {"Right lung", {1, 2, 3}},
      {"Left lung", {4, 5}},
  };
  auto counts = mask.class_counts();
  for (std::uint8_t c = 1; c <= 5 && c < counts.size(); ++c)
    if (counts[c] > 0) regions.push_back({mask.vocabulary[c], {c}});

  std::string csv = "region,percent_laa,percentile_density_hu\n";
  for (const auto& r : regions) {
    bool any = false;
    for (auto c : r.classes)
      if (c < counts.size() && counts[c] > 0) any = true;
    if (!any) continue;
    EmphysemaStats s =
        emphysema_stats_for_classes(vol, mask, r.classes, threshold, percentile, r.name);
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s,%.3f,%.6g\n", s.region.c_str(), s.percent_laa,
                  s.percentile_density);
    csv += buf;
  }
  if (!out_csv.empty())
    write_text_file(out_csv, csv);
  else
    std::fputs(csv.c_str(), stdout);
  return 0;
}

int cmd_gradcheck(int seeds) {
  auto reports = run_gradcheck_suite(seeds);
  double worst = 0;
  std::printf("%-26s %s\n", "op", "max_rel_err");
  for (const auto& r : reports) {
    std::printf("%-26s %.3e\n", r.op.c_str(), r.max_rel_err);
    worst = std::max(worst, r.max_rel_err);
  }
  if (worst >= 1e-4) {
    std::fprintf(stderr, "gradcheck failed: worst relative error %.3e >= 1e-4\n", worst);
    return 1;
  }
  std::printf("all ops within 1e-4 (worst %.3e)\n", worst);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"volumetric lobe/airway segmentation workbench"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "cap worker threads (1 = fully deterministic)");

  // gen-phantoms
  auto* gen = app.add_subcommand("gen-phantoms", "generate a synthetic lung phantom dataset");
  std::string gen_out;
  int gen_n = 4;
  std::uint64_t gen_seed = 0;
  std::int64_t gen_size = 32;
  std::string gen_disease = "none";
  double gen_severity = 0.0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n", gen_n, "number of cases");
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--size", gen_size, "grid edge in voxels");
  gen->add_option("--disease", gen_disease, "none|cancer|covid|copd|collapse");
  gen->add_option("--severity", gen_severity, "disease severity in [0,1]");

  // preprocess
  auto* prep = app.add_subcommand("preprocess", "clip, normalize, and resample a dataset");
  std::string prep_in, prep_out;
  std::int64_t prep_size = 32;
  prep->add_option("--in", prep_in, "input dataset directory")->required();
  prep->add_option("--out", prep_out, "output directory")->required();
  prep->add_option("--size", prep_size, "target cubic edge");

  // train
  auto* tr = app.add_subcommand("train", "train a model from a JSON config");
  std::string tr_config, tr_resume;
  bool tr_single_task = false;
  std::vector<std::string> tr_sets;
  tr->add_option("--config", tr_config, "JSON config file")->required();
  tr->add_flag("--single-task", tr_single_task,
               "drop the aux head and zero its loss weight");
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");
  tr->add_option("--set", tr_sets, "override config keys, e.g. --set train.epochs=10");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate checkpoints on a raw dataset");
  std::string ev_model, ev_data, ev_compare, ev_out, ev_per_case;
  bool ev_unpaired = false;
  ev->add_option("--model", ev_model, "model checkpoint")->required();
  ev->add_option("--data", ev_data, "raw dataset directory")->required();
  ev->add_option("--compare", ev_compare, "second checkpoint for a significance test");
  ev->add_option("--out", ev_out, "report CSV path (stdout when omitted)");
  ev->add_option("--per-case", ev_per_case, "long-form per-case CSV path");
  ev->add_flag("--unpaired", ev_unpaired, "Welch test instead of the paired test");

  // predict
  auto* pr = app.add_subcommand("predict", "segment a single volume");
  std::string pr_model, pr_in, pr_out;
  pr->add_option("--model", pr_model, "model checkpoint")->required();
  pr->add_option("--in", pr_in, "input volume (.vlbv, .nii, .nii.gz)")->required();
  pr->add_option("--out", pr_out, "output directory")->required();

  // stats
  auto* st = app.add_subcommand("stats", "emphysema statistics over labeled regions");
  std::string st_in, st_mask, st_out;
  double st_threshold = -950.0, st_percentile = 15.0;
  st->add_option("--in", st_in, "HU volume")->required();
  st->add_option("--mask", st_mask, "label map")->required();
  st->add_option("--threshold", st_threshold, "low-attenuation HU threshold");
  st->add_option("--percentile", st_percentile, "percentile for the density value");
  st->add_option("--out", st_out, "CSV path (stdout when omitted)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference audit of every operator");
  int gc_seeds = 5;
  gc->add_option("--seeds", gc_seeds, "random draws per operator");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (threads > 0) set_num_threads(threads);

  try {
    if (*gen) return cmd_gen_phantoms(gen_out, gen_n, gen_seed, gen_size, gen_disease,
                                      gen_severity);
    if (*prep) {
      PreprocessConfig cfg;
      cfg.target_edge = prep_size;
      return cmd_preprocess(prep_in, prep_out, cfg);
    }
    if (*tr) return cmd_train(load_run_config(tr_config, tr_sets), tr_single_task, tr_resume);
    if (*ev) return cmd_eval(ev_model, ev_data, ev_compare, ev_out, ev_per_case, ev_unpaired);
    if (*pr) return cmd_predict(pr_model, pr_in, pr_out);
    if (*st) return cmd_stats(st_in, st_mask, st_threshold, st_percentile, st_out);
    if (*gc) return cmd_gradcheck(gc_seeds);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
