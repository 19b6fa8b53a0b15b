#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "lobeseg/io.hpp"
#include "lobeseg/phantom.hpp"
#include "lobeseg/preprocess.hpp"
#include "lobeseg/trainer.hpp"

using namespace lobeseg;

namespace {

std::vector<TrainCase<float>> tiny_dataset(int n, std::int64_t edge, std::uint64_t seed) {
  PhantomSpec tmpl;
  tmpl.grid_edge = 24;
  PreprocessConfig pre;
  pre.target_edge = edge;
  std::vector<TrainCase<float>> cases;
  for (const auto& cs : make_dataset(n, tmpl, JitterRanges{}, seed)) {
    auto [vol, labels] = generate_case(cs.spec);
    auto pc = preprocess_case<float>(vol, labels, pre);
    cases.push_back({cs.id, pc.input, pc.main_onehot, pc.aux_onehot});
  }
  return cases;
}

TrainConfig quick_config(int epochs, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.seed = seed;
  cfg.lr0 = 1e-3;
  cfg.dropout_p = 0.0;
  cfg.augment.rotate = false;
  cfg.augment.intensity_jitter = false;
  return cfg;
}

ModelConfig tiny_model_config(std::int64_t edge, std::uint64_t seed) {
  ModelConfig m;
  m.input_size = edge;
  m.depth = 2;
  m.base_channels = 2;
  m.dropout_p = 0.0;
  m.seed = seed;
  return m;
}

}  // namespace

TEST_CASE("lr_on_plateau follows the published schedule") {
  // exact division by 10 after 50 stagnant epochs from 0.01
  LRScheduleState s;
  s.lr = 0.01;
  lr_on_plateau(s, 0.5, 50, 10.0);  // first call improves over -inf
  CHECK(s.lr == 0.01);
  for (int i = 0; i < 49; ++i) lr_on_plateau(s, 0.5, 50, 10.0);
  CHECK(s.lr == 0.01);
  lr_on_plateau(s, 0.5, 50, 10.0);  // 50th stagnant epoch
  CHECK(s.lr == 0.001);
  CHECK(s.epochs_since_improvement == 0);

  // improvement resets the counter and leaves the rate alone
  LRScheduleState r;
  r.lr = 0.01;
  lr_on_plateau(r, 0.5, 50, 10.0);
  for (int i = 0; i < 29; ++i) lr_on_plateau(r, 0.5, 50, 10.0);
  CHECK(r.epochs_since_improvement == 29);
  lr_on_plateau(r, 0.6, 50, 10.0);  // epoch 30 improves
  CHECK(r.epochs_since_improvement == 0);
  CHECK(r.lr == 0.01);

  // two full plateaus compose multiplicatively
  LRScheduleState t;
  t.lr = 0.01;
  lr_on_plateau(t, 0.5, 50, 10.0);
  for (int i = 0; i < 100; ++i) lr_on_plateau(t, 0.5, 50, 10.0);
  CHECK(t.lr == doctest::Approx(1e-4).epsilon(1e-12));

  // sub-threshold improvement does not reset
  LRScheduleState u;
  u.lr = 0.01;
  lr_on_plateau(u, 0.5, 3, 10.0);
  lr_on_plateau(u, 0.5 + 1e-9, 3, 10.0);
  CHECK(u.epochs_since_improvement == 1);
}

TEST_CASE("augmentation invariants") {
  auto cases = tiny_dataset(1, 16, 3);
  auto& c = cases[0];

  SUBCASE("same axis flipped twice is the identity") {
    AugmentParams flip;
    flip.flip[1] = true;
    Tensor<float> v = c.input, m = c.main_onehot, a = c.aux_onehot;
    apply_augment(flip, v, m, a);
    apply_augment(flip, v, m, a);
    for (std::int64_t i = 0; i < v.numel(); ++i) CHECK(v.data()[i] == c.input.data()[i]);
    for (std::int64_t i = 0; i < m.numel(); ++i) CHECK(m.data()[i] == c.main_onehot.data()[i]);
  }

  SUBCASE("one-hot sums stay exactly 1 after any augmentation") {
    AugmentParams p;
    p.flip[2] = true;
    p.angle_rad = 0.15;
    p.intensity_delta = 0.07;
    Tensor<float> v = c.input, m = c.main_onehot, a = c.aux_onehot;
    apply_augment(p, v, m, a);
    std::int64_t sp = 16 * 16 * 16;
    for (std::int64_t i = 0; i < sp; ++i) {
      float ms = 0, as = 0;
      for (int ch = 0; ch < 6; ++ch) ms += m.data()[ch * sp + i];
      for (int ch = 0; ch < 3; ++ch) as += a.data()[ch * sp + i];
      CHECK(ms == 1.0f);
      CHECK(as == 1.0f);
    }
  }

  SUBCASE("fixed seed reproduces the same transform parameters") {
    AugmentConfig cfg;
    cfg.flip_axial = cfg.flip_coronal = cfg.flip_sagittal = true;
    auto p1 = sample_augment(cfg, 99);
    auto p2 = sample_augment(cfg, 99);
    CHECK(p1.angle_rad == p2.angle_rad);
    CHECK(p1.intensity_delta == p2.intensity_delta);
    CHECK(p1.flip[0] == p2.flip[0]);
    CHECK(p1.flip[1] == p2.flip[1]);
    CHECK(p1.flip[2] == p2.flip[2]);
    auto p3 = sample_augment(cfg, 100);
    bool differs = p1.angle_rad != p3.angle_rad || p1.intensity_delta != p3.intensity_delta ||
                   p1.flip[0] != p3.flip[0] || p1.flip[1] != p3.flip[1] ||
                   p1.flip[2] != p3.flip[2];
    CHECK(differs);
  }
}

TEST_CASE("optimizer updates") {
  SUBCASE("zero gradients leave parameters unchanged") {
    std::vector<Param<double>> params;
    params.push_back({"p", Tensor<double>::from_vector({3}, {1.0, -2.0, 0.5}, true)});
    backward(mul_scalar(sum_all(params[0].tensor), 0.0));  // exact zero grads

    Optimizer<double> sgd(OptimizerKind::sgd);
    sgd.step(params, 0.1);
    CHECK(params[0].tensor.data()[0] == 1.0);
    CHECK(params[0].tensor.data()[1] == -2.0);

    Optimizer<double> adam(OptimizerKind::adam);
    adam.step(params, 0.1);
    CHECK(std::fabs(params[0].tensor.data()[0] - 1.0) <= 1e-12);
    CHECK(std::fabs(params[0].tensor.data()[1] + 2.0) <= 1e-12);
  }

  SUBCASE("sgd on f(p)=p^2 from p=1 with lr 0.1 gives 0.8") {
    std::vector<Param<double>> params;
    params.push_back({"p", Tensor<double>::scalar(1.0, true)});
    backward(mul(params[0].tensor, params[0].tensor));
    Optimizer<double> sgd(OptimizerKind::sgd);
    sgd.step(params, 0.1);
    CHECK(params[0].tensor.item() == doctest::Approx(0.8).epsilon(1e-15));
  }

  SUBCASE("adam drives the quadratic below 1e-3 within 500 steps") {
    std::vector<Param<double>> params;
    params.push_back({"p", Tensor<double>::scalar(1.0, true)});
    Optimizer<double> adam(OptimizerKind::adam);
    for (int i = 0; i < 500; ++i) {
      params[0].tensor.zero_grad();
      backward(mul(params[0].tensor, params[0].tensor));
      adam.step(params, 0.01);
    }
    CHECK(std::fabs(params[0].tensor.item()) < 1e-3);
  }

  SUBCASE("missing gradient names the parameter") {
    std::vector<Param<float>> params;
    params.push_back({"enc0.conv1.weight", Tensor<float>::zeros({2}, true)});
    Optimizer<float> sgd(OptimizerKind::sgd);
    try {
      sgd.step(params, 0.1);
      FAIL("expected ContractError");
    } catch (const ContractError& e) {
      CHECK(std::string(e.what()).find("enc0.conv1.weight") != std::string::npos);
    }
  }
}

TEST_CASE("training is deterministic for a fixed seed") {
  auto dataset = tiny_dataset(2, 16, 5);
  auto run = [&] {
    auto model = build_model<float>(tiny_model_config(16, 7));
    TrainConfig cfg = quick_config(2, 11);
    Optimizer<float> opt(cfg.optimizer, cfg.adam);
    LRScheduleState sched;
    sched.lr = cfg.lr0;
    return train(model, dataset, dataset, cfg, opt, sched);
  };
  auto h1 = run();
  auto h2 = run();
  REQUIRE(h1.size() == h2.size());
  for (std::size_t i = 0; i < h1.size(); ++i) {
    CHECK(h1[i].loss_total == h2[i].loss_total);
    CHECK(h1[i].val_dice_mean == h2[i].val_dice_mean);
  }
  CHECK(history_to_csv(h1).rfind("epoch,loss_total,loss_main,loss_aux,lr,val_dice_mean\n", 0) ==
        0);
}

TEST_CASE("training loss falls on a tiny overfit run") {
  auto dataset = tiny_dataset(2, 16, 21);
  auto model = build_model<float>(tiny_model_config(16, 3));
  TrainConfig cfg = quick_config(25, 9);
  cfg.lr0 = 3e-3;
  Optimizer<float> opt(cfg.optimizer, cfg.adam);
  LRScheduleState sched;
  sched.lr = cfg.lr0;
  auto history = train(model, dataset, dataset, cfg, opt, sched);
  CHECK(history.back().loss_total < history.front().loss_total);
  CHECK(history.back().val_dice_mean > history.front().val_dice_mean * 0.9);
}

TEST_CASE("resume from checkpoint reproduces the uninterrupted history") {
  auto dataset = tiny_dataset(2, 16, 31);
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "lobeseg_resume_test";
  fs::remove_all(dir);

  TrainConfig cfg = quick_config(6, 17);
  cfg.checkpoint_every = 3;

  auto model_a = build_model<float>(tiny_model_config(16, 5));
  Optimizer<float> opt_a(cfg.optimizer, cfg.adam);
  LRScheduleState sched_a;
  sched_a.lr = cfg.lr0;
  TrainOptions opts;
  opts.checkpoint_dir = dir.string();
  auto full = train(model_a, dataset, dataset, cfg, opt_a, sched_a, opts);

  auto ckpt = load_checkpoint((dir / "ckpt_epoch3.vlck").string());
  CHECK(ckpt.epoch == 3);
  auto model_b = build_model<float>(ckpt.config);
  load_into_model(ckpt, model_b);
  Optimizer<float> opt_b(cfg.optimizer, cfg.adam);
  load_optimizer_state(ckpt, opt_b);
  LRScheduleState sched_b = ckpt.schedule;
  TrainOptions resume;
  resume.start_epoch = static_cast<int>(ckpt.epoch);
  auto tail = train(model_b, dataset, dataset, cfg, opt_b, sched_b, resume);

  REQUIRE(tail.size() == 3);
  for (std::size_t i = 0; i < tail.size(); ++i) {
    const auto& a = full[3 + i];
    const auto& b = tail[i];
    CHECK(a.epoch == b.epoch);
    CHECK(std::fabs(a.loss_total - b.loss_total) <= 1e-6);
    CHECK(std::fabs(a.loss_main - b.loss_main) <= 1e-6);
    CHECK(std::fabs(a.loss_aux - b.loss_aux) <= 1e-6);
    CHECK(std::fabs(a.lr - b.lr) <= 1e-6);
    CHECK(std::fabs(a.val_dice_mean - b.val_dice_mean) <= 1e-6);
  }
  fs::remove_all(dir);
}

TEST_CASE("non-finite loss aborts with epoch and batch in the message") {
  auto dataset = tiny_dataset(1, 16, 41);
  auto model = build_model<float>(tiny_model_config(16, 2));
  auto poisoned = model.at("in.conv.weight").mutable_data();
  poisoned[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg = quick_config(1, 1);
  Optimizer<float> opt(cfg.optimizer, cfg.adam);
  LRScheduleState sched;
  sched.lr = cfg.lr0;
  try {
    train(model, dataset, dataset, cfg, opt, sched);
    FAIL("expected Error");
  } catch (const Error& e) {
    std::string msg = e.what();
    CHECK(msg.find("epoch 1") != std::string::npos);
    CHECK(msg.find("batch") != std::string::npos);
  }
}

TEST_CASE("learning rate never increases during a run") {
  auto dataset = tiny_dataset(2, 16, 51);
  auto model = build_model<float>(tiny_model_config(16, 4));
  TrainConfig cfg = quick_config(8, 3);
  cfg.plateau_patience = 2;  // force decays
  Optimizer<float> opt(cfg.optimizer, cfg.adam);
  LRScheduleState sched;
  sched.lr = cfg.lr0;
  auto history = train(model, dataset, dataset, cfg, opt, sched);
  for (std::size_t i = 1; i < history.size(); ++i) CHECK(history[i].lr <= history[i - 1].lr);
}
