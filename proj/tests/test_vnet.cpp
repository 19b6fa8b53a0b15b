#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "lobeseg/losses.hpp"
#include "lobeseg/vnet.hpp"

using namespace lobeseg;

namespace {

// Independent layer-by-layer parameter enumeration.
std::int64_t expected_param_count(const ModelConfig& c) {
  auto conv = [](std::int64_t cin, std::int64_t cout, std::int64_t k) {
    return cout * cin * k * k * k + cout;
  };
  auto bn = [&](std::int64_t ch) { return c.batch_norm ? 2 * ch : 0; };
  auto act = [](std::int64_t ch) { return ch; };
  auto block = [&](std::int64_t cin, std::int64_t ch) {
    return conv(cin, ch, 3) + bn(ch) + act(ch) + conv(ch, ch, 3) + bn(ch) + act(ch);
  };
  std::int64_t base = c.base_channels, total = 0;
  total += conv(1, base, 3) + bn(base) + act(base);  // stem
  for (int i = 0; i < c.depth; ++i) {
    std::int64_t ch = base << i;
    total += block(ch, ch);
    if (i + 1 < c.depth) total += conv(ch, ch * 2, 2) + bn(ch * 2) + act(ch * 2);
  }
  for (int i = c.depth - 2; i >= 0; --i) {
    std::int64_t ch = base << i;
    total += conv(ch * 2, ch, 2) + bn(ch) + act(ch);  // transposed conv, same element count
    if (c.attention) {
      std::int64_t inter = std::max<std::int64_t>(1, ch / 2);
      total += conv(ch, inter, 1) + conv(ch, inter, 1) + conv(inter, 1, 1);
    }
    total += block(2 * ch, ch);
  }
  total += conv(base, c.main_classes, 1);
  if (c.aux_enabled) total += conv(base, c.aux_classes, 1);
  return total;
}

Tensor<float> random_batch(std::int64_t s, std::uint64_t seed) {
  Pcg32 rng(seed);
  std::vector<float> v(static_cast<std::size_t>(s * s * s));
  for (auto& x : v) x = static_cast<float>(rng.next_normal());
  return Tensor<float>::from_vector({1, 1, s, s, s}, std::move(v));
}

Tensor<float> random_onehot(std::int64_t c, std::int64_t s, std::uint64_t seed) {
  Pcg32 rng(seed);
  std::int64_t sp = s * s * s;
  std::vector<float> v(static_cast<std::size_t>(c * sp), 0.0f);
  for (std::int64_t i = 0; i < sp; ++i)
    v[rng.below(static_cast<std::uint32_t>(c)) * sp + i] = 1.0f;
  return Tensor<float>::from_vector({1, c, s, s, s}, std::move(v));
}

}  // namespace

TEST_CASE("forward output shapes at desk scale") {
  ModelConfig cfg;
  cfg.input_size = 32;
  cfg.depth = 3;
  cfg.base_channels = 4;
  cfg.main_classes = 6;
  cfg.aux_classes = 3;
  cfg.seed = 5;
  auto model = build_model<float>(cfg);
  NoGradGuard ng;
  auto out = forward(model, random_batch(32, 1), {});
  CHECK(out.main_probs.shape() == Shape{1, 6, 32, 32, 32});
  CHECK(out.aux_probs.shape() == Shape{1, 3, 32, 32, 32});
  CHECK(out.bottleneck_shape == Shape{1, 16, 8, 8, 8});
}

TEST_CASE("same seed and config give bitwise-identical parameters") {
  ModelConfig cfg;
  cfg.input_size = 16;
  cfg.depth = 2;
  cfg.base_channels = 4;
  cfg.seed = 77;
  auto a = build_model<float>(cfg);
  auto b = build_model<float>(cfg);
  REQUIRE(a.params().size() == b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CHECK(a.params()[i].name == b.params()[i].name);
    auto da = a.params()[i].tensor.data();
    auto db = b.params()[i].tensor.data();
    REQUIRE(da.size() == db.size());
    for (std::size_t k = 0; k < da.size(); ++k) CHECK(da[k] == db[k]);
  }
}

TEST_CASE("parameter count matches the independent enumeration") {
  ModelConfig cfg;
  cfg.input_size = 16;
  cfg.depth = 2;
  cfg.base_channels = 2;
  cfg.main_classes = 2;
  cfg.aux_classes = 2;
  auto model = build_model<float>(cfg);
  CHECK(model.parameter_count() == expected_param_count(cfg));
  CHECK(model.parameter_count() == 1694);  // hand-derived for this config

  // a couple more configurations, including attention and no-norm variants
  for (auto mutate : {0, 1, 2, 3}) {
    ModelConfig c2;
    c2.input_size = 32;
    c2.depth = 3;
    c2.base_channels = 3;
    if (mutate == 1) c2.attention = true;
    if (mutate == 2) c2.batch_norm = false;
    if (mutate == 3) c2.aux_enabled = false;
    auto m2 = build_model<float>(c2);
    CHECK(m2.parameter_count() == expected_param_count(c2));
  }

  // every parameter reachable by exactly one name
  std::set<std::string> names;
  for (const auto& p : model.params()) CHECK(names.insert(p.name).second);
  for (const auto& p : model.buffers()) CHECK(names.insert(p.name).second);
}

TEST_CASE("config errors") {
  ModelConfig cfg;
  cfg.input_size = 30;  // not divisible by 4
  cfg.depth = 3;
  try {
    build_model<float>(cfg);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    CHECK(msg.find("30") != std::string::npos);
    CHECK(msg.find("4") != std::string::npos);
  }

  ModelConfig bad;
  bad.main_classes = 1;
  CHECK_THROWS_AS(build_model<float>(bad), ConfigError);

  ModelConfig wrong_batch;
  wrong_batch.input_size = 16;
  wrong_batch.depth = 2;
  wrong_batch.base_channels = 2;
  auto model = build_model<float>(wrong_batch);
  CHECK_THROWS_AS(forward(model, random_batch(32, 1), {}), DimensionError);
}

TEST_CASE("probability heads: sums, eval determinism, train stochasticity") {
  ModelConfig cfg;
  cfg.input_size = 16;
  cfg.depth = 2;
  cfg.base_channels = 4;
  cfg.seed = 9;
  auto model = build_model<float>(cfg);
  auto batch = random_batch(16, 4);
  NoGradGuard ng;

  auto out = forward(model, batch, {});
  std::int64_t sp = 16 * 16 * 16;
  for (std::int64_t i = 0; i < sp; i += 97) {
    float ms = 0, as = 0;
    for (int ch = 0; ch < 6; ++ch) ms += out.main_probs.data()[ch * sp + i];
    for (int ch = 0; ch < 3; ++ch) as += out.aux_probs.data()[ch * sp + i];
    CHECK(std::fabs(ms - 1.0f) < 1e-5f);
    CHECK(std::fabs(as - 1.0f) < 1e-5f);
  }

  auto out2 = forward(model, batch, {});
  for (std::int64_t i = 0; i < out.main_probs.numel(); ++i)
    CHECK(out.main_probs.data()[i] == out2.main_probs.data()[i]);

  ForwardOptions t1{Phase::train, 1, false};
  ForwardOptions t2{Phase::train, 2, false};
  auto o1 = forward(model, batch, t1);
  auto o2 = forward(model, batch, t2);
  bool any_diff = false;
  for (std::int64_t i = 0; i < o1.main_probs.numel(); ++i)
    any_diff = any_diff || o1.main_probs.data()[i] != o2.main_probs.data()[i];
  CHECK(any_diff);  // different dropout masks
}

TEST_CASE("attention gate bounds and the open-gate hook") {
  Pcg32 rng(3);
  auto mkconv = [&](std::int64_t cin, std::int64_t cout) {
    std::vector<float> w(static_cast<std::size_t>(cout * cin));
    for (auto& x : w) x = static_cast<float>(rng.next_normal() * 0.5);
    return Tensor<float>::from_vector({cout, cin, 1, 1, 1}, std::move(w));
  };
  AttentionGateParams<float> g{mkconv(4, 2), Tensor<float>::zeros({2}),
                               mkconv(4, 2), Tensor<float>::zeros({2}),
                               mkconv(2, 1), Tensor<float>::zeros({1})};
  std::vector<float> sv(4 * 27), gv(4 * 27);
  for (auto& x : sv) x = static_cast<float>(rng.next_normal());
  for (auto& x : gv) x = static_cast<float>(rng.next_normal());
  auto skip = Tensor<float>::from_vector({1, 4, 3, 3, 3}, sv);
  auto gating = Tensor<float>::from_vector({1, 4, 3, 3, 3}, gv);

  auto gated = attention_gate(g, skip, gating);
  for (std::int64_t i = 0; i < gated.numel(); ++i) {
    // alpha in [0,1] implies |out| <= |skip| with matching sign
    CHECK(std::fabs(gated.data()[i]) <= std::fabs(skip.data()[i]) + 1e-6f);
    CHECK(gated.data()[i] * skip.data()[i] >= -1e-12f);
  }

  auto open = attention_gate(g, skip, gating, /*force_open=*/true);
  for (std::int64_t i = 0; i < open.numel(); ++i) CHECK(open.data()[i] == skip.data()[i]);
}

TEST_CASE("disabling attention reproduces the plain-skip model exactly") {
  ModelConfig with;
  with.input_size = 16;
  with.depth = 2;
  with.base_channels = 4;
  with.attention = true;
  with.seed = 123;
  ModelConfig without = with;
  without.attention = false;

  auto ma = build_model<float>(with);
  auto mb = build_model<float>(without);
  auto batch = random_batch(16, 8);
  NoGradGuard ng;
  ForwardOptions open;
  open.force_attention_open = true;
  auto oa = forward(ma, batch, open);
  auto ob = forward(mb, batch, {});
  for (std::int64_t i = 0; i < oa.main_probs.numel(); ++i)
    CHECK(oa.main_probs.data()[i] == ob.main_probs.data()[i]);
}

TEST_CASE("bottleneck edge halves when depth grows by one") {
  for (int depth : {2, 3}) {
    ModelConfig cfg;
    cfg.input_size = 32;
    cfg.depth = depth;
    cfg.base_channels = 2;
    cfg.seed = 4;
    auto model = build_model<float>(cfg);
    NoGradGuard ng;
    auto out = forward(model, random_batch(32, 2), {});
    CHECK(out.bottleneck_shape[2] == 32 >> (depth - 1));
  }
}

TEST_CASE("every parameter receives gradient; zero aux weight cuts the aux path") {
  ModelConfig cfg;
  cfg.input_size = 16;
  cfg.depth = 3;
  cfg.base_channels = 2;
  cfg.seed = 31;
  auto model = build_model<float>(cfg);
  auto batch = random_batch(16, 5);
  auto main_gt = random_onehot(6, 16, 6);
  auto aux_gt = random_onehot(3, 16, 7);

  auto run = [&](LossWeights w) {
    model.zero_grads();
    ForwardOptions train{Phase::train, 11, false};
    auto out = forward(model, batch, train);
    auto loss = combined_loss(dice_loss(out.main_probs, main_gt, DiceConfig{}),
                              dice_loss(out.aux_probs, aux_gt, DiceConfig{}), w);
    backward(loss);
  };

  run({0.5, 0.5});
  for (auto& p : model.params()) {
    REQUIRE(p.tensor.has_grad());
    double mag = 0;
    for (float g : p.tensor.grad()) mag += std::fabs(g);
    INFO(p.name);
    CHECK(mag > 0.0);
  }

  run({0.5, 0.0});
  for (auto& p : model.params()) {
    if (p.name.rfind("head.aux", 0) != 0) continue;
    for (float g : p.tensor.grad()) CHECK(g == 0.0f);
  }
}
