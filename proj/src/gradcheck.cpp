#include "lobeseg/gradcheck.hpp"

#include <cmath>

#include "lobeseg/losses.hpp"
#include "lobeseg/ops.hpp"

namespace lobeseg {

double finite_diff_max_rel_err(const std::function<Tensor<double>()>& f,
                               const std::vector<Tensor<double>>& leaves, double h) {
  for (auto leaf : leaves) leaf.zero_grad();
  Tensor<double> loss = f();
  backward(loss);

  std::vector<std::vector<double>> analytic;
  for (const auto& leaf : leaves) {
    if (!leaf.has_grad())
      throw ContractError("finite_diff: leaf received no gradient from backward");
    analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
  }

  double worst = 0;
  NoGradGuard no_grad;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor<double> leaf = leaves[li];
    auto vals = leaf.mutable_data();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double keep = vals[i];
      vals[i] = keep + h;
      double up = f().item();
      vals[i] = keep - h;
      double down = f().item();
      vals[i] = keep;
      double numeric = (up - down) / (2.0 * h);
      double a = analytic[li][i];
      double rel = std::fabs(a - numeric) / std::max(1e-8, std::fabs(a));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

namespace {

Tensor<double> rand_tensor(Shape shape, Pcg32& rng, bool requires_grad, double scale = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.next_normal() * scale;
  return Tensor<double>::from_vector(std::move(shape), std::move(v), requires_grad);
}

// Fixed random projection making any tensor output a scalar: sum(out * R).
Tensor<double> project(const Tensor<double>& out, const Tensor<double>& r) {
  return sum_all(mul(out, r));
}

struct Case {
  const char* name;
  // builds leaves and a functional over them for one seed
  std::function<double(std::uint64_t)> run;
};

double check(const std::function<Tensor<double>()>& f,
             const std::vector<Tensor<double>>& leaves) {
  return finite_diff_max_rel_err(f, leaves);
}

}  // namespace

std::vector<GradCheckReport> run_gradcheck_suite(int seeds) {
  const Shape kVol{1, 3, 2, 3, 2};
  std::vector<Case> cases;

  cases.push_back({"add", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 1));
    auto a = rand_tensor(kVol, rng, true), b = rand_tensor(kVol, rng, true);
    auto r = rand_tensor(kVol, rng, false);
    return check([&] { return project(add(a, b), r); }, {a, b});
  }});
  cases.push_back({"sub", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 2));
    auto a = rand_tensor(kVol, rng, true), b = rand_tensor(kVol, rng, true);
    auto r = rand_tensor(kVol, rng, false);
    return check([&] { return project(sub(a, b), r); }, {a, b});
  }});
  cases.push_back({"mul", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 3));
    auto a = rand_tensor(kVol, rng, true), b = rand_tensor(kVol, rng, true);
    auto r = rand_tensor(kVol, rng, false);
    return check([&] { return project(mul(a, b), r); }, {a, b});
  }});
  cases.push_back({"div", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 4));
    auto a = rand_tensor(kVol, rng, true);
    auto braw = rand_tensor(kVol, rng, false);
    std::vector<double> bv(braw.data().begin(), braw.data().end());
    for (auto& x : bv) x = (x >= 0 ? 0.5 : -0.5) + x;  // keep away from zero
    auto b = Tensor<double>::from_vector(kVol, std::move(bv), true);
    auto r = rand_tensor(kVol, rng, false);
    return check([&] { return project(div(a, b), r); }, {a, b});
  }});
  cases.push_back({"add_scalar", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 5));
    auto a = rand_tensor(kVol, rng, true);
    auto r = rand_tensor(kVol, rng, false);
    return check([&] { return project(add_scalar(a, 0.37), r); }, {a});
  }});
  cases.push_back({"mul_scalar", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 6));
    auto a = rand_tensor(kVol, rng, true);
    auto r = rand_tensor(kVol, rng, false);
    return check([&] { return project(mul_scalar(a, -1.7), r); }, {a});
  }});
  cases.push_back({"sum_all", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 7));
    auto a = rand_tensor(kVol, rng, true);
    return check([&] { return mul_scalar(sum_all(a), 1.3); }, {a});
  }});
  cases.push_back({"mean_all", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 8));
    auto a = rand_tensor(kVol, rng, true);
    return check([&] { return mul_scalar(mean_all(a), -2.1); }, {a});
  }});
  cases.push_back({"sum_per_channel", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 9));
    auto a = rand_tensor(kVol, rng, true);
    auto r = rand_tensor({3}, rng, false);
    return check([&] { return project(sum_per_channel(a), r); }, {a});
  }});
  cases.push_back({"concat_channels", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 10));
    auto a = rand_tensor({1, 2, 2, 2, 2}, rng, true);
    auto b = rand_tensor({1, 3, 2, 2, 2}, rng, true);
    auto r = rand_tensor({1, 5, 2, 2, 2}, rng, false);
    return check([&] { return project(concat_channels(a, b), r); }, {a, b});
  }});
  cases.push_back({"slice_range", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 11));
    auto a = rand_tensor({7}, rng, true);
    auto r = rand_tensor({4}, rng, false);
    return check([&] { return project(slice_range(a, 2, 6), r); }, {a});
  }});
  cases.push_back({"sigmoid", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 12));
    auto a = rand_tensor(kVol, rng, true, 2.0);
    auto r = rand_tensor(kVol, rng, false);
    return check([&] { return project(sigmoid(a), r); }, {a});
  }});
  cases.push_back({"prelu", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 13));
    auto a = rand_tensor(kVol, rng, true);
    auto slopes = rand_tensor({3}, rng, true, 0.3);
    auto r = rand_tensor(kVol, rng, false);
    return check([&] { return project(prelu(a, slopes), r); }, {a, slopes});
  }});
  cases.push_back({"softmax_channels", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 14));
    auto a = rand_tensor(kVol, rng, true, 2.0);
    auto r = rand_tensor(kVol, rng, false);
    return check([&] { return project(softmax_channels(a), r); }, {a});
  }});
  cases.push_back({"batch_norm", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 15));
    auto a = rand_tensor({2, 3, 2, 2, 2}, rng, true);
    auto gamma = rand_tensor({3}, rng, true, 0.5);
    auto beta = rand_tensor({3}, rng, true, 0.5);
    auto r = rand_tensor({2, 3, 2, 2, 2}, rng, false);
    return check(
        [&] {
          BatchNormState<double> state{Tensor<double>::zeros({3}),
                                       Tensor<double>::filled({3}, 1.0)};
          return project(batch_norm(a, gamma, beta, state, Phase::train), r);
        },
        {a, gamma, beta});
  }});
  cases.push_back({"dropout", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 16));
    auto a = rand_tensor(kVol, rng, true);
    auto r = rand_tensor(kVol, rng, false);
    std::uint64_t mask_seed = seed_mix(s, 17);
    return check([&] { return project(dropout(a, 0.3, Phase::train, mask_seed), r); }, {a});
  }});
  cases.push_back({"mul_gate", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 18));
    auto a = rand_tensor(kVol, rng, true);
    auto g = rand_tensor({1, 1, 2, 3, 2}, rng, true);
    auto r = rand_tensor(kVol, rng, false);
    return check([&] { return project(mul_gate(a, g), r); }, {a, g});
  }});
  cases.push_back({"conv3d_s1", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 19));
    auto x = rand_tensor({1, 2, 4, 4, 4}, rng, true);
    auto w = rand_tensor({3, 2, 3, 3, 3}, rng, true, 0.5);
    auto b = rand_tensor({3}, rng, true, 0.2);
    auto r = rand_tensor({1, 3, 4, 4, 4}, rng, false);
    return check([&] { return project(conv3d(x, w, b, 1, 1), r); }, {x, w, b});
  }});
  cases.push_back({"conv3d_s2", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 20));
    auto x = rand_tensor({1, 2, 4, 4, 4}, rng, true);
    auto w = rand_tensor({3, 2, 2, 2, 2}, rng, true, 0.5);
    auto b = rand_tensor({3}, rng, true, 0.2);
    auto r = rand_tensor({1, 3, 2, 2, 2}, rng, false);
    return check([&] { return project(conv3d(x, w, b, 2, 0), r); }, {x, w, b});
  }});
  cases.push_back({"conv_transpose3d_s2", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 21));
    auto x = rand_tensor({1, 3, 2, 2, 2}, rng, true);
    auto w = rand_tensor({3, 2, 2, 2, 2}, rng, true, 0.5);
    auto b = rand_tensor({2}, rng, true, 0.2);
    auto r = rand_tensor({1, 2, 4, 4, 4}, rng, false);
    return check([&] { return project(conv_transpose3d(x, w, b, 2, 0), r); }, {x, w, b});
  }});
  cases.push_back({"conv_transpose3d_s1", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 22));
    auto x = rand_tensor({1, 3, 3, 3, 3}, rng, true);
    auto w = rand_tensor({3, 2, 3, 3, 3}, rng, true, 0.5);
    auto b = rand_tensor({2}, rng, true, 0.2);
    auto r = rand_tensor({1, 2, 5, 5, 5}, rng, false);
    return check([&] { return project(conv_transpose3d(x, w, b, 1, 0), r); }, {x, w, b});
  }});
  cases.push_back({"conv_prelu_softmax_dice", [&](std::uint64_t s) {
    Pcg32 rng(seed_mix(s, 23));
    auto x = rand_tensor({1, 2, 4, 4, 4}, rng, true);
    auto w = rand_tensor({2, 2, 3, 3, 3}, rng, true, 0.5);
    auto b = rand_tensor({2}, rng, true, 0.2);
    auto slopes = rand_tensor({2}, rng, true, 0.3);
    // random hard one-hot ground truth
    std::vector<double> oh(2 * 64, 0.0);
    for (int i = 0; i < 64; ++i) {
      int c = static_cast<int>(rng.below(2));
      oh[static_cast<std::size_t>(c * 64 + i)] = 1.0;
    }
    auto onehot = Tensor<double>::from_vector({1, 2, 4, 4, 4}, std::move(oh), false);
    DiceConfig cfg;
    return check(
        [&] {
          auto probs = softmax_channels(prelu(conv3d(x, w, b, 1, 1), slopes));
          return dice_loss(probs, onehot, cfg);
        },
        {x, w, b, slopes});
  }});

  std::vector<GradCheckReport> reports;
  for (auto& c : cases) {
    GradCheckReport rep;
    rep.op = c.name;
    for (int s = 0; s < seeds; ++s)
      rep.max_rel_err = std::max(rep.max_rel_err, c.run(static_cast<std::uint64_t>(s) + 1));
    reports.push_back(std::move(rep));
  }
  return reports;
}

}  // namespace lobeseg
