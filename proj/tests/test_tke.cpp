#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "fedtraj/tke.hpp"

using namespace fedtraj;
using namespace fedtraj::tke;
using tasks::TaskKind;

namespace {

tpa::Normalization test_norm() {
  tpa::Normalization n;
  n.bbox = geo::BBox{-1, -1, 1, 1};
  n.t_min = 0;
  n.t_max = 1000;
  return n;
}

// brute-force oracle: enumerate every ordered draw sequence of length n_m
// and accumulate each tuple's probability under sequential sampling without
// replacement
double enumeration_oracle(const std::vector<double>& r, int target, int n_m) {
  const int n = static_cast<int>(r.size());
  double included = 0.0;
  std::vector<int> tuple;
  std::vector<std::uint8_t> used(r.size(), 0);

  auto dfs = [&](auto&& self, int depth, double prob, double used_mass) -> void {
    if (depth == n_m) {
      for (int id : tuple) {
        if (id == target) {
          included += prob;
          return;
        }
      }
      return;
    }
    for (int j = 0; j < n; ++j) {
      if (used[static_cast<std::size_t>(j)]) continue;
      const double denom = 1.0 - used_mass;
      if (denom <= 0.0 || r[static_cast<std::size_t>(j)] <= 0.0) continue;
      used[static_cast<std::size_t>(j)] = 1;
      tuple.push_back(j);
      self(self, depth + 1, prob * r[static_cast<std::size_t>(j)] / denom,
           used_mass + r[static_cast<std::size_t>(j)]);
      tuple.pop_back();
      used[static_cast<std::size_t>(j)] = 0;
    }
  };
  dfs(dfs, 0, 1.0, 0.0);
  return included;
}

std::vector<double> random_ratios(std::size_t n, Rng& rng) {
  std::vector<double> r(n);
  double total = 0.0;
  for (double& v : r) {
    v = rng.uniform(0.05, 1.0);
    total += v;
  }
  for (double& v : r) v /= total;
  return r;
}

}  // namespace

TEST_CASE("output formats follow the task catalogue") {
  CHECK(format_for(TaskKind::AD) == OutputFormat::classification);
  CHECK(format_for(TaskKind::TUL) == OutputFormat::classification);
  CHECK(format_for(TaskKind::TMI) == OutputFormat::classification);
  CHECK(format_for(TaskKind::SPD) == OutputFormat::points);
  for (auto k : {TaskKind::TI, TaskKind::NF, TaskKind::TSim, TaskKind::TSeg, TaskKind::MM,
                 TaskKind::TR})
    CHECK(format_for(k) == OutputFormat::trajectory);
}

TEST_CASE("build_prompt rejects mismatched formats and ambiguous data") {
  std::vector<geo::Pt> pts{{0.1, 0.1, 10}};
  try {
    build_prompt(TaskKind::NF, &pts, nullptr, {}, OutputFormat::classification);
    FAIL("expected FormatTaskMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Err::FormatTaskMismatch);
  }
  try {
    build_prompt(TaskKind::NF, nullptr, nullptr, {}, OutputFormat::trajectory);
    FAIL("expected FormatTaskMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Err::FormatTaskMismatch);
  }
}

TEST_CASE("featurization encodes the weather block and is deterministic") {
  const auto norm = test_norm();
  std::vector<geo::Pt> pts;
  for (int i = 0; i < 5; ++i) pts.push_back({0.1 * i, 0.05 * i, 10 * i});

  PromptInfo info;
  info.weather = WeatherInfo{Weather::sunny, 15.0};
  const auto prompt = build_prompt(TaskKind::NF, &pts, nullptr, info, OutputFormat::trajectory);
  const auto f = featurize_prompt(prompt, norm);
  REQUIRE(f.size() == kPromptFeatureLen);
  // task one-hot: NF is T-3 (index 2)
  CHECK(f[2] == 1.0);
  // weather block: sunny one-hot and temperature 15/40
  CHECK(f[23] == 1.0);
  CHECK(f[24] == 0.0);
  CHECK(f[27] == doctest::Approx(15.0 / 40.0));
  // format one-hot: trajectory
  CHECK(f[32] == 1.0);

  CHECK(featurize_prompt(prompt, norm) == f);
}

TEST_CASE("absent information leaves its feature block at zero") {
  const auto norm = test_norm();
  std::vector<geo::Pt> pts{{0.0, 0.0, 0}, {0.2, 0.1, 10}};
  const auto prompt = build_prompt(TaskKind::TI, &pts, nullptr, {}, OutputFormat::trajectory);
  const auto f = featurize_prompt(prompt, norm);
  for (std::size_t i = 23; i < 30; ++i) CHECK(f[i] == 0.0);
}

TEST_CASE("embedding prompts carry no raw-coordinate statistics") {
  const auto norm = test_norm();
  std::vector<tpa::Embedding> embs(3);
  const auto prompt = build_prompt(TaskKind::TR, nullptr, &embs, {}, OutputFormat::trajectory);
  const auto f = featurize_prompt(prompt, norm);
  for (std::size_t i = 11; i < 23; ++i) CHECK(f[i] == 0.0);
  CHECK(f[10] > 0.0);  // count survives
}

TEST_CASE("change rate matches its defining cases") {
  std::vector<double> v{1.0, -2.0, 2.0};
  CHECK(change_rate(v, v) == 0.0);
  std::vector<double> doubled{2.0, -4.0, 4.0};
  CHECK(change_rate(doubled, v) == doctest::Approx(1.0).epsilon(1e-9));
  std::vector<double> zeros(3, 0.0);
  const double from_zero = change_rate(v, zeros);
  CHECK(std::isfinite(from_zero));
  CHECK(from_zero > 0.0);
  try {
    change_rate(v, std::vector<double>{1.0});
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Err::ShapeMismatch);
  }
}

TEST_CASE("ratios normalize change rates, uniform on all-zero") {
  const auto r = ratios(std::vector<double>{2.0, 3.0, 5.0});
  CHECK(r[0] == doctest::Approx(0.2));
  CHECK(r[1] == doctest::Approx(0.3));
  CHECK(r[2] == doctest::Approx(0.5));
  CHECK(std::accumulate(r.begin(), r.end(), 0.0) == doctest::Approx(1.0));

  const auto uniform = ratios(std::vector<double>{1.0, 1.0, 1.0, 1.0});
  for (double v : uniform) CHECK(v == doctest::Approx(0.25));

  const auto zero = ratios(std::vector<double>{0.0, 0.0});
  CHECK(zero[0] == doctest::Approx(0.5));
}

TEST_CASE("selection probability: single draw, full draw, frozen example") {
  const std::vector<double> r{0.2, 0.3, 0.5};
  // n_m = 1: the probability is the ratio itself
  CHECK(selection_probability(r, 0, 1) == doctest::Approx(0.2).epsilon(1e-12));
  // n_m = n: every layer trains
  for (int i = 0; i < 3; ++i) CHECK(selection_probability(r, i, 3) == 1.0);
  // the worked n=3, n_m=2 case
  CHECK(selection_probability(r, 0, 2) == doctest::Approx(0.2 + 0.3 * 0.2 / 0.7 + 0.5 * 0.2 / 0.5)
                                              .epsilon(1e-12));
  CHECK(selection_probability(r, 1, 2) == doctest::Approx(0.675).epsilon(1e-12));
  CHECK(selection_probability(r, 2, 2) ==
        doctest::Approx(0.8392857142857143).epsilon(1e-12));
  const double total = selection_probability(r, 0, 2) + selection_probability(r, 1, 2) +
                       selection_probability(r, 2, 2);
  CHECK(total == doctest::Approx(2.0).epsilon(1e-12));
  try {
    selection_probability(r, 0, 4);
    FAIL("expected InvalidNm");
  } catch (const Error& e) {
    CHECK(e.code() == Err::InvalidNm);
  }
}

TEST_CASE("selection probability equals the enumeration oracle (property)") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = static_cast<std::size_t>(rng.uniform_int(2, 6));
    const int n_m = static_cast<int>(rng.uniform_int(1, static_cast<std::int64_t>(n)));
    const auto r = random_ratios(n, rng);
    double total = 0.0;
    for (int i = 0; i < static_cast<int>(n); ++i) {
      const double lib = selection_probability(r, i, n_m);
      const double oracle = enumeration_oracle(r, i, n_m);
      CHECK(lib == doctest::Approx(oracle).epsilon(1e-10));
      CHECK(lib >= 0.0);
      CHECK(lib <= 1.0 + 1e-12);
      total += lib;
    }
    // the inclusion probabilities of an n_m-subset sum to n_m
    CHECK(total == doctest::Approx(static_cast<double>(n_m)).epsilon(1e-9));
  }
}

TEST_CASE("selection probability is monotone in the layer's own ratio") {
  // raise layer 0's share while the others keep their relative proportions
  double prev = 0.0;
  for (double own : {0.05, 0.15, 0.3, 0.5, 0.7}) {
    const double rest = 1.0 - own;
    const std::vector<double> r{own, rest * 0.4, rest * 0.6};
    const double p = selection_probability(r, 0, 2);
    CHECK(p > prev);
    prev = p;
  }
}

TEST_CASE("select_layers: degenerate weights, determinism, plan shape") {
  const std::vector<double> one_hot{1.0, 0.0, 0.0};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto plan = select_layers(one_hot, 1, seed);
    REQUIRE(plan.selected.size() == 1);
    CHECK(plan.selected[0] == 0);
  }
  const std::vector<double> r{0.25, 0.25, 0.25, 0.25};
  const auto a = select_layers(r, 2, 42, 7);
  const auto b = select_layers(r, 2, 42, 7);
  CHECK(a.selected == b.selected);
  CHECK(a.n_m == 2);
  CHECK(a.round == 7);
  CHECK(a.selected[0] != a.selected[1]);
  REQUIRE(a.probabilities.size() == 4);
  const double total = std::accumulate(a.probabilities.begin(), a.probabilities.end(), 0.0);
  CHECK(total == doctest::Approx(2.0).epsilon(1e-9));
}

TEST_CASE("empirical selection frequency matches the closed form (Monte Carlo)") {
  const std::vector<double> r{0.2, 0.3, 0.5};
  const int trials = 200000;
  std::vector<std::size_t> hits(3, 0);
  for (int trial = 0; trial < trials; ++trial) {
    const auto plan = select_layers(r, 2, hash_mix(4242, static_cast<std::uint64_t>(trial)), 0);
    for (int id : plan.selected) ++hits[static_cast<std::size_t>(id)];
  }
  for (int i = 0; i < 3; ++i) {
    const double freq = static_cast<double>(hits[static_cast<std::size_t>(i)]) / trials;
    CHECK(freq == doctest::Approx(selection_probability(r, i, 2)).epsilon(0.01));
    CHECK(std::abs(freq - selection_probability(r, i, 2)) <= 0.005);
  }
}

TEST_CASE("weighted aggregation follows the update rule exactly") {
  // |C|=3, |C'|=1, update 2.0 with n=10, previous 1.0 -> 5/3
  const std::vector<LoraUpdate> one{{std::vector<double>{2.0}, 10.0}};
  const std::vector<double> prev{1.0};
  const auto out = aggregate_lora(one, prev, 3);
  CHECK(out[0] == doctest::Approx(5.0 / 3.0).epsilon(1e-15));

  // full participation returns the previous value exactly
  const std::vector<LoraUpdate> all{{std::vector<double>{2.0}, 5.0},
                                    {std::vector<double>{4.0}, 5.0},
                                    {std::vector<double>{9.0}, 5.0}};
  CHECK(aggregate_lora(all, prev, 3) == prev);

  // fixed point: identical values everywhere stay put
  const std::vector<LoraUpdate> same{{std::vector<double>{7.0}, 3.0},
                                     {std::vector<double>{7.0}, 9.0}};
  const std::vector<double> prev7{7.0};
  CHECK(aggregate_lora(same, prev7, 5)[0] == doctest::Approx(7.0).epsilon(1e-15));

  try {
    aggregate_lora({}, prev, 3);
    FAIL("expected NoUpdates");
  } catch (const Error& e) {
    CHECK(e.code() == Err::NoUpdates);
  }
}

TEST_CASE("fedavg comparison mode averages by sample count") {
  const std::vector<LoraUpdate> two{{std::vector<double>{2.0}, 1.0},
                                    {std::vector<double>{6.0}, 3.0}};
  const std::vector<double> prev{100.0};
  const auto out = aggregate_fedavg(two, prev, 4);
  CHECK(out[0] == doctest::Approx(5.0));  // (2*1 + 6*3) / 4
}

TEST_CASE("kl losses share the value and differ in gradient direction") {
  ad::Graph g;
  const auto slm_logits = g.leaf(ad::Tensor::row({0.5, -0.2, 0.1}), true);
  const auto llm_logits = g.leaf(ad::Tensor::row({-0.3, 0.4, 0.2}), true);
  const auto slm_probs = g.softmax(slm_logits);
  const auto llm_probs = g.softmax(llm_logits);

  const auto rev = reverse_kl_loss(g, slm_probs, llm_probs);
  g.backward(rev);
  // gradients flow into the SLM only
  CHECK(g.grad(slm_logits).size() == 3);
  bool slm_has_grad = false;
  for (double v : g.grad(slm_logits).data) slm_has_grad |= v != 0.0;
  CHECK(slm_has_grad);
  CHECK(g.grad(llm_logits).size() == 0);

  ad::Graph g2;
  const auto s2 = g2.softmax(g2.leaf(ad::Tensor::row({0.5, -0.2, 0.1}), true));
  const auto l2_logits = g2.leaf(ad::Tensor::row({-0.3, 0.4, 0.2}), true);
  const auto l2 = g2.softmax(l2_logits);
  const auto fwd = forward_kl_loss(g2, l2, s2);
  // same value: both compute KL(P_slm || P_llm)
  CHECK(g2.value(fwd).data[0] == doctest::Approx(g.value(rev).data[0]).epsilon(1e-12));
  g2.backward(fwd);
  bool llm_has_grad = false;
  for (double v : g2.grad(l2_logits).data) llm_has_grad |= v != 0.0;
  CHECK(llm_has_grad);

  // identical distributions: zero loss, zero gradient on the live side
  ad::Graph g3;
  const auto logits = g3.leaf(ad::Tensor::row({0.1, 0.2, 0.3}), true);
  const auto p = g3.softmax(logits);
  const auto q = g3.softmax(g3.constant(ad::Tensor::row({0.1, 0.2, 0.3})));
  const auto loss = reverse_kl_loss(g3, p, q);
  CHECK(g3.value(loss).data[0] == doctest::Approx(0.0).epsilon(1e-15));
  g3.backward(loss);
  for (double v : g3.grad(logits).data) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("the hand-computed kl value carries through the loss wrappers") {
  ad::Graph g;
  const auto p = g.leaf(ad::Tensor::row({1.0, 0.0}), false);
  const auto q = g.leaf(ad::Tensor::row({0.5, 0.5}), false);
  CHECK(g.value(reverse_kl_loss(g, p, q)).data[0] ==
        doctest::Approx(0.6931471805599453).epsilon(1e-12));
}
