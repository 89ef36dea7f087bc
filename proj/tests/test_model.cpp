#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fedtraj/model.hpp"

using namespace fedtraj;
using namespace fedtraj::lm;
using ad::Tensor;

namespace {

ModelConfig llm_config() {
  ModelConfig cfg;
  cfg.n_layers = 8;
  cfg.width = 64;
  cfg.vocab_size = 20;
  cfg.lora_rank = 4;
  cfg.adapter_depth = 2;
  cfg.in_dim = 12;
  return cfg;
}

ModelConfig slm_config() {
  ModelConfig cfg = llm_config();
  cfg.n_layers = 4;
  cfg.in_dim = 9;
  return cfg;
}

Tensor random_features(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::zeros({rows, cols});
  for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data == b.data;
}

}  // namespace

TEST_CASE("builds are deterministic and shaped by the config") {
  const auto a = build_llm(llm_config(), 7);
  const auto b = build_llm(llm_config(), 7);
  REQUIRE(a.layers.size() == 8);
  CHECK(a.layers[0].w.shape == std::vector<std::size_t>{12, 64});
  CHECK(a.layers[7].w.shape == std::vector<std::size_t>{64, 20});
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    CHECK(tensors_equal(a.layers[i].w, b.layers[i].w));
    CHECK(tensors_equal(a.layers[i].lora_down, b.layers[i].lora_down));
    // lora_up starts at zero so training starts at the base model
    for (double v : a.layers[i].lora_up.data) CHECK(v == 0.0);
  }
}

TEST_CASE("the SLM shares the adapter and is smaller") {
  const auto llm = build_llm(llm_config(), 7);
  const auto slm = build_slm(llm, slm_config(), 9);
  REQUIRE(slm.layers.size() == 4);
  CHECK(slm.cfg.n_layers < llm.cfg.n_layers);
  // last k layers equal the LLM's elementwise
  CHECK(tensors_equal(slm.layers[2].w, llm.layers[6].w));
  CHECK(tensors_equal(slm.layers[3].w, llm.layers[7].w));
  CHECK(tensors_equal(slm.layers[3].b, llm.layers[7].b));
  CHECK(tensors_equal(slm.layers[2].lora_down, llm.layers[6].lora_down));

  auto bad = slm_config();
  bad.width = 32;
  try {
    build_slm(llm, bad, 1);
    FAIL("expected ConfigMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Err::ConfigMismatch);
  }
}

TEST_CASE("forward emits a valid distribution and is deterministic") {
  const auto llm = build_llm(llm_config(), 3);
  const auto x = random_features(5, 12, 11);
  const auto p1 = forward(llm, x);
  const auto p2 = forward(llm, x);
  CHECK(p1.data == p2.data);
  for (std::size_t r = 0; r < 5; ++r) {
    double total = 0.0;
    for (std::size_t v = 0; v < 20; ++v) total += p1.at(r, v);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
  const auto pooled = forward_pooled(llm, x);
  CHECK(pooled.shape == std::vector<std::size_t>{1, 20});
  double total = 0.0;
  for (double v : pooled.data) total += v;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("zero LoRA factors leave the forward pass at the base model") {
  auto llm = build_llm(llm_config(), 5);
  const auto x = random_features(4, 12, 13);
  const auto with_zero_up = forward(llm, x);
  // zero the down factors too: the delta path multiplies to zero either way
  auto cleared = llm;
  for (auto& layer : cleared.layers)
    std::fill(layer.lora_down.data.begin(), layer.lora_down.data.end(), 0.0);
  const auto without = forward(cleared, x);
  for (std::size_t i = 0; i < with_zero_up.data.size(); ++i)
    CHECK(with_zero_up.data[i] == doctest::Approx(without.data[i]).epsilon(1e-15));
}

TEST_CASE("graph training updates only trainable leaves; frozen W is bit-identical") {
  auto slm = build_slm(build_llm(llm_config(), 1), slm_config(), 2);
  const auto x = random_features(6, 9, 17);
  const auto before_w = slm.layers[1].w.data;
  const auto before_up3 = slm.layers[3].lora_up.data;

  ad::Graph g;
  Trainability train = Trainability::none(4);
  train.lora[2] = 1;  // adapter layer
  const auto leaves = make_leaves(g, slm, train);
  const auto probs = probs_graph(g, slm, leaves, g.constant(x));
  const auto loss = g.mean(g.mul(probs, probs));
  g.backward(loss);

  // only layer 2's LoRA has gradients
  CHECK(g.grad(leaves.down[2]).size() > 0);
  CHECK(g.grad(leaves.w[2]).size() == 0);
  CHECK(g.grad(leaves.down[3]).size() == 0);

  ad::Adam opt(1e-2);
  opt.step("d", slm.layers[2].lora_down.data, g.grad(leaves.down[2]).data);
  opt.step("u", slm.layers[2].lora_up.data, g.grad(leaves.up[2]).data);
  CHECK(slm.layers[1].w.data == before_w);       // untouched, bit-identical
  CHECK(slm.layers[3].lora_up.data == before_up3);
}

TEST_CASE("adapter dispatch/install/return round-trip") {
  auto llm = build_llm(llm_config(), 21);
  auto slm = build_slm(llm, slm_config(), 22);

  auto bundle = dispatch_adapter(llm);
  CHECK(bundle.version == 1);
  install_adapter(slm, bundle);
  CHECK(tensors_equal(slm.layers[2].w, llm.layers[6].w));
  CHECK(slm.adapter_version == 1);

  // unchanged return leaves the LLM's parameters unchanged
  const auto before0 = llm.layers[0].w.data;
  const auto before_adapter = lora_flat(llm.layers[6]);
  return_adapter(llm, bundle);
  CHECK(llm.layers[0].w.data == before0);
  CHECK(lora_flat(llm.layers[6]) == before_adapter);
  CHECK(llm.adapter_version == 2);

  // a second return with the stale bundle is rejected
  try {
    return_adapter(llm, bundle);
    FAIL("expected StaleVersion");
  } catch (const Error& e) {
    CHECK(e.code() == Err::StaleVersion);
  }

  // fine-tuned return changes only adapter-layer LoRA
  auto bundle2 = dispatch_adapter(llm);
  CHECK(bundle2.version == 3);
  for (auto& layer : bundle2.layers)
    for (double& v : layer.lora_up.data) v += 0.25;
  const auto foundation_w = llm.layers[3].w.data;
  const auto foundation_lora = lora_flat(llm.layers[3]);
  const auto adapter_w = llm.layers[6].w.data;
  return_adapter(llm, bundle2);
  CHECK(llm.layers[3].w.data == foundation_w);
  CHECK(lora_flat(llm.layers[3]) == foundation_lora);
  CHECK(llm.layers[6].w.data == adapter_w);  // dense part of the adapter stays
  bool changed = false;
  for (double v : llm.layers[6].lora_up.data) changed |= v != 0.0;
  CHECK(changed);
}

TEST_CASE("trainable_param_count follows rank*(in+out)") {
  const auto llm = build_llm(llm_config(), 2);
  // hidden layer 64x64 at rank 4: 4*(64+64) = 512
  const std::vector<int> one{3};
  CHECK(trainable_param_count(llm, one) == 512);
  const std::vector<int> all{0, 1, 2, 3, 4, 5, 6, 7};
  std::size_t expect = 0;
  for (const auto& layer : llm.layers) expect += layer.lora_size();
  CHECK(trainable_param_count(llm, all) == expect);
  CHECK(trainable_param_count(llm, {}) == 0);
  try {
    trainable_param_count(llm, std::vector<int>{42});
    FAIL("expected UnknownLayer");
  } catch (const Error& e) {
    CHECK(e.code() == Err::UnknownLayer);
  }
}

TEST_CASE("lora_flat round-trips") {
  auto llm = build_llm(llm_config(), 31);
  auto& layer = llm.layers[4];
  auto flat = lora_flat(layer);
  for (double& v : flat) v *= 2.0;
  set_lora_flat(layer, flat);
  CHECK(lora_flat(layer) == flat);
}

TEST_CASE("checkpoints round-trip through bin + manifest") {
  const auto llm = build_llm(llm_config(), 77);
  const auto dir = std::filesystem::temp_directory_path();
  const auto bin = (dir / "fedtraj_model.bin").string();
  const auto manifest = (dir / "fedtraj_model.manifest").string();
  save_checkpoint(llm, bin, manifest);
  const auto loaded = load_checkpoint(bin, manifest);
  REQUIRE(loaded.layers.size() == llm.layers.size());
  for (std::size_t i = 0; i < llm.layers.size(); ++i) {
    CHECK(tensors_equal(loaded.layers[i].w, llm.layers[i].w));
    CHECK(tensors_equal(loaded.layers[i].b, llm.layers[i].b));
    CHECK(tensors_equal(loaded.layers[i].lora_down, llm.layers[i].lora_down));
    CHECK(tensors_equal(loaded.layers[i].lora_up, llm.layers[i].lora_up));
  }
  CHECK(loaded.adapter_version == llm.adapter_version);
  std::filesystem::remove(bin);
  std::filesystem::remove(manifest);
}

TEST_CASE("SLM adapter fine-tuning does not touch the server LLM until returned") {
  auto llm = build_llm(llm_config(), 41);
  auto slm = build_slm(llm, slm_config(), 42);
  const auto llm_adapter_before = lora_flat(llm.layers[6]);
  for (double& v : slm.layers[2].lora_up.data) v += 1.0;  // client-side step
  CHECK(lora_flat(llm.layers[6]) == llm_adapter_before);  // isolation
}
