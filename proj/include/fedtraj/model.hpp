#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedtraj/autodiff.hpp"

namespace fedtraj::lm {

using ad::Tensor;

struct ModelConfig {
  int n_layers = 8;       // server LLM 8, client SLM 4
  int width = 64;
  int vocab_size = 0;
  int lora_rank = 4;
  int adapter_depth = 2;  // trailing layers shared between LLM and SLM
  int in_dim = 0;
};

// Dense layer with a low-rank additive update: effective weight is
// w + lora_down * lora_up. The dense weight stays frozen while fine-tuning;
// only the factors train.
struct LayerState {
  int id = 0;
  Tensor w;          // [in x out]
  Tensor b;          // [out]
  Tensor lora_down;  // [in x rank], small uniform init
  Tensor lora_up;    // [rank x out], zero init so training starts at the base

  std::size_t in_dim() const { return w.shape[0]; }
  std::size_t out_dim() const { return w.shape[1]; }
  std::size_t lora_size() const { return lora_down.size() + lora_up.size(); }
};

struct Model {
  ModelConfig cfg;
  std::vector<LayerState> layers;
  int adapter_version = 0;

  int first_adapter_layer() const { return cfg.n_layers - cfg.adapter_depth; }
  bool is_adapter_layer(int id) const { return id >= first_adapter_layer(); }
};

Model build_llm(const ModelConfig& cfg, std::uint64_t seed);
// SLM = fresh foundation layers + a value copy of the LLM's adapter
Model build_slm(const Model& llm, const ModelConfig& cfg, std::uint64_t seed);

// evaluation forward passes (no gradients)
Tensor logits(const Model& model, const Tensor& features);       // [n x vocab]
Tensor forward(const Model& model, const Tensor& features);      // softmax rows
Tensor forward_pooled(const Model& model, const Tensor& features);  // [1 x vocab]

// training-graph construction
struct Trainability {
  std::vector<std::uint8_t> dense;  // per layer: w and b receive gradients
  std::vector<std::uint8_t> lora;   // per layer: factors receive gradients

  static Trainability none(int n_layers);
};

struct ModelLeaves {
  std::vector<ad::Graph::Id> w, b, down, up;
};

ModelLeaves make_leaves(ad::Graph& g, const Model& model, const Trainability& train);
ad::Graph::Id logits_graph(ad::Graph& g, const Model& model, const ModelLeaves& leaves,
                           ad::Graph::Id x);
ad::Graph::Id probs_graph(ad::Graph& g, const Model& model, const ModelLeaves& leaves,
                          ad::Graph::Id x);
ad::Graph::Id pooled_probs_graph(ad::Graph& g, const Model& model, const ModelLeaves& leaves,
                                 ad::Graph::Id x);

struct AdapterBundle {
  std::vector<LayerState> layers;  // value copies, ids preserved
  int version = 0;
};

AdapterBundle dispatch_adapter(Model& llm);                  // bumps version
void install_adapter(Model& slm, const AdapterBundle& bundle);
// installs the bundle's LoRA factors into the LLM's adapter layers;
// StaleVersion unless the bundle matches the last dispatch
void return_adapter(Model& llm, const AdapterBundle& bundle);

// number of trainable LoRA values over the selected layers
std::size_t trainable_param_count(const Model& model, std::span<const int> layers);  // UnknownLayer

std::vector<double> lora_flat(const LayerState& layer);
void set_lora_flat(LayerState& layer, std::span<const double> flat);

void save_checkpoint(const Model& model, const std::string& bin_path,
                     const std::string& manifest_path);
Model load_checkpoint(const std::string& bin_path, const std::string& manifest_path);

}  // namespace fedtraj::lm
