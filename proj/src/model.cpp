#include "fedtraj/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "fedtraj/kernels.hpp"

namespace fedtraj::lm {

namespace {

void check_config(const ModelConfig& cfg) {
  if (cfg.n_layers < 2 || cfg.width < 1 || cfg.vocab_size < 2 || cfg.lora_rank < 1 || cfg.in_dim < 1)
    fail(Err::ConfigMismatch, "model config out of range");
  if (cfg.adapter_depth < 1 || cfg.adapter_depth >= cfg.n_layers)
    fail(Err::ConfigMismatch, "adapter depth must leave at least one foundation layer");
}

std::pair<std::size_t, std::size_t> layer_dims(const ModelConfig& cfg, int id) {
  const std::size_t in = id == 0 ? static_cast<std::size_t>(cfg.in_dim)
                                 : static_cast<std::size_t>(cfg.width);
  const std::size_t out = id == cfg.n_layers - 1 ? static_cast<std::size_t>(cfg.vocab_size)
                                                 : static_cast<std::size_t>(cfg.width);
  return {in, out};
}

LayerState init_layer(const ModelConfig& cfg, int id, Rng& rng) {
  const auto [in, out] = layer_dims(cfg, id);
  LayerState layer;
  layer.id = id;
  const double bound = std::sqrt(1.0 / static_cast<double>(in));
  std::vector<double> w(in * out);
  for (double& v : w) v = rng.uniform(-bound, bound);
  layer.w = Tensor::matrix(in, out, std::move(w));
  layer.b = Tensor::row(std::vector<double>(out, 0.0));
  std::vector<double> down(in * static_cast<std::size_t>(cfg.lora_rank));
  for (double& v : down) v = rng.uniform(-0.01, 0.01);
  layer.lora_down = Tensor::matrix(in, static_cast<std::size_t>(cfg.lora_rank), std::move(down));
  layer.lora_up = Tensor::zeros({static_cast<std::size_t>(cfg.lora_rank), out});
  return layer;
}

}  // namespace

Model build_llm(const ModelConfig& cfg, std::uint64_t seed) {
  check_config(cfg);
  Model model;
  model.cfg = cfg;
  Rng rng(hash_mix(seed, 0x6c6c6d /*"llm"*/));
  for (int id = 0; id < cfg.n_layers; ++id) model.layers.push_back(init_layer(cfg, id, rng));
  return model;
}

Model build_slm(const Model& llm, const ModelConfig& cfg, std::uint64_t seed) {
  check_config(cfg);
  if (cfg.width != llm.cfg.width || cfg.vocab_size != llm.cfg.vocab_size ||
      cfg.lora_rank != llm.cfg.lora_rank || cfg.adapter_depth != llm.cfg.adapter_depth)
    fail(Err::ConfigMismatch, "SLM must share width, vocab, rank and adapter depth with the LLM");
  if (cfg.n_layers >= llm.cfg.n_layers)
    fail(Err::ConfigMismatch, "SLM must be smaller than the LLM");
  Model model;
  model.cfg = cfg;
  Rng rng(hash_mix(seed, 0x736c6d /*"slm"*/));
  const int own = cfg.n_layers - cfg.adapter_depth;
  for (int id = 0; id < own; ++id) model.layers.push_back(init_layer(cfg, id, rng));
  // adapter: value copy of the LLM's trailing layers
  for (int a = 0; a < cfg.adapter_depth; ++a) {
    LayerState copy = llm.layers[static_cast<std::size_t>(llm.first_adapter_layer() + a)];
    copy.id = own + a;
    model.layers.push_back(std::move(copy));
  }
  model.adapter_version = llm.adapter_version;
  return model;
}

namespace {

// y = x * (w + down * up) + b, evaluated as x*w + (x*down)*up + b
Tensor layer_forward(const LayerState& layer, const Tensor& x) {
  const std::size_t n = x.shape[0];
  const std::size_t in = layer.in_dim(), out = layer.out_dim();
  const std::size_t rank = layer.lora_down.shape[1];
  Tensor y = Tensor::zeros({n, out});
  kernels::matmul_nn(x.data.data(), layer.w.data.data(), y.data.data(), n, in, out);
  Tensor xr = Tensor::zeros({n, rank});
  kernels::matmul_nn(x.data.data(), layer.lora_down.data.data(), xr.data.data(), n, in, rank);
  Tensor delta = Tensor::zeros({n, out});
  kernels::matmul_nn(xr.data.data(), layer.lora_up.data.data(), delta.data.data(), n, rank, out);
  kernels::add(y.data.data(), delta.data.data(), y.data.data(), y.size());
  for (std::size_t r = 0; r < n; ++r)
    kernels::add(y.data.data() + r * out, layer.b.data.data(), y.data.data() + r * out, out);
  return y;
}

}  // namespace

Tensor logits(const Model& model, const Tensor& features) {
  if (features.shape.size() != 2 || features.shape[1] != static_cast<std::size_t>(model.cfg.in_dim))
    fail(Err::ShapeMismatch, "feature width does not match the model input");
  Tensor cur = features;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    cur = layer_forward(model.layers[i], cur);
    if (i + 1 < model.layers.size()) kernels::gelu(cur.data.data(), cur.data.data(), cur.size());
  }
  return cur;
}

Tensor forward(const Model& model, const Tensor& features) {
  Tensor out = logits(model, features);
  ad::softmax_rows_inplace(out);
  return out;
}

Tensor forward_pooled(const Model& model, const Tensor& features) {
  const Tensor raw = logits(model, features);
  Tensor pooled = Tensor::zeros({1, raw.shape[1]});
  for (std::size_t r = 0; r < raw.shape[0]; ++r)
    kernels::add(pooled.data.data(), raw.data.data() + r * raw.shape[1], pooled.data.data(),
                 raw.shape[1]);
  kernels::scale(pooled.data.data(), 1.0 / static_cast<double>(raw.shape[0]), pooled.data.data(),
                 pooled.size());
  ad::softmax_rows_inplace(pooled);
  return pooled;
}

Trainability Trainability::none(int n_layers) {
  Trainability t;
  t.dense.assign(static_cast<std::size_t>(n_layers), 0);
  t.lora.assign(static_cast<std::size_t>(n_layers), 0);
  return t;
}

ModelLeaves make_leaves(ad::Graph& g, const Model& model, const Trainability& train) {
  if (train.dense.size() != model.layers.size() || train.lora.size() != model.layers.size())
    fail(Err::ShapeMismatch, "trainability flags do not cover the model");
  ModelLeaves leaves;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& layer = model.layers[i];
    leaves.w.push_back(g.leaf(layer.w, train.dense[i] != 0));
    leaves.b.push_back(g.leaf(layer.b, train.dense[i] != 0));
    leaves.down.push_back(g.leaf(layer.lora_down, train.lora[i] != 0));
    leaves.up.push_back(g.leaf(layer.lora_up, train.lora[i] != 0));
  }
  return leaves;
}

ad::Graph::Id logits_graph(ad::Graph& g, const Model& model, const ModelLeaves& leaves,
                           ad::Graph::Id x) {
  ad::Graph::Id cur = x;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto base = g.matmul(cur, leaves.w[i]);
    const auto delta = g.matmul(g.matmul(cur, leaves.down[i]), leaves.up[i]);
    cur = g.add_rowvec(g.add(base, delta), leaves.b[i]);
    if (i + 1 < model.layers.size()) cur = g.gelu(cur);
  }
  return cur;
}

ad::Graph::Id probs_graph(ad::Graph& g, const Model& model, const ModelLeaves& leaves,
                          ad::Graph::Id x) {
  return g.softmax(logits_graph(g, model, leaves, x));
}

ad::Graph::Id pooled_probs_graph(ad::Graph& g, const Model& model, const ModelLeaves& leaves,
                                 ad::Graph::Id x) {
  const auto raw = logits_graph(g, model, leaves, x);
  const std::size_t n = g.value(raw).shape[0];
  const auto ones =
      g.constant(Tensor::matrix(1, n, std::vector<double>(n, 1.0 / static_cast<double>(n))));
  return g.softmax(g.matmul(ones, raw));
}

AdapterBundle dispatch_adapter(Model& llm) {
  AdapterBundle bundle;
  for (int a = 0; a < llm.cfg.adapter_depth; ++a)
    bundle.layers.push_back(llm.layers[static_cast<std::size_t>(llm.first_adapter_layer() + a)]);
  bundle.version = ++llm.adapter_version;
  return bundle;
}

void install_adapter(Model& slm, const AdapterBundle& bundle) {
  if (static_cast<int>(bundle.layers.size()) != slm.cfg.adapter_depth)
    fail(Err::ConfigMismatch, "bundle depth does not match the model");
  const int first = slm.first_adapter_layer();
  for (int a = 0; a < slm.cfg.adapter_depth; ++a) {
    auto& dst = slm.layers[static_cast<std::size_t>(first + a)];
    const auto& src = bundle.layers[static_cast<std::size_t>(a)];
    if (dst.w.shape != src.w.shape) fail(Err::ConfigMismatch, "adapter layer shape mismatch");
    const int keep_id = dst.id;
    dst = src;
    dst.id = keep_id;
  }
  slm.adapter_version = bundle.version;
}

void return_adapter(Model& llm, const AdapterBundle& bundle) {
  if (bundle.version != llm.adapter_version)
    fail(Err::StaleVersion, "adapter bundle version " + std::to_string(bundle.version) +
                                " does not match dispatched " + std::to_string(llm.adapter_version));
  if (static_cast<int>(bundle.layers.size()) != llm.cfg.adapter_depth)
    fail(Err::ConfigMismatch, "bundle depth does not match the model");
  const int first = llm.first_adapter_layer();
  for (int a = 0; a < llm.cfg.adapter_depth; ++a) {
    auto& dst = llm.layers[static_cast<std::size_t>(first + a)];
    const auto& src = bundle.layers[static_cast<std::size_t>(a)];
    if (dst.lora_down.shape != src.lora_down.shape || dst.lora_up.shape != src.lora_up.shape)
      fail(Err::ConfigMismatch, "adapter LoRA shape mismatch");
    dst.lora_down = src.lora_down;
    dst.lora_up = src.lora_up;
  }
  ++llm.adapter_version;
}

std::size_t trainable_param_count(const Model& model, std::span<const int> layers) {
  std::size_t count = 0;
  for (int id : layers) {
    if (id < 0 || id >= static_cast<int>(model.layers.size()))
      fail(Err::UnknownLayer, "layer " + std::to_string(id) + " not in the model");
    count += model.layers[static_cast<std::size_t>(id)].lora_size();
  }
  return count;
}

std::vector<double> lora_flat(const LayerState& layer) {
  std::vector<double> flat;
  flat.reserve(layer.lora_size());
  flat.insert(flat.end(), layer.lora_down.data.begin(), layer.lora_down.data.end());
  flat.insert(flat.end(), layer.lora_up.data.begin(), layer.lora_up.data.end());
  return flat;
}

void set_lora_flat(LayerState& layer, std::span<const double> flat) {
  if (flat.size() != layer.lora_size()) fail(Err::ShapeMismatch, "lora flat size mismatch");
  std::copy(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(layer.lora_down.size()),
            layer.lora_down.data.begin());
  std::copy(flat.begin() + static_cast<std::ptrdiff_t>(layer.lora_down.size()), flat.end(),
            layer.lora_up.data.begin());
}

void save_checkpoint(const Model& model, const std::string& bin_path,
                     const std::string& manifest_path) {
  std::ofstream manifest(manifest_path);
  if (!manifest) fail(Err::IoError, "cannot open " + manifest_path + " for writing");
  manifest << "model n_layers=" << model.cfg.n_layers << " width=" << model.cfg.width
           << " vocab=" << model.cfg.vocab_size << " rank=" << model.cfg.lora_rank
           << " adapter_depth=" << model.cfg.adapter_depth << " in_dim=" << model.cfg.in_dim
           << " version=" << model.adapter_version << "\n";
  for (const auto& layer : model.layers) {
    manifest << "layer id=" << layer.id << " in=" << layer.in_dim() << " out=" << layer.out_dim()
             << " rank=" << layer.lora_down.shape[1] << "\n";
  }
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) fail(Err::IoError, "cannot open " + bin_path + " for writing");
  auto dump = [&](const Tensor& t) {
    bin.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  };
  for (const auto& layer : model.layers) {
    dump(layer.w);
    dump(layer.b);
    dump(layer.lora_down);
    dump(layer.lora_up);
  }
}

Model load_checkpoint(const std::string& bin_path, const std::string& manifest_path) {
  std::ifstream manifest(manifest_path);
  if (!manifest) fail(Err::IoError, "cannot open " + manifest_path);
  std::string line;
  if (!std::getline(manifest, line)) fail(Err::ParseError, "empty manifest");
  ModelConfig cfg;
  int version = 0;
  {
    std::istringstream ss(line);
    std::string tag, kv;
    ss >> tag;
    if (tag != "model") fail(Err::ParseError, "manifest must start with a model line");
    while (ss >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) fail(Err::ParseError, "bad manifest field " + kv);
      const std::string key = kv.substr(0, eq);
      const int value = std::stoi(kv.substr(eq + 1));
      if (key == "n_layers") cfg.n_layers = value;
      else if (key == "width") cfg.width = value;
      else if (key == "vocab") cfg.vocab_size = value;
      else if (key == "rank") cfg.lora_rank = value;
      else if (key == "adapter_depth") cfg.adapter_depth = value;
      else if (key == "in_dim") cfg.in_dim = value;
      else if (key == "version") version = value;
      else fail(Err::ParseError, "unknown manifest field " + key);
    }
  }
  Model model = build_llm(cfg, 0);
  model.adapter_version = version;
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) fail(Err::IoError, "cannot open " + bin_path);
  auto pull = [&](Tensor& t) {
    bin.read(reinterpret_cast<char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!bin) fail(Err::ParseError, "checkpoint shorter than the manifest describes");
  };
  for (auto& layer : model.layers) {
    pull(layer.w);
    pull(layer.b);
    pull(layer.lora_down);
    pull(layer.lora_up);
  }
  return model;
}

}  // namespace fedtraj::lm
