#include "fedtraj/tpa.hpp"

#include <algorithm>
#include <cmath>

#include "fedtraj/kernels.hpp"

namespace fedtraj::tpa {

std::array<double, 3> Normalization::to_unit_raw(const Pt& p) const {
  const double lon_u = (p.lon - bbox.lon_min) / (bbox.lon_max - bbox.lon_min);
  const double lat_u = (p.lat - bbox.lat_min) / (bbox.lat_max - bbox.lat_min);
  const double t_u = static_cast<double>(p.t - t_min) / static_cast<double>(t_max - t_min);
  return {lon_u, lat_u, t_u};
}

std::array<double, 3> Normalization::to_unit(const Pt& p) const {
  if (!bbox.contains(p) || p.t < t_min || p.t > t_max)
    fail(Err::OutOfNormalizationRange, "point outside normalization window");
  return to_unit_raw(p);
}

Pt Normalization::from_unit(double lon_u, double lat_u, double t_u) const {
  Pt p;
  p.lon = bbox.lon_min + lon_u * (bbox.lon_max - bbox.lon_min);
  p.lat = bbox.lat_min + lat_u * (bbox.lat_max - bbox.lat_min);
  p.t = t_min + static_cast<std::int64_t>(std::llround(t_u * static_cast<double>(t_max - t_min)));
  return p;
}

namespace {

constexpr std::array<std::size_t, 4> kEncDims = {3, kHiddenDim, kHiddenDim, kEmbedDim};
constexpr std::array<std::size_t, 4> kDecDims = {kEmbedDim, kHiddenDim, kHiddenDim, 3};

DenseLayer init_layer(std::size_t in, std::size_t out, Rng& rng) {
  DenseLayer layer;
  const double bound = std::sqrt(1.0 / static_cast<double>(in));
  std::vector<double> w(in * out);
  for (double& v : w) v = rng.uniform(-bound, bound);
  layer.w = Tensor::matrix(in, out, std::move(w));
  layer.b = Tensor::row(std::vector<double>(out, 0.0));
  return layer;
}

void check_dims(const TpaParams& p) {
  if (p.encoder.size() != 3 || p.decoder.size() != 3)
    fail(Err::ConfigMismatch, "TPA must have 3 encoder and 3 decoder layers");
  for (int i = 0; i < 3; ++i) {
    if (p.encoder[i].w.shape != std::vector<std::size_t>{kEncDims[i], kEncDims[i + 1]} ||
        p.decoder[i].w.shape != std::vector<std::size_t>{kDecDims[i], kDecDims[i + 1]})
      fail(Err::ConfigMismatch, "TPA layer dims must be 3-256-256-32 / 32-256-256-3");
  }
}

}  // namespace

TpaParams init_params(const Normalization& norm, std::uint64_t seed) {
  Rng rng(hash_mix(seed, 0x747061 /*"tpa"*/));
  TpaParams p;
  p.norm = norm;
  for (int i = 0; i < 3; ++i) p.encoder.push_back(init_layer(kEncDims[i], kEncDims[i + 1], rng));
  for (int i = 0; i < 3; ++i) p.decoder.push_back(init_layer(kDecDims[i], kDecDims[i + 1], rng));
  check_dims(p);
  return p;
}

std::size_t TpaParams::param_count() const {
  std::size_t n = 0;
  for (const auto& l : encoder) n += l.w.size() + l.b.size();
  for (const auto& l : decoder) n += l.w.size() + l.b.size();
  return n;
}

std::vector<double> TpaParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(param_count());
  auto push = [&](const std::vector<DenseLayer>& layers) {
    for (const auto& l : layers) {
      flat.insert(flat.end(), l.w.data.begin(), l.w.data.end());
      flat.insert(flat.end(), l.b.data.begin(), l.b.data.end());
    }
  };
  push(encoder);
  push(decoder);
  return flat;
}

void TpaParams::unflatten(std::span<const double> flat) {
  if (flat.size() != param_count()) fail(Err::ShapeMismatch, "flat vector size mismatch");
  std::size_t pos = 0;
  auto pull = [&](std::vector<DenseLayer>& layers) {
    for (auto& l : layers) {
      std::copy(flat.begin() + pos, flat.begin() + pos + l.w.size(), l.w.data.begin());
      pos += l.w.size();
      std::copy(flat.begin() + pos, flat.begin() + pos + l.b.size(), l.b.data.begin());
      pos += l.b.size();
    }
  };
  pull(encoder);
  pull(decoder);
}

namespace {

// y = gelu(...(gelu(x W1 + b1))...) Wn + bn, gelu between layers only
std::vector<double> run_layers(const std::vector<DenseLayer>& layers, std::span<const double> input) {
  std::vector<double> cur(input.begin(), input.end());
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& l = layers[li];
    const std::size_t in = l.w.shape[0], out = l.w.shape[1];
    std::vector<double> next(out);
    kernels::matmul_nn(cur.data(), l.w.data.data(), next.data(), 1, in, out);
    kernels::add(next.data(), l.b.data.data(), next.data(), out);
    if (li + 1 < layers.size()) kernels::gelu(next.data(), next.data(), out);
    cur = std::move(next);
  }
  return cur;
}

}  // namespace

Embedding encode(const Pt& p, const PointKey& key, const TpaParams& params) {
  check_dims(params);
  const auto unit = params.norm.to_unit(p);
  const auto out = run_layers(params.encoder, std::span<const double>(unit.data(), 3));
  Embedding e;
  e.key = key;
  std::copy(out.begin(), out.end(), e.e.begin());
  return e;
}

Pt decode(std::span<const double> embedding, const TpaParams& params) {
  check_dims(params);
  if (embedding.size() != kEmbedDim) fail(Err::ShapeMismatch, "embedding must have length 32");
  const auto out = run_layers(params.decoder, embedding);
  return params.norm.from_unit(out[0], out[1], out[2]);
}

EmbeddingUnion union_embeddings(const std::vector<EmbeddingBatch>& batches) {
  EmbeddingUnion un;
  std::vector<std::pair<PointKey, std::pair<int, const Embedding*>>> items;
  for (const auto& batch : batches) {
    for (const auto& emb : batch.embeddings) {
      items.push_back({emb.key, {batch.client_id, &emb}});
    }
  }
  std::sort(items.begin(), items.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t i = 1; i < items.size(); ++i) {
    if (items[i].first == items[i - 1].first)
      fail(Err::DuplicatePointKey, "duplicate point key in union: " + items[i].first.parent_id + "@" +
                                       std::to_string(items[i].first.t));
  }
  for (const auto& [key, value] : items) {
    un.embeddings.push_back(*value.second);
    un.owner.push_back(value.first);
  }
  return un;
}

std::vector<EmbeddingBatch> split_results(const std::vector<Embedding>& results,
                                          const EmbeddingUnion& un) {
  if (results.size() != un.owner.size()) fail(Err::LengthMismatch, "results do not match the union");
  std::vector<int> clients(un.owner);
  std::sort(clients.begin(), clients.end());
  clients.erase(std::unique(clients.begin(), clients.end()), clients.end());
  std::vector<EmbeddingBatch> out;
  for (int c : clients) out.push_back(EmbeddingBatch{c, {}});
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto it = std::lower_bound(clients.begin(), clients.end(), un.owner[i]);
    out[static_cast<std::size_t>(it - clients.begin())].embeddings.push_back(results[i]);
  }
  return out;
}

double recon_loss(const std::vector<Pt>& decoded, const std::vector<Pt>& truth,
                  const Normalization& norm) {
  if (decoded.size() != truth.size() || decoded.empty())
    fail(Err::LengthMismatch, "recon_loss needs equal-length non-empty sequences");
  double acc = 0.0;
  for (std::size_t i = 0; i < decoded.size(); ++i) {
    const auto a = norm.to_unit_raw(decoded[i]);
    const auto b = norm.to_unit_raw(truth[i]);
    for (int j = 0; j < 3; ++j) acc += (a[j] - b[j]) * (a[j] - b[j]);
  }
  return acc / (3.0 * static_cast<double>(decoded.size()));
}

TpaLeaves make_leaves(ad::Graph& g, const TpaParams& params) {
  TpaLeaves leaves;
  for (const auto& l : params.encoder) {
    leaves.enc_w.push_back(g.leaf(l.w, true));
    leaves.enc_b.push_back(g.leaf(l.b, true));
  }
  for (const auto& l : params.decoder) {
    leaves.dec_w.push_back(g.leaf(l.w, true));
    leaves.dec_b.push_back(g.leaf(l.b, true));
  }
  return leaves;
}

namespace {

ad::Graph::Id layers_graph(ad::Graph& g, const std::vector<ad::Graph::Id>& ws,
                           const std::vector<ad::Graph::Id>& bs, ad::Graph::Id x) {
  ad::Graph::Id cur = x;
  for (std::size_t i = 0; i < ws.size(); ++i) {
    cur = g.add_rowvec(g.matmul(cur, ws[i]), bs[i]);
    if (i + 1 < ws.size()) cur = g.gelu(cur);
  }
  return cur;
}

}  // namespace

ad::Graph::Id encoder_graph(ad::Graph& g, const TpaLeaves& leaves, ad::Graph::Id x) {
  return layers_graph(g, leaves.enc_w, leaves.enc_b, x);
}

ad::Graph::Id decoder_graph(ad::Graph& g, const TpaLeaves& leaves, ad::Graph::Id e) {
  return layers_graph(g, leaves.dec_w, leaves.dec_b, e);
}

ad::Graph::Id recon_loss_graph(ad::Graph& g, const TpaLeaves& leaves, ad::Graph::Id x) {
  const auto decoded = decoder_graph(g, leaves, encoder_graph(g, leaves, x));
  const auto diff = g.sub(decoded, x);
  return g.mean(g.mul(diff, diff));
}

Tensor normalized_features(std::span<const Pt> points, const Normalization& norm) {
  Tensor x = Tensor::zeros({points.size(), 3});
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto unit = norm.to_unit(points[i]);
    for (int j = 0; j < 3; ++j) x.data[i * 3 + j] = unit[j];
  }
  return x;
}

double train_step(TpaParams& params, std::span<const Pt> points, ad::Adam& opt) {
  ad::Graph g;
  const TpaLeaves leaves = make_leaves(g, params);
  const auto x = g.constant(normalized_features(points, params.norm));
  const auto loss = recon_loss_graph(g, leaves, x);
  g.backward(loss);
  for (std::size_t i = 0; i < params.encoder.size(); ++i) {
    opt.step("enc.w" + std::to_string(i), params.encoder[i].w.data, g.grad(leaves.enc_w[i]).data);
    opt.step("enc.b" + std::to_string(i), params.encoder[i].b.data, g.grad(leaves.enc_b[i]).data);
  }
  for (std::size_t i = 0; i < params.decoder.size(); ++i) {
    opt.step("dec.w" + std::to_string(i), params.decoder[i].w.data, g.grad(leaves.dec_w[i]).data);
    opt.step("dec.b" + std::to_string(i), params.decoder[i].b.data, g.grad(leaves.dec_b[i]).data);
  }
  return g.value(loss).data[0];
}

}  // namespace fedtraj::tpa
