#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedtraj/autodiff.hpp"
#include "fedtraj/geo.hpp"

namespace fedtraj::tpa {

using ad::Tensor;
using geo::Pt;

inline constexpr std::size_t kEmbedDim = 32;
inline constexpr std::size_t kHiddenDim = 256;

// feature scaling window: lon/lat from the bbox, t from [t_min, t_max]
struct Normalization {
  geo::BBox bbox;
  std::int64_t t_min = 0;
  std::int64_t t_max = 1;

  std::array<double, 3> to_unit(const Pt& p) const;  // OutOfNormalizationRange
  // same scaling without the window check (model outputs may overshoot)
  std::array<double, 3> to_unit_raw(const Pt& p) const;
  Pt from_unit(double lon_u, double lat_u, double t_u) const;
};

struct DenseLayer {
  Tensor w;  // [in x out]
  Tensor b;  // [out]
};

// encoder 3 -> 256 -> 256 -> 32, decoder 32 -> 256 -> 256 -> 3,
// GELU between layers; dims asserted at construction
struct TpaParams {
  std::vector<DenseLayer> encoder;
  std::vector<DenseLayer> decoder;
  Normalization norm;

  std::size_t param_count() const;
  // layout: encoder layers in order then decoder layers, each w (row-major,
  // [in x out]) then b
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);
};

TpaParams init_params(const Normalization& norm, std::uint64_t seed);

struct PointKey {
  std::string parent_id;
  std::int64_t t = 0;

  auto operator<=>(const PointKey&) const = default;
};

struct Embedding {
  std::array<double, kEmbedDim> e{};
  PointKey key;
};

struct EmbeddingBatch {
  int client_id = 0;
  std::vector<Embedding> embeddings;  // ordered by key
};

Embedding encode(const Pt& p, const PointKey& key, const TpaParams& params);
Pt decode(std::span<const double> embedding, const TpaParams& params);

// all clients' batches merged in global (parent, time) order
struct EmbeddingUnion {
  std::vector<Embedding> embeddings;
  std::vector<int> owner;  // client id per embedding
};

EmbeddingUnion union_embeddings(const std::vector<EmbeddingBatch>& batches);  // DuplicatePointKey
// exact inverse routing: results[i] belongs to union.owner[i]
std::vector<EmbeddingBatch> split_results(const std::vector<Embedding>& results,
                                          const EmbeddingUnion& un);

// MSE in normalized feature space
double recon_loss(const std::vector<Pt>& decoded, const std::vector<Pt>& truth,
                  const Normalization& norm);

// graph builders for training
struct TpaLeaves {
  std::vector<ad::Graph::Id> enc_w, enc_b, dec_w, dec_b;
};

TpaLeaves make_leaves(ad::Graph& g, const TpaParams& params);
ad::Graph::Id encoder_graph(ad::Graph& g, const TpaLeaves& leaves, ad::Graph::Id x);
ad::Graph::Id decoder_graph(ad::Graph& g, const TpaLeaves& leaves, ad::Graph::Id e);
// autoencoder MSE over a batch of points (rows of x are normalized features)
ad::Graph::Id recon_loss_graph(ad::Graph& g, const TpaLeaves& leaves, ad::Graph::Id x);

// one Adam step on the autoencoder loss over the given points;
// returns the loss before the step
double train_step(TpaParams& params, std::span<const Pt> points, ad::Adam& opt);

Tensor normalized_features(std::span<const Pt> points, const Normalization& norm);

}  // namespace fedtraj::tpa
