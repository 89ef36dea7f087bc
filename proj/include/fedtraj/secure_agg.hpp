#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedtraj/common.hpp"

namespace fedtraj::secagg {

// Pairwise masks: mask(i, j) == mask(j, i) elementwise, derived from
// hash(session_seed, min(i,j), max(i,j)), entries i.i.d. uniform [-1, 1].
class MaskKeySet {
 public:
  MaskKeySet(int num_clients, std::size_t len);

  int num_clients() const { return num_clients_; }
  std::size_t len() const { return len_; }
  std::span<const double> mask(int i, int j) const;  // MissingKey on bad pair
  std::span<double> mask_mut(int i, int j);
  bool empty() const { return masks_.empty(); }

 private:
  std::size_t pair_index(int i, int j) const;
  int num_clients_;
  std::size_t len_;
  std::vector<std::vector<double>> masks_;
};

MaskKeySet gen_pairwise_keys(int num_clients, std::size_t block_len, std::uint64_t session_seed);

struct ParameterBlock {
  int k = 0;             // block index; aggregated by client k
  std::size_t offset = 0;  // position in the flat vector
  std::vector<double> values;
};

// contiguous chunks of ceil(L / num_clients), last takes the remainder;
// always returns num_clients blocks (trailing ones may be empty)
std::vector<ParameterBlock> partition_params(std::span<const double> flat, int num_clients);

struct MaskedBlock {
  int k = 0;
  int origin = 0;
  std::vector<double> values;
};

// masked = block + sum_{j != i} a_ij * sk_ij, a_ij = +1 if i < j else -1
MaskedBlock mask_block(const ParameterBlock& block, int client_i, const MaskKeySet& keys);

// mean of the masked blocks; by the cancellation identity this equals the
// mean of the raw blocks
std::vector<double> aggregate_masked(const std::vector<MaskedBlock>& blocks, int num_clients);

// wire format: round u32 | block u16 | origin u16 | len u32, then len f64,
// all little-endian
struct Message {
  std::uint32_t round = 0;
  std::uint16_t block = 0;
  std::uint16_t origin = 0;
  std::vector<double> payload;

  std::size_t wire_bytes() const { return 12 + payload.size() * 8; }
};

struct TraceLog {
  std::vector<Message> messages;

  void append(Message msg) { messages.push_back(std::move(msg)); }
  std::size_t total_bytes() const;
  void save(const std::string& path) const;
  static TraceLog load(const std::string& path);
};

// One full decentralized aggregation round: every client partitions its
// parameter vector, masks each block, sends it to the aggregating client,
// which averages and broadcasts. Returns the averaged vector every client
// ends up holding. Masked-block delivery order is shuffled by
// interleave_seed; the result must not depend on it.
std::vector<double> run_aggregation_round(const std::vector<std::vector<double>>& client_params,
                                          std::uint64_t session_seed, std::uint32_t round,
                                          TraceLog* trace = nullptr,
                                          std::uint64_t interleave_seed = 0);

}  // namespace fedtraj::secagg
