#include "fedtraj/secure_agg.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "fedtraj/kernels.hpp"

namespace fedtraj::secagg {

MaskKeySet::MaskKeySet(int num_clients, std::size_t len) : num_clients_(num_clients), len_(len) {
  const std::size_t pairs =
      num_clients >= 2 ? static_cast<std::size_t>(num_clients) * (num_clients - 1) / 2 : 0;
  masks_.resize(pairs, std::vector<double>(len, 0.0));
}

std::size_t MaskKeySet::pair_index(int i, int j) const {
  if (i == j || i < 0 || j < 0 || i >= num_clients_ || j >= num_clients_)
    fail(Err::MissingKey, "no key for pair (" + std::to_string(i) + ", " + std::to_string(j) + ")");
  const int lo = std::min(i, j), hi = std::max(i, j);
  // index into the upper triangle, row-major
  return static_cast<std::size_t>(lo) * num_clients_ - static_cast<std::size_t>(lo) * (lo + 1) / 2 +
         static_cast<std::size_t>(hi - lo - 1);
}

std::span<const double> MaskKeySet::mask(int i, int j) const {
  const auto& m = masks_.at(pair_index(i, j));
  return {m.data(), m.size()};
}

std::span<double> MaskKeySet::mask_mut(int i, int j) {
  auto& m = masks_.at(pair_index(i, j));
  return {m.data(), m.size()};
}

MaskKeySet gen_pairwise_keys(int num_clients, std::size_t block_len, std::uint64_t session_seed) {
  MaskKeySet keys(num_clients, block_len);
  for (int i = 0; i < num_clients; ++i) {
    for (int j = i + 1; j < num_clients; ++j) {
      Rng rng(hash_mix(session_seed, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j)));
      auto mask = keys.mask_mut(i, j);
      for (double& v : mask) v = rng.uniform(-1.0, 1.0);
    }
  }
  return keys;
}

std::vector<ParameterBlock> partition_params(std::span<const double> flat, int num_clients) {
  if (flat.empty()) fail(Err::InvariantViolation, "cannot partition an empty parameter vector");
  if (num_clients < 1) fail(Err::ConfigError, "need at least one client");
  const std::size_t chunk =
      (flat.size() + static_cast<std::size_t>(num_clients) - 1) / static_cast<std::size_t>(num_clients);
  std::vector<ParameterBlock> blocks;
  std::size_t pos = 0;
  for (int k = 0; k < num_clients; ++k) {
    const std::size_t take = std::min(chunk, flat.size() - pos);
    blocks.push_back(ParameterBlock{k, pos, {flat.begin() + pos, flat.begin() + pos + take}});
    pos += take;
  }
  return blocks;
}

MaskedBlock mask_block(const ParameterBlock& block, int client_i, const MaskKeySet& keys) {
  if (client_i < 0 || client_i >= keys.num_clients())
    fail(Err::MissingKey, "client index outside the key set");
  if (keys.len() < block.offset + block.values.size())
    fail(Err::MissingKey, "key masks shorter than the masked block");
  MaskedBlock out{block.k, client_i, block.values};
  for (int j = 0; j < keys.num_clients(); ++j) {
    if (j == client_i) continue;
    const double sign = client_i < j ? 1.0 : -1.0;
    const auto mask = keys.mask(client_i, j).subspan(block.offset, block.values.size());
    kernels::axpy(sign, mask.data(), out.values.data(), out.values.size());
  }
  return out;
}

std::vector<double> aggregate_masked(const std::vector<MaskedBlock>& blocks, int num_clients) {
  if (static_cast<int>(blocks.size()) != num_clients)
    fail(Err::MissingClient, "expected one masked block per client");
  std::vector<std::uint8_t> seen(static_cast<std::size_t>(num_clients), 0);
  for (const auto& b : blocks) {
    if (b.origin < 0 || b.origin >= num_clients || seen[static_cast<std::size_t>(b.origin)])
      fail(Err::MissingClient, "masked blocks must come from distinct clients");
    seen[static_cast<std::size_t>(b.origin)] = 1;
    if (b.values.size() != blocks.front().values.size())
      fail(Err::LengthMismatch, "masked block lengths differ");
  }
  std::vector<double> acc(blocks.front().values.size(), 0.0);
  // accumulate in origin order so the result is interleaving-independent
  std::vector<const MaskedBlock*> ordered(static_cast<std::size_t>(num_clients));
  for (const auto& b : blocks) ordered[static_cast<std::size_t>(b.origin)] = &b;
  for (const auto* b : ordered) {
    kernels::add(acc.data(), b->values.data(), acc.data(), acc.size());
  }
  kernels::scale(acc.data(), 1.0 / static_cast<double>(num_clients), acc.data(), acc.size());
  return acc;
}

std::size_t TraceLog::total_bytes() const {
  std::size_t total = 0;
  for (const auto& m : messages) total += m.wire_bytes();
  return total;
}

namespace {

template <typename T>
void write_le(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

void TraceLog::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(Err::IoError, "cannot open " + path + " for writing");
  for (const auto& m : messages) {
    write_le(out, m.round);
    write_le(out, m.block);
    write_le(out, m.origin);
    write_le(out, static_cast<std::uint32_t>(m.payload.size()));
    out.write(reinterpret_cast<const char*>(m.payload.data()),
              static_cast<std::streamsize>(m.payload.size() * sizeof(double)));
  }
}

TraceLog TraceLog::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Err::IoError, "cannot open " + path);
  TraceLog log;
  while (true) {
    Message m;
    m.round = read_le<std::uint32_t>(in);
    if (!in) break;
    m.block = read_le<std::uint16_t>(in);
    m.origin = read_le<std::uint16_t>(in);
    const auto len = read_le<std::uint32_t>(in);
    m.payload.resize(len);
    in.read(reinterpret_cast<char*>(m.payload.data()),
            static_cast<std::streamsize>(len * sizeof(double)));
    if (!in) fail(Err::ParseError, "truncated trace file");
    log.messages.push_back(std::move(m));
  }
  return log;
}

std::vector<double> run_aggregation_round(const std::vector<std::vector<double>>& client_params,
                                          std::uint64_t session_seed, std::uint32_t round,
                                          TraceLog* trace, std::uint64_t interleave_seed) {
  const int c = static_cast<int>(client_params.size());
  if (c < 1) fail(Err::MissingClient, "no clients");
  const std::size_t len = client_params.front().size();
  for (const auto& p : client_params) {
    if (p.size() != len) fail(Err::LengthMismatch, "clients hold different parameter lengths");
  }

  // fresh keys per round
  const MaskKeySet keys = gen_pairwise_keys(c, len, hash_mix(session_seed, round));

  // every client masks every block; delivery to the aggregating client is
  // queued per (origin, block) pair and drained in a shuffled order
  std::vector<std::vector<MaskedBlock>> inbox(static_cast<std::size_t>(c));
  std::vector<std::pair<int, int>> schedule;  // (origin, block)
  std::vector<std::vector<ParameterBlock>> blocks(static_cast<std::size_t>(c));
  for (int i = 0; i < c; ++i) {
    blocks[static_cast<std::size_t>(i)] =
        partition_params({client_params[static_cast<std::size_t>(i)].data(), len}, c);
    for (int k = 0; k < c; ++k) schedule.emplace_back(i, k);
  }
  Rng shuffle_rng(hash_mix(interleave_seed, 0x736864 /*"shd"*/));
  for (std::size_t i = schedule.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(schedule[i - 1], schedule[j]);
  }
  for (const auto& [origin, k] : schedule) {
    const auto& block = blocks[static_cast<std::size_t>(origin)][static_cast<std::size_t>(k)];
    if (block.values.empty()) continue;  // surplus block, nothing to transmit
    MaskedBlock masked = mask_block(block, origin, keys);
    if (trace != nullptr) {
      trace->append(Message{round, static_cast<std::uint16_t>(k), static_cast<std::uint16_t>(origin),
                            masked.values});
    }
    inbox[static_cast<std::size_t>(k)].push_back(std::move(masked));
  }

  // client k aggregates block k and broadcasts it
  std::vector<double> result(len, 0.0);
  for (int k = 0; k < c; ++k) {
    const auto& received = inbox[static_cast<std::size_t>(k)];
    if (received.empty()) continue;  // surplus client, nothing to aggregate
    const auto averaged = aggregate_masked(received, c);
    const std::size_t offset = blocks[0][static_cast<std::size_t>(k)].offset;
    std::copy(averaged.begin(), averaged.end(), result.begin() + static_cast<std::ptrdiff_t>(offset));
    if (trace != nullptr) {
      for (int dest = 0; dest < c; ++dest) {
        if (dest == k) continue;
        trace->append(Message{round, static_cast<std::uint16_t>(k), static_cast<std::uint16_t>(k),
                              averaged});
      }
    }
  }
  return result;
}

}  // namespace fedtraj::secagg
