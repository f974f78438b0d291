#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rubato/error.hpp"
#include "rubato/midi.hpp"
#include "rubato/tokenizer.hpp"

namespace rubato::corpus {

RUBATO_DEFINE_ERROR(ChecksumMismatch);
RUBATO_DEFINE_ERROR(CorruptShard);

inline constexpr int64_t kMinFileBytes = 7168; // strict: kept only if larger

// Keeps files whose on-disk size is strictly greater than min_bytes.
std::vector<std::string> filter_by_size(std::span<const std::string> files,
                                        int64_t min_bytes = kMinFileBytes);

struct AugmentParams {
    int velocity_delta = 8;        // uniform integer jitter in ±delta
    double timing_fraction = 0.05; // duration and inter-onset gaps scaled by 1 ± p
};

midi::NormalizedPiece augment(const midi::NormalizedPiece& piece, const AugmentParams& params,
                              uint64_t seed);

// FNV-1a 64 over the frozen vocabulary layout; stored in every shard header.
uint64_t vocabulary_checksum();

// Shards split at sequence boundaries only; returns the written paths in
// order. Layout: "PTSH", version byte, checksum u64, sequence count u64,
// per-sequence length table u64 each, then token ids as u16, all little-endian.
std::vector<std::string> write_shards(std::span<const tok::TokenSeq> seqs,
                                      const std::string& path_prefix,
                                      int64_t max_tokens_per_shard);

std::vector<tok::TokenSeq> read_shards(std::span<const std::string> paths);

} // namespace rubato::corpus
