#include "rubato/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "rubato/rng.hpp"

namespace rubato::corpus {

std::vector<std::string> filter_by_size(std::span<const std::string> files,
                                        int64_t min_bytes) {
    std::vector<std::string> kept;
    for (const std::string& f : files) {
        std::error_code ec;
        auto size = std::filesystem::file_size(f, ec);
        if (!ec && static_cast<int64_t>(size) > min_bytes) kept.push_back(f);
    }
    return kept;
}

midi::NormalizedPiece augment(const midi::NormalizedPiece& piece, const AugmentParams& params,
                              uint64_t seed) {
    Rng rng(seed);
    midi::NormalizedPiece out;
    out.pedal = piece.pedal;
    out.notes.reserve(piece.notes.size());

    double onset = piece.notes.empty() ? 0.0 : piece.notes.front().onset_ms;
    for (size_t i = 0; i < piece.notes.size(); ++i) {
        const midi::NormalizedNote& n = piece.notes[i];
        if (i > 0) {
            double gap = n.onset_ms - piece.notes[i - 1].onset_ms;
            double scale = 1.0 + rng.uniform(-params.timing_fraction, params.timing_fraction);
            onset += gap * scale;
        }
        int velocity = int(n.velocity) +
                       int(rng.range(-params.velocity_delta, params.velocity_delta));
        double duration = n.duration_ms *
                          (1.0 + rng.uniform(-params.timing_fraction, params.timing_fraction));
        out.notes.push_back(midi::NormalizedNote{
            n.pitch,
            static_cast<uint8_t>(std::clamp(velocity, 1, 127)),
            onset,
            std::max(1.0, duration)});
    }
    std::sort(out.notes.begin(), out.notes.end(),
              [](const midi::NormalizedNote& a, const midi::NormalizedNote& b) {
                  return std::tie(a.onset_ms, a.pitch) < std::tie(b.onset_ms, b.pitch);
              });
    return out;
}

uint64_t vocabulary_checksum() {
    // layout string frozen with the vocabulary itself
    static const char layout[] =
        "PAD=0,MASK=1,BOS=2,EOS=3,PLAY=4,"
        "PITCH=5+128,VELOCITY=133+128,TIMING=261+5000,PEDAL=5261+128,TOTAL=5389";
    uint64_t h = 0xcbf29ce484222325ull;
    for (const char* c = layout; *c; ++c) {
        h ^= static_cast<uint8_t>(*c);
        h *= 0x100000001b3ull;
    }
    return h;
}

namespace {

constexpr char kMagic[4] = {'P', 'T', 'S', 'H'};
constexpr uint8_t kVersion = 1;

void put_u64le(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(uint8_t((v >> (8 * i)) & 0xFF));
}

uint64_t get_u64le(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

void write_one_shard(const std::string& path, std::span<const tok::TokenSeq> seqs) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    out.push_back(kVersion);
    put_u64le(out, vocabulary_checksum());
    put_u64le(out, seqs.size());
    for (const tok::TokenSeq& s : seqs) put_u64le(out, s.size());
    for (const tok::TokenSeq& s : seqs) {
        for (tok::TokenId id : s) {
            if (id < 0 || id >= tok::kVocabSize) {
                throw CorruptShard("token id " + std::to_string(id) +
                                   " outside the vocabulary cannot be stored");
            }
            out.push_back(uint8_t(id & 0xFF));
            out.push_back(uint8_t((id >> 8) & 0xFF));
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CorruptShard("cannot open shard for writing: " + path);
    f.write(reinterpret_cast<const char*>(out.data()),
            static_cast<std::streamsize>(out.size()));
}

} // namespace

std::vector<std::string> write_shards(std::span<const tok::TokenSeq> seqs,
                                      const std::string& path_prefix,
                                      int64_t max_tokens_per_shard) {
    std::vector<std::string> paths;
    size_t begin = 0;
    int index = 0;
    while (begin < seqs.size() || paths.empty()) {
        size_t end = begin;
        int64_t tokens = 0;
        while (end < seqs.size()) {
            int64_t next = tokens + static_cast<int64_t>(seqs[end].size());
            if (end > begin && next > max_tokens_per_shard) break;
            tokens = next;
            ++end;
        }
        char suffix[32];
        std::snprintf(suffix, sizeof suffix, ".%04d.ptsh", index);
        std::string path = path_prefix + suffix;
        write_one_shard(path, seqs.subspan(begin, end - begin));
        paths.push_back(path);
        begin = end;
        ++index;
        if (seqs.empty()) break;
    }
    return paths;
}

std::vector<tok::TokenSeq> read_shards(std::span<const std::string> paths) {
    std::vector<tok::TokenSeq> out;
    for (const std::string& path : paths) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw CorruptShard("cannot open shard: " + path);
        std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
        if (bytes.size() < 21 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
            throw CorruptShard("bad magic in shard: " + path);
        }
        if (bytes[4] != kVersion) {
            throw CorruptShard("unknown shard version in: " + path);
        }
        uint64_t checksum = get_u64le(bytes.data() + 5);
        if (checksum != vocabulary_checksum()) {
            throw ChecksumMismatch("shard " + path +
                                   " was written under a different vocabulary");
        }
        uint64_t count = get_u64le(bytes.data() + 13);
        size_t pos = 21;
        if (pos + count * 8 > bytes.size()) {
            throw CorruptShard("length table runs past the file end in: " + path);
        }
        std::vector<uint64_t> lengths(count);
        uint64_t total = 0;
        for (uint64_t i = 0; i < count; ++i) {
            lengths[i] = get_u64le(bytes.data() + pos);
            total += lengths[i];
            pos += 8;
        }
        if (pos + total * 2 != bytes.size()) {
            throw CorruptShard("token payload size disagrees with the length table in: " + path);
        }
        for (uint64_t i = 0; i < count; ++i) {
            tok::TokenSeq seq;
            seq.reserve(lengths[i]);
            for (uint64_t t = 0; t < lengths[i]; ++t) {
                uint16_t v = uint16_t(bytes[pos]) | (uint16_t(bytes[pos + 1]) << 8);
                pos += 2;
                if (v >= tok::kVocabSize) {
                    throw CorruptShard("stored token id " + std::to_string(v) +
                                       " outside the vocabulary in: " + path);
                }
                seq.push_back(static_cast<tok::TokenId>(v));
            }
            out.push_back(std::move(seq));
        }
    }
    return out;
}

} // namespace rubato::corpus
