#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "generators.hpp"
#include "rubato/corpus.hpp"
#include "rubato/rng.hpp"
#include "rubato/tokenizer.hpp"

using namespace rubato;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path dir;
    TempDir() {
        dir = fs::temp_directory_path() / "rubato_corpus_test";
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~TempDir() { fs::remove_all(dir); }
    std::string file(const char* name) const { return (dir / name).string(); }
};

void write_bytes(const std::string& path, size_t n) {
    std::ofstream f(path, std::ios::binary);
    std::vector<char> buf(n, 'x');
    f.write(buf.data(), std::streamsize(n));
}

void patch_byte(const std::string& path, size_t offset, uint8_t value) {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(std::streamoff(offset));
    f.put(char(value));
}

} // namespace

TEST_CASE("filter_by_size keeps only files strictly larger than 7 KB") {
    TempDir tmp;
    write_bytes(tmp.file("big.mid"), 8000);
    write_bytes(tmp.file("edge.mid"), 7168);
    write_bytes(tmp.file("above.mid"), 7169);
    std::vector<std::string> files = {tmp.file("big.mid"), tmp.file("edge.mid"),
                                      tmp.file("above.mid"), tmp.file("missing.mid")};

    std::vector<std::string> kept = corpus::filter_by_size(files, corpus::kMinFileBytes);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0] == tmp.file("big.mid"));
    CHECK(kept[1] == tmp.file("above.mid"));

    CHECK(corpus::filter_by_size({}, corpus::kMinFileBytes).empty());

    // Monotone: raising the threshold never adds files.
    std::vector<std::string> stricter = corpus::filter_by_size(files, 7968);
    CHECK(stricter.size() <= kept.size());
}

TEST_CASE("augment with zero parameters is the identity") {
    Rng rng(900);
    midi::NormalizedPiece piece = testgen::random_piece(rng, 20);
    corpus::AugmentParams zero;
    zero.velocity_delta = 0;
    zero.timing_fraction = 0.0;
    CHECK(corpus::augment(piece, zero, 5) == piece);
}

TEST_CASE("augment is deterministic per seed and respects clamps") {
    Rng rng(901);
    midi::NormalizedPiece piece = testgen::random_piece(rng, 30);
    corpus::AugmentParams params; // defaults: delta 8, fraction 0.05

    midi::NormalizedPiece a = corpus::augment(piece, params, 77);
    midi::NormalizedPiece b = corpus::augment(piece, params, 77);
    CHECK(a == b);
    CHECK(corpus::augment(piece, params, 78) != a);

    midi::NormalizedPiece loud;
    loud.notes.push_back({60, 125, 0.0, 100.0});
    loud.notes.push_back({62, 2, 50.0, 100.0});
    for (uint64_t seed = 0; seed < 200; ++seed) {
        midi::NormalizedPiece out = corpus::augment(loud, params, seed);
        REQUIRE(out.notes[0].velocity <= 127);
        REQUIRE(out.notes[0].velocity >= 1);
        REQUIRE(out.notes[1].velocity >= 1);
        for (const auto& n : out.notes) REQUIRE(n.duration_ms >= 1.0);
    }
}

TEST_CASE("augmented pieces still encode to slot-valid sequences") {
    Rng rng(902);
    corpus::AugmentParams params;
    for (int iter = 0; iter < 20; ++iter) {
        midi::NormalizedPiece piece = testgen::random_piece(rng, int(rng.range(1, 30)));
        midi::NormalizedPiece out = corpus::augment(piece, params, uint64_t(iter));
        REQUIRE(out.notes.size() == piece.notes.size());
        CHECK_NOTHROW(tok::validate_body(tok::encode(out)));
        for (size_t i = 1; i < out.notes.size(); ++i) {
            REQUIRE(out.notes[i].onset_ms >= out.notes[i - 1].onset_ms);
        }
    }
}

TEST_CASE("the vocabulary checksum is stable and nonzero") {
    CHECK(corpus::vocabulary_checksum() != 0);
    CHECK(corpus::vocabulary_checksum() == corpus::vocabulary_checksum());
}

TEST_CASE("shards round-trip sequences in order") {
    TempDir tmp;
    Rng rng(903);
    std::vector<tok::TokenSeq> seqs = {testgen::random_score_tokens(rng, 5),
                                       testgen::random_score_tokens(rng, 9),
                                       testgen::random_score_tokens(rng, 2)};

    std::vector<std::string> one = corpus::write_shards(seqs, tmp.file("train"), 1 << 20);
    REQUIRE(one.size() == 1);
    CHECK(one[0] == tmp.file("train") + std::string(".0000.ptsh"));
    CHECK(corpus::read_shards(one) == seqs);

    // A limit below the total token count forces a sequence-boundary split.
    std::vector<std::string> split = corpus::write_shards(seqs, tmp.file("split"), 60);
    REQUIRE(split.size() >= 2);
    CHECK(corpus::read_shards(split) == seqs);

    std::vector<std::string> empty =
        corpus::write_shards(std::vector<tok::TokenSeq>{}, tmp.file("none"), 100);
    REQUIRE(empty.size() == 1);
    CHECK(corpus::read_shards(empty).empty());
}

TEST_CASE("shard corruption is detected on read") {
    TempDir tmp;
    Rng rng(904);
    std::vector<tok::TokenSeq> seqs = {testgen::random_score_tokens(rng, 4)};
    std::vector<std::string> paths = corpus::write_shards(seqs, tmp.file("c"), 1 << 20);
    REQUIRE(paths.size() == 1);

    // Vocabulary checksum lives at bytes [5, 13).
    std::string drifted = paths[0];
    patch_byte(drifted, 6, 0xEE);
    CHECK_THROWS_AS(corpus::read_shards(paths), corpus::ChecksumMismatch);

    corpus::write_shards(seqs, tmp.file("c"), 1 << 20);
    patch_byte(paths[0], 0, 'X'); // magic
    CHECK_THROWS_AS(corpus::read_shards(paths), corpus::CorruptShard);

    corpus::write_shards(seqs, tmp.file("c"), 1 << 20);
    patch_byte(paths[0], 4, 9); // unknown version
    CHECK_THROWS_AS(corpus::read_shards(paths), corpus::CorruptShard);

    // Payload id pushed outside the vocabulary: 5389 = 0x150D little-endian.
    corpus::write_shards(seqs, tmp.file("c"), 1 << 20);
    size_t size = size_t(fs::file_size(paths[0]));
    patch_byte(paths[0], size - 2, 0x0D);
    patch_byte(paths[0], size - 1, 0x15);
    CHECK_THROWS_AS(corpus::read_shards(paths), corpus::CorruptShard);

    // Truncation.
    corpus::write_shards(seqs, tmp.file("c"), 1 << 20);
    std::string data;
    {
        std::ifstream in(paths[0], std::ios::binary);
        data.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    std::ofstream(paths[0], std::ios::binary | std::ios::trunc)
        << data.substr(0, data.size() - 3);
    CHECK_THROWS_AS(corpus::read_shards(paths), corpus::CorruptShard);

    CHECK_THROWS_AS(corpus::read_shards(std::vector<std::string>{tmp.file("nope.ptsh")}),
                    corpus::CorruptShard);
}

TEST_CASE("write_shards refuses out-of-vocabulary ids") {
    TempDir tmp;
    std::vector<tok::TokenSeq> bad = {{tok::TokenId(tok::kVocabSize)}};
    CHECK_THROWS_AS(corpus::write_shards(bad, tmp.file("bad"), 100), corpus::CorruptShard);
}
