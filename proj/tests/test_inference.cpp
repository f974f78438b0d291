#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "generators.hpp"
#include "rubato/inference.hpp"
#include "rubato/model.hpp"
#include "rubato/rng.hpp"
#include "rubato/tokenizer.hpp"

using namespace rubato;

namespace {

// Stub wrapper that records every decoder prefix length it is queried with.
class CountingStub : public infer::StubPerformer {
public:
    std::vector<float> next_logits(std::span<const tok::TokenId> encoder_tokens,
                                   std::span<const tok::TokenId> decoder_prefix) const override {
        prefix_lengths.push_back(decoder_prefix.size());
        return infer::StubPerformer::next_logits(encoder_tokens, decoder_prefix);
    }
    mutable std::vector<size_t> prefix_lengths;
};

class ConstantModel : public infer::PerformanceModel {
public:
    std::vector<float> next_logits(std::span<const tok::TokenId>,
                                   std::span<const tok::TokenId>) const override {
        return std::vector<float>(size_t(tok::kVocabSize), 0.0f);
    }
};

class NanModel : public infer::PerformanceModel {
public:
    std::vector<float> next_logits(std::span<const tok::TokenId>,
                                   std::span<const tok::TokenId>) const override {
        return std::vector<float>(size_t(tok::kVocabSize),
                                  std::numeric_limits<float>::quiet_NaN());
    }
};

std::vector<int> pitch_values(const tok::TokenSeq& seq) {
    std::vector<int> out;
    for (size_t i = 0; i < seq.size(); i += 8) out.push_back(seq[i] - tok::kPitchBase);
    return out;
}

} // namespace

TEST_CASE("the stub copies score timing and fixes velocity at 64") {
    Rng rng(101);
    tok::TokenSeq score = testgen::random_score_tokens(rng, 40);
    infer::StubPerformer stub;
    tok::TokenSeq out = infer::constrained_generate(stub, score, {});

    REQUIRE(out.size() == score.size());
    CHECK_NOTHROW(tok::validate_body(out));
    for (size_t f = 0; f < score.size() / 8; ++f) {
        REQUIRE(out[f * 8 + 0] == score[f * 8 + 0]); // pitch forced from the score
        REQUIRE(out[f * 8 + 1] == score[f * 8 + 1]); // IOI copied
        REQUIRE(out[f * 8 + 2] == tok::velocity_token(64));
        REQUIRE(out[f * 8 + 3] == score[f * 8 + 3]); // duration copied
        for (int k = 4; k < 8; ++k) REQUIRE(out[f * 8 + k] == tok::pedal_token(0));
    }
}

TEST_CASE("generation is deterministic for a fixed model and seed") {
    Rng rng(102);
    tok::TokenSeq score = testgen::random_score_tokens(rng, 25);
    infer::StubPerformer stub;

    infer::SamplingConfig greedy;
    greedy.temperature = 0.0;
    CHECK(infer::constrained_generate(stub, score, greedy) ==
          infer::constrained_generate(stub, score, greedy));

    infer::SamplingConfig sampled;
    sampled.seed = 7;
    CHECK(infer::constrained_generate(stub, score, sampled) ==
          infer::constrained_generate(stub, score, sampled));
}

TEST_CASE("greedy sampling breaks logit ties toward the lowest id") {
    Rng rng(103);
    tok::TokenSeq score = testgen::random_score_tokens(rng, 3);
    ConstantModel flat;
    infer::SamplingConfig greedy;
    greedy.temperature = 0.0;
    tok::TokenSeq out = infer::constrained_generate(flat, score, greedy);
    for (size_t f = 0; f < out.size() / 8; ++f) {
        CHECK(out[f * 8 + 1] == tok::kTimingBase);
        CHECK(out[f * 8 + 2] == tok::kVelocityBase);
        CHECK(out[f * 8 + 3] == tok::kTimingBase);
        CHECK(out[f * 8 + 4] == tok::kPedalBase);
    }

    // top_k 1 at temperature 1 collapses to the same greedy choice.
    infer::SamplingConfig topk1;
    topk1.top_k = 1;
    CHECK(infer::constrained_generate(flat, score, topk1) == out);
}

TEST_CASE("an untrained transformer still emits slot-legal pitch-faithful output") {
    auto m = model::Transformer<float>::init(model::ModelConfig::toy(), 104);
    infer::TransformerPerformer perf(std::move(m));
    Rng rng(105);
    tok::TokenSeq score = testgen::random_score_tokens(rng, 6);

    infer::SamplingConfig sampling;
    sampling.top_k = tok::kVocabSize;
    sampling.seed = 3;
    tok::TokenSeq out = infer::constrained_generate(perf, score, sampling);

    CHECK_NOTHROW(tok::validate_body(out));
    CHECK(pitch_values(out) == pitch_values(score));
    for (size_t f = 0; f < out.size() / 8; ++f) {
        REQUIRE(out[f * 8 + 1] <= tok::timing_token(tok::kMaxIoiMs));
    }
}

TEST_CASE("blockwise equals single-pass for a context-free model") {
    infer::StubPerformer stub;
    infer::SamplingConfig sampling;
    infer::BlockConfig block;

    Rng rng(106);
    for (int notes : {300, 700, 750}) {
        tok::TokenSeq score = testgen::random_score_tokens(rng, notes);
        tok::TokenSeq single = infer::constrained_generate(stub, score, sampling);
        tok::TokenSeq blocked = infer::blockwise_generate(stub, score, block, sampling);
        REQUIRE(single == blocked);
        CHECK(pitch_values(blocked) == pitch_values(score));
    }
}

TEST_CASE("a 6000-token score runs in exactly two blocks with a 2032-token prompt") {
    CountingStub stub;
    infer::SamplingConfig sampling;
    infer::BlockConfig block;
    Rng rng(107);
    tok::TokenSeq score = testgen::random_score_tokens(rng, 750);

    tok::TokenSeq out = infer::blockwise_generate(stub, score, block, sampling);
    REQUIRE(out.size() == score.size());

    // Prefix lengths rise within a block and reset once at the block seam.
    // The second block resumes from BOS + 2032 prompt tokens + 1 forced pitch.
    int drops = 0;
    size_t resume = 0;
    for (size_t i = 1; i < stub.prefix_lengths.size(); ++i) {
        if (stub.prefix_lengths[i] < stub.prefix_lengths[i - 1]) {
            ++drops;
            resume = stub.prefix_lengths[i];
        }
    }
    CHECK(drops == 1);
    CHECK(resume == 1 + (block.stride - block.tail_drop_notes * 8) + 1);
}

TEST_CASE("block configuration is validated") {
    infer::BlockConfig ok;
    CHECK_NOTHROW(ok.validate());

    infer::BlockConfig bad = ok;
    bad.window = 100; // not a multiple of 8
    CHECK_THROWS_AS(bad.validate(), infer::InvalidBlock);

    bad = ok;
    bad.stride = bad.window;
    CHECK_THROWS_AS(bad.validate(), infer::InvalidBlock);

    bad = ok;
    bad.tail_drop_notes = (bad.window - bad.stride) / 8;
    CHECK_THROWS_AS(bad.validate(), infer::InvalidBlock);
}

TEST_CASE("sampling configuration is validated") {
    Rng rng(108);
    tok::TokenSeq score = testgen::random_score_tokens(rng, 2);
    infer::StubPerformer stub;

    infer::SamplingConfig bad;
    bad.temperature = -1.0;
    CHECK_THROWS_AS(infer::constrained_generate(stub, score, bad), infer::InvalidSampling);
    bad = {};
    bad.top_k = 0;
    CHECK_THROWS_AS(infer::constrained_generate(stub, score, bad), infer::InvalidSampling);
}

TEST_CASE("non-finite logits are rejected") {
    Rng rng(109);
    tok::TokenSeq score = testgen::random_score_tokens(rng, 2);
    NanModel nan;
    CHECK_THROWS_AS(infer::constrained_generate(nan, score, {}), infer::IllegalLogits);
}

TEST_CASE("transformer failures surface as ModelFailure") {
    model::ModelConfig tiny = model::ModelConfig::toy();
    tiny.max_seq_len = 32;
    infer::TransformerPerformer perf(model::Transformer<float>::init(tiny, 110));
    Rng rng(111);
    tok::TokenSeq score = testgen::random_score_tokens(rng, 5); // 40 tokens > 32
    CHECK_THROWS_AS(infer::constrained_generate(perf, score, {}), infer::ModelFailure);
}
