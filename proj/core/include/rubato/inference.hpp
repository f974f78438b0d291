#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rubato/error.hpp"
#include "rubato/model.hpp"
#include "rubato/tokenizer.hpp"

namespace rubato::infer {

RUBATO_DEFINE_ERROR(IllegalLogits);
RUBATO_DEFINE_ERROR(ModelFailure);
RUBATO_DEFINE_ERROR(InvalidSampling);
RUBATO_DEFINE_ERROR(InvalidBlock);

class PerformanceModel {
public:
    virtual ~PerformanceModel() = default;
    // Next-token logits over the full vocabulary, given the encoder window
    // and the decoder prefix (BOS + generated tokens so far).
    virtual std::vector<float> next_logits(std::span<const tok::TokenId> encoder_tokens,
                                           std::span<const tok::TokenId> decoder_prefix) const = 0;
};

// Mechanical baseline: copies score timing, velocity 64, pedals 0. Emitted as
// one-hot logits (0 at the choice, -1e9 elsewhere), so any sampling scheme
// reproduces it exactly. Context-free: the choice depends only on the current
// frame of the encoder window, which makes block-wise and single-pass
// generation provably identical.
class StubPerformer : public PerformanceModel {
public:
    std::vector<float> next_logits(std::span<const tok::TokenId> encoder_tokens,
                                   std::span<const tok::TokenId> decoder_prefix) const override;
};

class TransformerPerformer : public PerformanceModel {
public:
    explicit TransformerPerformer(model::Transformer<float> model);
    std::vector<float> next_logits(std::span<const tok::TokenId> encoder_tokens,
                                   std::span<const tok::TokenId> decoder_prefix) const override;

private:
    model::Transformer<float> model_;
};

struct SamplingConfig {
    double temperature = 1.0; // 0 selects greedy argmax
    int top_k = 32;
    uint64_t seed = 0;
};

struct BlockConfig {
    int window = 4096;
    int stride = 2048;
    int tail_drop_notes = 2; // whole frames, preserving the 8-token grammar
    void validate() const;   // throws InvalidBlock
};

// One frame per score note; pitch slots are forced to the score pitch without
// consulting the model; other slots are sampled from the slot's legal id
// range only.
tok::TokenSeq constrained_generate(const PerformanceModel& model,
                                   std::span<const tok::TokenId> score,
                                   const SamplingConfig& sampling);

// Overlapped sliding-window generation: window-sized encoder views advanced
// by stride, the previous block's overlap minus the dropped tail reused as
// the decoder prompt.
tok::TokenSeq blockwise_generate(const PerformanceModel& model,
                                 std::span<const tok::TokenId> score,
                                 const BlockConfig& block, const SamplingConfig& sampling);

} // namespace rubato::infer
