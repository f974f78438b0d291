#include "rubato/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rubato/rng.hpp"

namespace rubato::infer {

// ---------------------------------------------------------------------------
// stub performer
// ---------------------------------------------------------------------------

std::vector<float> StubPerformer::next_logits(std::span<const tok::TokenId> encoder_tokens,
                                              std::span<const tok::TokenId> decoder_prefix) const {
    if (decoder_prefix.empty()) {
        throw ModelFailure("stub needs a decoder prefix starting at BOS");
    }
    // Position of the token being produced, counted from after BOS.
    size_t pos = decoder_prefix.size() - 1;
    size_t frame = pos / tok::kTokensPerNote;
    int slot = int(pos % tok::kTokensPerNote);
    if ((frame + 1) * tok::kTokensPerNote > encoder_tokens.size()) {
        tok::TokenId choice = tok::kEos;
        std::vector<float> logits(tok::kVocabSize, -1e9f);
        logits[size_t(choice)] = 0.0f;
        return logits;
    }
    const tok::TokenId* score_frame = encoder_tokens.data() + frame * tok::kTokensPerNote;
    tok::TokenId choice;
    switch (slot) {
    case 0: choice = score_frame[0]; break;                  // pitch copied
    case 1: choice = score_frame[1]; break;                  // IOI copied
    case 2: choice = tok::velocity_token(64); break;         // flat dynamics
    case 3: choice = score_frame[3]; break;                  // duration copied
    default: choice = tok::pedal_token(0); break;            // no pedal
    }
    std::vector<float> logits(tok::kVocabSize, -1e9f);
    logits[size_t(choice)] = 0.0f;
    return logits;
}

// ---------------------------------------------------------------------------
// transformer performer
// ---------------------------------------------------------------------------

TransformerPerformer::TransformerPerformer(model::Transformer<float> model)
    : model_(std::move(model)) {}

std::vector<float> TransformerPerformer::next_logits(
    std::span<const tok::TokenId> encoder_tokens,
    std::span<const tok::TokenId> decoder_prefix) const {
    std::vector<float> logits;
    try {
        logits = model_.forward(encoder_tokens, decoder_prefix);
    } catch (const Error& e) {
        throw ModelFailure(std::string("transformer forward failed: ") + e.what());
    }
    size_t v = size_t(model_.config().vocab_size);
    std::vector<float> last(logits.end() - long(v), logits.end());
    return last;
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

void BlockConfig::validate() const {
    if (window <= 0 || window % 8 != 0 || stride <= 0 || stride % 8 != 0) {
        throw InvalidBlock("window and stride must be positive multiples of 8");
    }
    if (stride >= window) throw InvalidBlock("stride must be smaller than the window");
    if (tail_drop_notes < 0 || tail_drop_notes * 8 >= window - stride) {
        throw InvalidBlock("tail drop must leave part of the overlap as context");
    }
}

namespace {

void validate_sampling(const SamplingConfig& s) {
    if (!std::isfinite(s.temperature) || s.temperature < 0.0) {
        throw InvalidSampling("temperature must be finite and >= 0");
    }
    if (s.top_k < 1 || s.top_k > tok::kVocabSize) {
        throw InvalidSampling("top_k must be in [1, vocab size]");
    }
}

// Temperature / top-k sampling restricted to [lo, hi]; temperature 0 is a
// greedy argmax with lowest-id tie break.
tok::TokenId sample_slot(const std::vector<float>& logits, tok::TokenId lo, tok::TokenId hi,
                         const SamplingConfig& cfg, Rng& rng) {
    if (logits.size() != size_t(tok::kVocabSize)) {
        throw IllegalLogits("model returned " + std::to_string(logits.size()) +
                            " logits, expected 5389");
    }
    for (tok::TokenId id = lo; id <= hi; ++id) {
        if (!std::isfinite(logits[size_t(id)])) {
            throw IllegalLogits("non-finite logit at id " + std::to_string(id));
        }
    }

    if (cfg.temperature == 0.0) {
        tok::TokenId best = lo;
        for (tok::TokenId id = lo + 1; id <= hi; ++id) {
            if (logits[size_t(id)] > logits[size_t(best)]) best = id;
        }
        return best;
    }

    // ids sorted by descending logit, ascending id on ties
    std::vector<tok::TokenId> ids(size_t(hi - lo + 1));
    std::iota(ids.begin(), ids.end(), lo);
    std::stable_sort(ids.begin(), ids.end(), [&](tok::TokenId a, tok::TokenId b) {
        return logits[size_t(a)] > logits[size_t(b)];
    });
    size_t k = std::min(size_t(cfg.top_k), ids.size());

    double maxv = double(logits[size_t(ids[0])]);
    std::vector<double> weights(k);
    double total = 0.0;
    for (size_t i = 0; i < k; ++i) {
        weights[i] = std::exp((double(logits[size_t(ids[i])]) - maxv) / cfg.temperature);
        total += weights[i];
    }
    double draw = rng.uniform() * total;
    double acc = 0.0;
    for (size_t i = 0; i < k; ++i) {
        acc += weights[i];
        if (draw < acc) return ids[i];
    }
    return ids[k - 1];
}

// Continues generation inside one encoder window from an already-accepted
// prompt body until every window frame has a frame in the output.
tok::TokenSeq generate_window(const PerformanceModel& model,
                              std::span<const tok::TokenId> window_tokens,
                              std::span<const tok::TokenId> prompt_body,
                              const SamplingConfig& sampling, Rng& rng) {
    size_t frames = window_tokens.size() / tok::kTokensPerNote;
    tok::TokenSeq prefix;
    prefix.reserve(window_tokens.size() + 1);
    prefix.push_back(tok::kBos);
    prefix.insert(prefix.end(), prompt_body.begin(), prompt_body.end());

    for (size_t f = prompt_body.size() / tok::kTokensPerNote; f < frames; ++f) {
        for (int slot = 0; slot < tok::kTokensPerNote; ++slot) {
            if (slot == 0) {
                // hard pitch constraint: no model call, no sampling
                prefix.push_back(window_tokens[f * tok::kTokensPerNote]);
                continue;
            }
            std::vector<float> logits = model.next_logits(window_tokens, prefix);
            auto [lo, hi] = tok::slot_range(slot);
            prefix.push_back(sample_slot(logits, lo, hi, sampling, rng));
        }
    }
    return tok::TokenSeq(prefix.begin() + 1, prefix.end());
}

} // namespace

tok::TokenSeq constrained_generate(const PerformanceModel& model,
                                   std::span<const tok::TokenId> score,
                                   const SamplingConfig& sampling) {
    validate_sampling(sampling);
    tok::validate_body(score);
    Rng rng(sampling.seed);
    return generate_window(model, score, {}, sampling, rng);
}

tok::TokenSeq blockwise_generate(const PerformanceModel& model,
                                 std::span<const tok::TokenId> score,
                                 const BlockConfig& block, const SamplingConfig& sampling) {
    block.validate();
    validate_sampling(sampling);
    tok::validate_body(score);
    if (score.size() <= size_t(block.window)) {
        return constrained_generate(model, score, sampling);
    }

    Rng rng(sampling.seed);
    size_t window = size_t(block.window);
    size_t stride = size_t(block.stride);
    size_t tail_tokens = size_t(block.tail_drop_notes) * tok::kTokensPerNote;

    tok::TokenSeq out = generate_window(model, score.first(window), {}, sampling, rng);
    size_t offset = stride;
    while (out.size() < score.size()) {
        size_t end = std::min(offset + window, score.size());
        std::span<const tok::TokenId> window_tokens = score.subspan(offset, end - offset);
        // previously generated overlap minus the unstable tail
        size_t keep = out.size() - offset - tail_tokens;
        std::span<const tok::TokenId> prompt(out.data() + offset, keep);
        tok::TokenSeq body = generate_window(model, window_tokens, prompt, sampling, rng);
        out.resize(offset + keep);
        out.insert(out.end(), body.begin() + long(keep), body.end());
        offset += stride;
    }
    return out;
}

} // namespace rubato::infer
