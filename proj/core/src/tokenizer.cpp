#include "rubato/tokenizer.hpp"

#include <algorithm>
#include <cmath>

#include "rubato/rng.hpp"

namespace rubato::tok {

static_assert(kPitchBase + kPitchCount == kVelocityBase);
static_assert(kVelocityBase + kVelocityCount == kTimingBase);
static_assert(kTimingBase + kTimingCount == kPedalBase);
static_assert(kPedalBase + kPedalCount == kVocabSize);

TokenInfo describe(TokenId id) {
    if (id < 0 || id >= kVocabSize) {
        throw SlotViolation("token id " + std::to_string(id) + " outside the vocabulary", 0);
    }
    if (id < kPitchBase) return TokenInfo{TokenKind::special, id};
    if (id < kVelocityBase) return TokenInfo{TokenKind::pitch, id - kPitchBase};
    if (id < kTimingBase) return TokenInfo{TokenKind::velocity, id - kVelocityBase};
    if (id < kPedalBase) return TokenInfo{TokenKind::timing, id - kTimingBase};
    return TokenInfo{TokenKind::pedal, id - kPedalBase};
}

std::pair<TokenId, TokenId> slot_range(int slot) {
    switch (slot) {
    case 0: return {kPitchBase, kPitchBase + kPitchCount - 1};
    case 1: return {kTimingBase, kTimingBase + kMaxIoiMs};
    case 2: return {kVelocityBase, kVelocityBase + kVelocityCount - 1};
    case 3: return {kTimingBase, kTimingBase + kMaxDurationMs};
    default: return {kPedalBase, kPedalBase + kPedalCount - 1};
    }
}

bool slot_valid(int slot, TokenId id) {
    auto [lo, hi] = slot_range(slot);
    return id >= lo && id <= hi;
}

namespace {

const char* slot_kind_name(int slot) {
    switch (slot) {
    case 0: return "PITCH";
    case 1: return "TIMING(IOI)";
    case 2: return "VELOCITY";
    case 3: return "TIMING(Duration)";
    default: return "PEDAL";
    }
}

// Strips an optional leading BOS and trailing EOS.
std::span<const TokenId> strip_frame(std::span<const TokenId> seq) {
    if (!seq.empty() && seq.front() == kBos) seq = seq.subspan(1);
    if (!seq.empty() && seq.back() == kEos) seq = seq.first(seq.size() - 1);
    return seq;
}

} // namespace

void validate_body(std::span<const TokenId> body) {
    if (body.size() % kTokensPerNote != 0) {
        throw LengthMismatch("token body length " + std::to_string(body.size()) +
                             " is not a multiple of 8");
    }
    for (size_t i = 0; i < body.size(); ++i) {
        int slot = static_cast<int>(i % kTokensPerNote);
        if (!slot_valid(slot, body[i])) {
            throw SlotViolation("token id " + std::to_string(body[i]) + " at position " +
                                    std::to_string(i) + " is not a valid " +
                                    slot_kind_name(slot) + " token",
                                i);
        }
    }
}

int quantize_ms(double ms) {
    return static_cast<int>(std::floor(ms + 0.5));
}

namespace {

int clamp_int(int v, int lo, int hi) { return std::min(std::max(v, lo), hi); }

// Pedal sampling window: gap to the next onset, or the note's own duration
// for the final note.
double pedal_window(const midi::NormalizedPiece& piece, size_t i) {
    if (i + 1 < piece.notes.size()) {
        return piece.notes[i + 1].onset_ms - piece.notes[i].onset_ms;
    }
    return piece.notes[i].duration_ms;
}

} // namespace

TokenSeq encode(const midi::NormalizedPiece& piece) {
    if (piece.notes.empty()) throw EmptyPiece("cannot encode a piece with zero notes");
    TokenSeq out;
    out.reserve(piece.notes.size() * kTokensPerNote);
    for (size_t i = 0; i < piece.notes.size(); ++i) {
        const midi::NormalizedNote& n = piece.notes[i];
        int ioi = 0;
        if (i > 0) {
            ioi = clamp_int(quantize_ms(n.onset_ms - piece.notes[i - 1].onset_ms), 0, kMaxIoiMs);
        }
        int duration = clamp_int(quantize_ms(n.duration_ms), 0, kMaxDurationMs);
        out.push_back(pitch_token(n.pitch));
        out.push_back(timing_token(ioi));
        out.push_back(velocity_token(n.velocity));
        out.push_back(timing_token(duration));
        double window = pedal_window(piece, i);
        for (int k = 1; k <= 4; ++k) {
            double t = n.onset_ms + double(k) * window / 4.0;
            out.push_back(pedal_token(piece.pedal.value_at(t)));
        }
    }
    return out;
}

midi::NormalizedPiece decode(std::span<const TokenId> seq) {
    std::span<const TokenId> body = strip_frame(seq);
    validate_body(body);

    midi::NormalizedPiece out;
    size_t frames = body.size() / kTokensPerNote;
    out.notes.reserve(frames);
    double onset = 0.0;
    for (size_t f = 0; f < frames; ++f) {
        const TokenId* t = body.data() + f * kTokensPerNote;
        if (f > 0) onset += double(t[1] - kTimingBase);
        out.notes.push_back(midi::NormalizedNote{
            static_cast<uint8_t>(t[0] - kPitchBase),
            static_cast<uint8_t>(t[2] - kVelocityBase),
            onset,
            double(t[3] - kTimingBase)});
    }
    // Pedal curve rebuilt through the sample points; each value holds until
    // the next sample. Sample times are non-decreasing across frames because
    // a non-final note's window ends exactly at the next onset.
    for (size_t f = 0; f < frames; ++f) {
        const TokenId* t = body.data() + f * kTokensPerNote;
        double window = pedal_window(out, f);
        for (int k = 1; k <= 4; ++k) {
            double time = out.notes[f].onset_ms + double(k) * window / 4.0;
            out.pedal.add_point(time, static_cast<uint8_t>(t[4 + k - 1] - kPedalBase));
        }
    }
    return out;
}

PretrainExample corrupt_for_pretraining(std::span<const TokenId> seq, double ratio,
                                        uint64_t seed) {
    validate_body(seq);
    if (seq.empty()) throw EmptyPiece("cannot corrupt an empty sequence");

    size_t len = seq.size();
    size_t n_mask = static_cast<size_t>(std::floor(ratio * double(len)));

    // partial Fisher-Yates: first n_mask entries are a uniform distinct sample
    std::vector<size_t> order(len);
    for (size_t i = 0; i < len; ++i) order[i] = i;
    Rng rng(seed);
    for (size_t i = 0; i < n_mask; ++i) {
        size_t j = i + static_cast<size_t>(rng.bounded(len - i));
        std::swap(order[i], order[j]);
    }

    PretrainExample out;
    out.encoder_input.assign(seq.begin(), seq.end());
    for (size_t i = 0; i < n_mask; ++i) out.encoder_input[order[i]] = kMask;

    out.decoder_target.reserve(len + 2);
    out.decoder_target.push_back(kBos);
    out.decoder_target.insert(out.decoder_target.end(), seq.begin(), seq.end());
    out.decoder_target.push_back(kEos);

    out.loss_mask.assign(len + 2, 0);
    for (size_t i = 0; i < n_mask; ++i) out.loss_mask[order[i] + 1] = 1;
    return out;
}

PretrainExample build_sft_example(std::span<const TokenId> score,
                                  std::span<const TokenId> perf) {
    validate_body(score);
    validate_body(perf);
    if (score.size() != perf.size()) {
        throw LengthMismatch("score has " + std::to_string(score.size() / kTokensPerNote) +
                             " notes, performance has " +
                             std::to_string(perf.size() / kTokensPerNote));
    }
    size_t frames = score.size() / kTokensPerNote;
    for (size_t f = 0; f < frames; ++f) {
        if (score[f * kTokensPerNote] != perf[f * kTokensPerNote]) {
            throw PitchMismatch("pitch disagreement at frame " + std::to_string(f));
        }
    }

    PretrainExample out;
    out.encoder_input.assign(score.begin(), score.end());
    out.decoder_target.reserve(perf.size() + 2);
    out.decoder_target.push_back(kBos);
    out.decoder_target.insert(out.decoder_target.end(), perf.begin(), perf.end());
    out.decoder_target.push_back(kEos);
    out.loss_mask.assign(perf.size() + 2, 1);
    out.loss_mask.front() = 0;
    out.loss_mask.back() = 0;
    return out;
}

} // namespace rubato::tok
