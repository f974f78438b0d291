#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rubato/error.hpp"
#include "rubato/midi.hpp"

namespace rubato::tok {

RUBATO_DEFINE_ERROR(EmptyPiece);

// Token id outside the expected range for its frame slot.
class SlotViolation : public Error {
public:
    SlotViolation(const std::string& what, size_t position)
        : Error("SlotViolation", what), position(position) {}
    size_t position;
};

using TokenId = int32_t;
using TokenSeq = std::vector<TokenId>;

// Fixed vocabulary layout. Frozen so shard files stay portable.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kMask = 1;
inline constexpr TokenId kBos = 2;
inline constexpr TokenId kEos = 3;
inline constexpr TokenId kPlay = 4; // reserved, never emitted

inline constexpr TokenId kPitchBase = 5;
inline constexpr int kPitchCount = 128;
inline constexpr TokenId kVelocityBase = 133;
inline constexpr int kVelocityCount = 128;
inline constexpr TokenId kTimingBase = 261;
inline constexpr int kTimingCount = 5000;
inline constexpr TokenId kPedalBase = 5261;
inline constexpr int kPedalCount = 128;
inline constexpr int kVocabSize = 5389;

inline constexpr int kTokensPerNote = 8;
inline constexpr int kMaxIoiMs = 4990;
inline constexpr int kMaxDurationMs = 4999;

enum class TokenKind { special, pitch, velocity, timing, pedal };

struct TokenInfo {
    TokenKind kind;
    int value; // slot value for non-special kinds, the id itself for specials
    bool operator==(const TokenInfo&) const = default;
};

TokenInfo describe(TokenId id); // throws SlotViolation on ids outside [0, 5389)

inline TokenId pitch_token(int pitch) { return kPitchBase + pitch; }
inline TokenId velocity_token(int velocity) { return kVelocityBase + velocity; }
inline TokenId timing_token(int ms) { return kTimingBase + ms; }
inline TokenId pedal_token(int value) { return kPedalBase + value; }

// Inclusive legal id range for a frame slot (0 = Pitch, 1 = IOI, 2 = Velocity,
// 3 = Duration, 4..7 = Pedal). The IOI slot tops out at value 4990.
std::pair<TokenId, TokenId> slot_range(int slot);
bool slot_valid(int slot, TokenId id);

// Checks body length divisibility and every slot; throws LengthMismatch or
// SlotViolation with the offending position.
void validate_body(std::span<const TokenId> body);

// round-half-up millisecond quantization
int quantize_ms(double ms);

TokenSeq encode(const midi::NormalizedPiece& piece);

// Inverse of encode. Frame order is preserved exactly (no re-sorting) so the
// output stays index-aligned with the score it was generated from. A leading
// BOS and trailing EOS are tolerated and stripped.
midi::NormalizedPiece decode(std::span<const TokenId> seq);

struct PretrainExample {
    TokenSeq encoder_input;            // corrupted body
    TokenSeq decoder_target;           // BOS + original body + EOS
    std::vector<uint8_t> loss_mask;    // per target position, true at masked sources
};

PretrainExample corrupt_for_pretraining(std::span<const TokenId> seq, double ratio,
                                        uint64_t seed);

// loss_mask is true over the performance body (BOS and EOS untrained).
PretrainExample build_sft_example(std::span<const TokenId> score,
                                  std::span<const TokenId> perf);

} // namespace rubato::tok
