#pragma once

#include <cstdint>
#include <vector>

#include "rubato/error.hpp"
#include "rubato/midi.hpp"

namespace rubato::tempo {

// Piecewise-constant BPM curve. Ticks strictly increase, the first breakpoint
// sits at tick 0, and every bpm lies within [20, 400]. BPM values are carried
// as their microseconds-per-quarter quantization so that tick conversion and
// the emitted tempo meta events agree exactly.
struct TempoCurve {
    struct Breakpoint {
        int64_t tick;
        double bpm;
        bool operator==(const Breakpoint&) const = default;
    };
    std::vector<Breakpoint> points;
    int ppq = midi::kDefaultPpq;
};

inline constexpr double kMinBpm = 20.0;
inline constexpr double kMaxBpm = 400.0;

// Index-aligned score/performance pair; the one-to-one correspondence is
// guaranteed upstream by pitch-constrained generation.
struct AlignedPair {
    midi::NormalizedPiece score;
    midi::NormalizedPiece perf;

    // throws LengthMismatch / PitchMismatch
    static AlignedPair make(midi::NormalizedPiece score, midi::NormalizedPiece perf);
};

// Local bpm per consecutive pair of distinct score onsets (chords collapse to
// one anchor); fewer than 2 distinct onsets yields the constant 120 curve.
TempoCurve estimate_tempo_curve(const AlignedPair& pair, int ppq = midi::kDefaultPpq);

// Inverse of the curve's piecewise-linear tick-to-ms integration,
// round-half-up at the final tick only.
int64_t ms_to_ticks(double t_ms, const TempoCurve& curve);

// Pitch from the score, velocity from the performance, every timestamp
// converted through the estimated curve, tempo meta events embedded.
midi::MidiPiece expressive_tempo_map(const AlignedPair& pair, int ppq = midi::kDefaultPpq);

} // namespace rubato::tempo
