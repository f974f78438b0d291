#pragma once

// Randomized fixtures shared by the unit tests and the acceptance runner.
// All pieces use integer milliseconds inside the clamp ranges so tokenizer
// round-trips are exact.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "rubato/metrics.hpp"
#include "rubato/midi.hpp"
#include "rubato/rng.hpp"
#include "rubato/tokenizer.hpp"

namespace testgen {

// Integer-ms piece starting at onset 0; occasional chords with ascending
// unique pitches; pedal a random integer-time step curve.
inline rubato::midi::NormalizedPiece random_piece(rubato::Rng& rng, int notes) {
    rubato::midi::NormalizedPiece piece;
    int64_t onset = 0;
    int prev_pitch = -1;
    for (int i = 0; i < notes; ++i) {
        int64_t gap = 0;
        if (i > 0) {
            bool chord = rng.bounded(5) == 0 && prev_pitch < 120;
            gap = chord ? 0 : rng.range(1, 1200);
        }
        onset += gap;
        int pitch = gap == 0 && i > 0 ? int(rng.range(prev_pitch + 1, 127))
                                      : int(rng.range(21, 108));
        prev_pitch = pitch;
        rubato::midi::NormalizedNote n;
        n.pitch = uint8_t(pitch);
        n.velocity = uint8_t(rng.range(1, 127));
        n.onset_ms = double(onset);
        n.duration_ms = double(rng.range(1, 4999));
        piece.notes.push_back(n);
    }
    std::sort(piece.notes.begin(), piece.notes.end(), [](const auto& a, const auto& b) {
        return a.onset_ms != b.onset_ms ? a.onset_ms < b.onset_ms : a.pitch < b.pitch;
    });
    int64_t span = onset + 5000;
    int points = int(rng.range(0, 6));
    int64_t t = 0;
    for (int i = 0; i < points; ++i) {
        t += rng.range(1, std::max<int64_t>(1, span / points));
        piece.pedal.add_point(double(t), uint8_t(rng.range(0, 127)));
    }
    return piece;
}

// Slot-valid token body for inference tests.
inline rubato::tok::TokenSeq random_score_tokens(rubato::Rng& rng, int notes) {
    namespace tok = rubato::tok;
    tok::TokenSeq seq;
    seq.reserve(size_t(notes) * 8);
    for (int i = 0; i < notes; ++i) {
        seq.push_back(tok::pitch_token(int(rng.range(21, 108))));
        seq.push_back(tok::timing_token(int(rng.range(0, tok::kMaxIoiMs))));
        seq.push_back(tok::velocity_token(int(rng.range(1, 127))));
        seq.push_back(tok::timing_token(int(rng.range(1, tok::kMaxDurationMs))));
        for (int k = 0; k < 4; ++k) seq.push_back(tok::pedal_token(int(rng.range(0, 127))));
    }
    return seq;
}

// Index-aligned score/performance rubato pair: same pitches, perf gaps are
// score gaps scaled into the implied-bpm range [60, 240].
struct RubatoPair {
    rubato::midi::NormalizedPiece score;
    rubato::midi::NormalizedPiece perf;
};

inline RubatoPair random_rubato_pair(rubato::Rng& rng, int notes) {
    RubatoPair pair;
    double score_onset = 0.0;
    double perf_onset = 0.0;
    for (int i = 0; i < notes; ++i) {
        if (i > 0) {
            double gap = double(rng.range(50, 800));
            score_onset += gap;
            perf_onset += gap * rng.uniform(0.5, 2.0);
        }
        rubato::midi::NormalizedNote s;
        s.pitch = uint8_t(rng.range(21, 108));
        s.velocity = 64;
        s.onset_ms = score_onset;
        s.duration_ms = double(rng.range(50, 1000));
        rubato::midi::NormalizedNote p = s;
        p.velocity = uint8_t(rng.range(1, 127));
        p.onset_ms = perf_onset;
        p.duration_ms = double(rng.range(50, 1000));
        pair.score.notes.push_back(s);
        pair.perf.notes.push_back(p);
    }
    int points = int(rng.range(0, 4));
    double t = 0.0;
    for (int i = 0; i < points; ++i) {
        t += double(rng.range(10, 2000));
        pair.perf.pedal.add_point(t, uint8_t(rng.range(0, 127)));
    }
    return pair;
}

inline rubato::metrics::Distribution random_distribution(rubato::Rng& rng, int support) {
    rubato::metrics::Distribution d;
    d.p.resize(size_t(support));
    double sum = 0.0;
    for (double& v : d.p) {
        v = rng.uniform();
        sum += v;
    }
    for (double& v : d.p) v /= sum;
    d.samples = support;
    return d;
}

// Independent brute-force metric oracles, coded directly from the formulas.
inline double oracle_js(const rubato::metrics::Distribution& p,
                        const rubato::metrics::Distribution& q) {
    double acc = 0.0;
    for (size_t i = 0; i < p.p.size(); ++i) {
        double m = 0.5 * (p.p[i] + q.p[i]);
        if (p.p[i] > 0.0) acc += 0.5 * p.p[i] * std::log2(p.p[i] / m);
        if (q.p[i] > 0.0) acc += 0.5 * q.p[i] * std::log2(q.p[i] / m);
    }
    return acc;
}

inline double oracle_intersection(const rubato::metrics::Distribution& p,
                                  const rubato::metrics::Distribution& q) {
    double acc = 0.0;
    for (size_t i = 0; i < p.p.size(); ++i) acc += std::min(p.p[i], q.p[i]);
    return acc;
}

inline double total_variation(const rubato::metrics::Distribution& p,
                              const rubato::metrics::Distribution& q) {
    double acc = 0.0;
    for (size_t i = 0; i < p.p.size(); ++i) acc += std::abs(p.p[i] - q.p[i]);
    return 0.5 * acc;
}

// Pedal sample times of a piece, mirroring the encoder's window rule.
inline std::vector<double> pedal_sample_times(const rubato::midi::NormalizedPiece& piece) {
    std::vector<double> times;
    for (size_t i = 0; i < piece.notes.size(); ++i) {
        double w = i + 1 < piece.notes.size()
                       ? piece.notes[i + 1].onset_ms - piece.notes[i].onset_ms
                       : piece.notes[i].duration_ms;
        for (int k = 1; k <= 4; ++k) {
            times.push_back(piece.notes[i].onset_ms + w * double(k) / 4.0);
        }
    }
    return times;
}

} // namespace testgen
