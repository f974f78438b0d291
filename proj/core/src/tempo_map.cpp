#include "rubato/tempo_map.hpp"

#include <algorithm>
#include <cmath>

namespace rubato::tempo {

namespace {

int64_t us_per_quarter(double bpm) {
    return static_cast<int64_t>(std::floor(60000000.0 / bpm + 0.5));
}

// milliseconds spanned by one tick at this bpm, after the microsecond
// quantization shared with the emitted meta events
double ms_per_tick(double bpm, int ppq) {
    return double(us_per_quarter(bpm)) / (1000.0 * ppq);
}

int64_t round_half_up(double x) {
    return static_cast<int64_t>(std::floor(x + 0.5));
}

} // namespace

AlignedPair AlignedPair::make(midi::NormalizedPiece score, midi::NormalizedPiece perf) {
    if (score.notes.size() != perf.notes.size()) {
        throw LengthMismatch("score has " + std::to_string(score.notes.size()) +
                             " notes, performance has " + std::to_string(perf.notes.size()));
    }
    for (size_t i = 0; i < score.notes.size(); ++i) {
        if (score.notes[i].pitch != perf.notes[i].pitch) {
            throw PitchMismatch("pitch disagreement at note " + std::to_string(i));
        }
    }
    return AlignedPair{std::move(score), std::move(perf)};
}

TempoCurve estimate_tempo_curve(const AlignedPair& pair, int ppq) {
    TempoCurve curve;
    curve.ppq = ppq;

    // anchors: indices where the score onset strictly increases
    std::vector<size_t> anchors;
    for (size_t i = 0; i < pair.score.notes.size(); ++i) {
        if (anchors.empty() ||
            pair.score.notes[i].onset_ms > pair.score.notes[anchors.back()].onset_ms) {
            anchors.push_back(i);
        }
    }
    if (anchors.size() < 2) {
        curve.points.push_back({0, 120.0});
        return curve;
    }

    double prev_bpm = 120.0;
    for (size_t a = 0; a + 1 < anchors.size(); ++a) {
        const midi::NormalizedNote& s0 = pair.score.notes[anchors[a]];
        const midi::NormalizedNote& s1 = pair.score.notes[anchors[a + 1]];
        const midi::NormalizedNote& p0 = pair.perf.notes[anchors[a]];
        const midi::NormalizedNote& p1 = pair.perf.notes[anchors[a + 1]];
        double perf_interval = p1.onset_ms - p0.onset_ms;
        double bpm;
        if (perf_interval <= 0.0) {
            bpm = prev_bpm; // carry through degenerate performance intervals
        } else {
            bpm = 120.0 * (s1.onset_ms - s0.onset_ms) / perf_interval;
            bpm = std::clamp(bpm, kMinBpm, kMaxBpm);
        }
        prev_bpm = bpm;
        // the first segment governs from tick 0
        int64_t tick = a == 0 ? 0 : round_half_up(s0.onset_ms * ppq / 500.0);
        if (!curve.points.empty()) {
            if (curve.points.back().bpm == bpm) continue;   // merge equal bpm
            if (curve.points.back().tick >= tick) continue; // sub-tick anchor collision
        }
        curve.points.push_back({tick, bpm});
    }
    return curve;
}

int64_t ms_to_ticks(double t_ms, const TempoCurve& curve) {
    double ms = 0.0;
    for (size_t i = 0; i < curve.points.size(); ++i) {
        double mspt = ms_per_tick(curve.points[i].bpm, curve.ppq);
        bool last = i + 1 == curve.points.size();
        double seg_ticks = last ? 0.0
                                : double(curve.points[i + 1].tick - curve.points[i].tick);
        double seg_ms = seg_ticks * mspt;
        if (last || t_ms <= ms + seg_ms) {
            return round_half_up(double(curve.points[i].tick) + (t_ms - ms) / mspt);
        }
        ms += seg_ms;
    }
    return 0;
}

midi::MidiPiece expressive_tempo_map(const AlignedPair& pair, int ppq) {
    TempoCurve curve = estimate_tempo_curve(pair, ppq);

    midi::MidiPiece out;
    out.ppq = ppq;
    for (const TempoCurve::Breakpoint& bp : curve.points) {
        out.tempo_events.push_back(midi::TempoEvent{bp.tick, us_per_quarter(bp.bpm)});
    }

    midi::Track track;
    track.notes.reserve(pair.perf.notes.size());
    for (size_t i = 0; i < pair.perf.notes.size(); ++i) {
        const midi::NormalizedNote& p = pair.perf.notes[i];
        int64_t onset = ms_to_ticks(p.onset_ms, curve);
        int64_t end = ms_to_ticks(p.onset_ms + p.duration_ms, curve);
        track.notes.push_back(midi::NoteEvent{
            pair.score.notes[i].pitch, // pitch from the score
            p.velocity,                // velocity from the performance
            onset,
            std::max<int64_t>(1, end - onset)});
    }
    for (const midi::PedalCurve::Point& p : pair.perf.pedal.points) {
        track.controls.push_back(midi::ControlEvent{
            midi::kSustainController, p.value, ms_to_ticks(p.time_ms, curve)});
    }
    out.tracks.push_back(std::move(track));
    return out;
}

} // namespace rubato::tempo
