#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rubato/error.hpp"

namespace rubato::midi {

RUBATO_DEFINE_ERROR(MalformedHeader);
RUBATO_DEFINE_ERROR(UnsupportedFormat);
RUBATO_DEFINE_ERROR(TruncatedChunk);

inline constexpr int kSustainController = 64;
inline constexpr int kDefaultPpq = 480;
inline constexpr int64_t kDefaultUsPerQuarter = 500000; // 120 BPM

struct NoteEvent {
    uint8_t pitch = 0;
    uint8_t velocity = 0;
    int64_t onset_tick = 0;
    int64_t duration_ticks = 1;

    bool operator==(const NoteEvent&) const = default;
};

struct ControlEvent {
    uint8_t controller = 0;
    uint8_t value = 0;
    int64_t tick = 0;

    bool operator==(const ControlEvent&) const = default;
};

struct TempoEvent {
    int64_t tick = 0;
    int64_t us_per_quarter = kDefaultUsPerQuarter;

    bool operator==(const TempoEvent&) const = default;
};

struct TextEvent {
    int64_t tick = 0;
    std::string text;

    bool operator==(const TextEvent&) const = default;
};

struct Track {
    std::vector<NoteEvent> notes;      // sorted by (onset, pitch, velocity, duration)
    std::vector<ControlEvent> controls; // sorted by (tick, controller, value)

    bool operator==(const Track&) const = default;
};

// Parsed SMF content. Tick domain; tempo events merged across tracks and
// sorted, at most one per tick. Text meta events are kept so run metadata
// written by the tools survives a round trip.
struct MidiPiece {
    std::vector<Track> tracks;
    int ppq = kDefaultPpq;
    std::vector<TempoEvent> tempo_events;
    std::vector<TextEvent> text_events;

    bool operator==(const MidiPiece&) const = default;
};

struct NormalizedNote {
    uint8_t pitch = 0;
    uint8_t velocity = 0;
    double onset_ms = 0.0;
    double duration_ms = 1.0;

    bool operator==(const NormalizedNote&) const = default;
};

// Step function of sustain value over milliseconds. Starts at 0; each point
// sets the value from its time (inclusive) onward.
struct PedalCurve {
    struct Point {
        double time_ms = 0.0;
        uint8_t value = 0;

        bool operator==(const Point&) const = default;
    };

    std::vector<Point> points; // strictly increasing time

    uint8_t value_at(double t_ms) const;
    void add_point(double t_ms, uint8_t value); // keeps the last value per time

    bool operator==(const PedalCurve&) const = default;
};

// Single-stream wall-clock form at the canonical 120 BPM scale.
// Notes sorted by (onset_ms, pitch), unique on that key.
struct NormalizedPiece {
    std::vector<NormalizedNote> notes;
    PedalCurve pedal;

    bool operator==(const NormalizedPiece&) const = default;
};

enum class NormalizeMode {
    score,       // ticks read as if the tempo were a constant 120 BPM
    performance, // ticks converted through the file's actual tempo map
};

MidiPiece parse_smf(std::span<const uint8_t> bytes);
std::vector<uint8_t> write_smf(const MidiPiece& piece);

NormalizedPiece normalize(const MidiPiece& piece, NormalizeMode mode);

// Piecewise integration of microseconds-per-quarter over ticks.
// 120 BPM is assumed before the first tempo event.
double render_wallclock(int64_t tick, std::span<const TempoEvent> tempo_events, int ppq);

MidiPiece read_smf_file(const std::string& path);
void write_smf_file(const std::string& path, const MidiPiece& piece);

} // namespace rubato::midi
