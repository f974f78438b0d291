#include "rubato/midi.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <map>

namespace rubato::midi {

namespace {

// ---------------------------------------------------------------------------
// byte-level reader
// ---------------------------------------------------------------------------

class Reader {
public:
    Reader(std::span<const uint8_t> bytes, size_t begin, size_t end)
        : bytes_(bytes), pos_(begin), end_(end) {}

    bool done() const { return pos_ >= end_; }
    size_t pos() const { return pos_; }

    uint8_t peek() const {
        require(1);
        return bytes_[pos_];
    }

    uint8_t u8() {
        require(1);
        return bytes_[pos_++];
    }

    uint32_t u16be() {
        require(2);
        uint32_t v = (uint32_t(bytes_[pos_]) << 8) | bytes_[pos_ + 1];
        pos_ += 2;
        return v;
    }

    uint32_t u32be() {
        require(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[pos_ + i];
        pos_ += 4;
        return v;
    }

    // Variable-length quantity, at most 4 bytes per the SMF standard.
    uint32_t vlq() {
        uint32_t value = 0;
        for (int i = 0; i < 4; ++i) {
            uint8_t b = u8();
            value = (value << 7) | (b & 0x7Fu);
            if (!(b & 0x80u)) return value;
        }
        throw TruncatedChunk("variable-length quantity longer than 4 bytes");
    }

    std::span<const uint8_t> take(size_t n) {
        require(n);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

    void skip(size_t n) {
        require(n);
        pos_ += n;
    }

private:
    void require(size_t n) const {
        if (pos_ + n > end_) {
            throw TruncatedChunk("event data runs past the end of its chunk");
        }
    }

    std::span<const uint8_t> bytes_;
    size_t pos_;
    size_t end_;
};

struct OpenNote {
    int64_t onset_tick;
    uint8_t velocity;
};

struct TrackParseResult {
    Track track;
    std::vector<TempoEvent> tempos;
    std::vector<TextEvent> texts;
};

TrackParseResult parse_track(Reader r) {
    TrackParseResult out;
    int64_t tick = 0;
    int running_status = -1;
    // FIFO of open notes per (channel, pitch)
    std::map<std::pair<int, int>, std::deque<OpenNote>> open;

    auto close_note = [&](int channel, int pitch, int64_t off_tick) {
        auto it = open.find({channel, pitch});
        if (it == open.end() || it->second.empty()) return; // spurious note-off
        OpenNote n = it->second.front();
        it->second.pop_front();
        out.track.notes.push_back(NoteEvent{
            static_cast<uint8_t>(pitch), n.velocity, n.onset_tick,
            std::max<int64_t>(1, off_tick - n.onset_tick)});
    };

    bool saw_end = false;
    while (!r.done() && !saw_end) {
        tick += r.vlq();
        uint8_t head = r.peek();
        int status;
        if (head & 0x80u) {
            status = r.u8();
            if (status < 0xF0) running_status = status;
        } else if (running_status >= 0) {
            status = running_status;
        } else {
            throw TruncatedChunk("data byte without a running status");
        }

        int kind = status & 0xF0;
        int channel = status & 0x0F;
        switch (kind) {
        case 0x90: {
            uint8_t pitch = r.u8() & 0x7Fu;
            uint8_t vel = r.u8() & 0x7Fu;
            if (vel == 0) {
                close_note(channel, pitch, tick);
            } else {
                open[{channel, pitch}].push_back(OpenNote{tick, vel});
            }
            break;
        }
        case 0x80: {
            uint8_t pitch = r.u8() & 0x7Fu;
            r.u8(); // release velocity, unused
            close_note(channel, pitch, tick);
            break;
        }
        case 0xB0: {
            uint8_t controller = r.u8() & 0x7Fu;
            uint8_t value = r.u8() & 0x7Fu;
            out.track.controls.push_back(ControlEvent{controller, value, tick});
            break;
        }
        case 0xA0: // polyphonic aftertouch
        case 0xE0: // pitch bend
            r.skip(2);
            break;
        case 0xC0: // program change
        case 0xD0: // channel aftertouch
            r.skip(1);
            break;
        case 0xF0: {
            if (status == 0xFF) {
                uint8_t meta = r.u8();
                uint32_t len = r.vlq();
                auto body = r.take(len);
                if (meta == 0x51 && len == 3) {
                    int64_t uspq = (int64_t(body[0]) << 16) |
                                   (int64_t(body[1]) << 8) | body[2];
                    out.tempos.push_back(TempoEvent{tick, uspq});
                } else if (meta == 0x01) {
                    out.texts.push_back(TextEvent{
                        tick, std::string(body.begin(), body.end())});
                } else if (meta == 0x2F) {
                    saw_end = true;
                }
                // other meta events are skipped, length-respected
            } else if (status == 0xF0 || status == 0xF7) {
                r.skip(r.vlq()); // SysEx: skipped, length-respected
            } else {
                throw TruncatedChunk("unexpected system message in track");
            }
            break;
        }
        default:
            throw TruncatedChunk("unknown event status");
        }
    }

    // Unmatched note-ons are closed at track end.
    for (auto& [key, queue] : open) {
        for (const OpenNote& n : queue) {
            out.track.notes.push_back(NoteEvent{
                static_cast<uint8_t>(key.second), n.velocity, n.onset_tick,
                std::max<int64_t>(1, tick - n.onset_tick)});
        }
    }

    std::sort(out.track.notes.begin(), out.track.notes.end(),
              [](const NoteEvent& a, const NoteEvent& b) {
                  return std::tie(a.onset_tick, a.pitch, a.velocity, a.duration_ticks) <
                         std::tie(b.onset_tick, b.pitch, b.velocity, b.duration_ticks);
              });
    return out;
}

// ---------------------------------------------------------------------------
// byte-level writer
// ---------------------------------------------------------------------------

void put_u16be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v & 0xFF));
}

void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
    for (int shift = 24; shift >= 0; shift -= 8) out.push_back(uint8_t((v >> shift) & 0xFF));
}

void put_vlq(std::vector<uint8_t>& out, int64_t value) {
    if (value < 0 || value > 0x0FFFFFFF) {
        throw TruncatedChunk("delta time out of the variable-length range");
    }
    std::array<uint8_t, 4> buf{};
    int n = 0;
    uint32_t v = static_cast<uint32_t>(value);
    do {
        buf[n++] = uint8_t(v & 0x7F);
        v >>= 7;
    } while (v != 0);
    for (int i = n - 1; i > 0; --i) out.push_back(buf[i] | 0x80u);
    out.push_back(buf[0]);
}

struct WireEvent {
    int64_t tick;
    int order; // 0 meta, 1 control, 2 note-off, 3 note-on
    int seq;   // stable tiebreak within (tick, order)
    std::vector<uint8_t> bytes;
};

void append_track(std::vector<uint8_t>& out, std::vector<WireEvent> events) {
    std::sort(events.begin(), events.end(), [](const WireEvent& a, const WireEvent& b) {
        return std::tie(a.tick, a.order, a.seq) < std::tie(b.tick, b.order, b.seq);
    });
    std::vector<uint8_t> body;
    int64_t cursor = 0;
    for (const WireEvent& e : events) {
        put_vlq(body, e.tick - cursor);
        cursor = e.tick;
        body.insert(body.end(), e.bytes.begin(), e.bytes.end());
    }
    int64_t end_tick = events.empty() ? 0 : events.back().tick;
    put_vlq(body, end_tick - cursor);
    body.insert(body.end(), {0xFF, 0x2F, 0x00});

    out.insert(out.end(), {'M', 'T', 'r', 'k'});
    put_u32be(out, static_cast<uint32_t>(body.size()));
    out.insert(out.end(), body.begin(), body.end());
}

std::vector<WireEvent> track_events(const Track& track) {
    std::vector<WireEvent> events;
    int seq = 0;
    for (const NoteEvent& n : track.notes) {
        events.push_back(WireEvent{n.onset_tick, 3, seq,
                                   {0x90, uint8_t(n.pitch & 0x7F), uint8_t(n.velocity & 0x7F)}});
        events.push_back(WireEvent{n.onset_tick + std::max<int64_t>(1, n.duration_ticks), 2, seq,
                                   {0x80, uint8_t(n.pitch & 0x7F), 0x40}});
        ++seq;
    }
    for (const ControlEvent& c : track.controls) {
        events.push_back(WireEvent{c.tick, 1, seq++,
                                   {0xB0, uint8_t(c.controller & 0x7F), uint8_t(c.value & 0x7F)}});
    }
    return events;
}

std::vector<WireEvent> meta_events(const MidiPiece& piece) {
    std::vector<WireEvent> events;
    int seq = 0;
    for (const TempoEvent& t : piece.tempo_events) {
        events.push_back(WireEvent{t.tick, 0, seq++,
                                   {0xFF, 0x51, 0x03,
                                    uint8_t((t.us_per_quarter >> 16) & 0xFF),
                                    uint8_t((t.us_per_quarter >> 8) & 0xFF),
                                    uint8_t(t.us_per_quarter & 0xFF)}});
    }
    for (const TextEvent& t : piece.text_events) {
        std::vector<uint8_t> bytes = {0xFF, 0x01};
        put_vlq(bytes, static_cast<int64_t>(t.text.size()));
        bytes.insert(bytes.end(), t.text.begin(), t.text.end());
        events.push_back(WireEvent{t.tick, 0, seq++, std::move(bytes)});
    }
    return events;
}

double ticks_to_ms_fixed_120(int64_t tick, int ppq) {
    return double(tick) * 500.0 / double(ppq);
}

} // namespace

// ---------------------------------------------------------------------------
// PedalCurve
// ---------------------------------------------------------------------------

uint8_t PedalCurve::value_at(double t_ms) const {
    uint8_t value = 0;
    for (const Point& p : points) {
        if (p.time_ms > t_ms) break;
        value = p.value;
    }
    return value;
}

void PedalCurve::add_point(double t_ms, uint8_t value) {
    if (!points.empty() && points.back().time_ms == t_ms) {
        points.back().value = value;
        return;
    }
    points.push_back(Point{t_ms, value});
}

// ---------------------------------------------------------------------------
// parse / write
// ---------------------------------------------------------------------------

MidiPiece parse_smf(std::span<const uint8_t> bytes) {
    if (bytes.size() < 14 || std::memcmp(bytes.data(), "MThd", 4) != 0) {
        throw MalformedHeader("file does not start with an MThd chunk");
    }
    Reader header(bytes, 4, bytes.size());
    uint32_t header_len = header.u32be();
    if (header_len < 6) throw MalformedHeader("MThd chunk shorter than 6 bytes");
    if (8 + size_t(header_len) > bytes.size()) {
        throw TruncatedChunk("MThd length exceeds the file size");
    }
    uint32_t format = header.u16be();
    uint32_t declared_tracks = header.u16be();
    uint32_t division = header.u16be();
    if (format > 1) throw UnsupportedFormat("only SMF formats 0 and 1 are supported");
    if (division & 0x8000u) throw UnsupportedFormat("SMPTE time division is not supported");
    if (division == 0) throw MalformedHeader("ticks-per-quarter must be positive");

    MidiPiece piece;
    piece.ppq = static_cast<int>(division);

    size_t pos = 8 + header_len;
    uint32_t seen_tracks = 0;
    while (seen_tracks < declared_tracks) {
        if (pos + 8 > bytes.size()) {
            throw TruncatedChunk("fewer track chunks than the header declares");
        }
        bool is_track = std::memcmp(bytes.data() + pos, "MTrk", 4) == 0;
        Reader chunk_header(bytes, pos + 4, bytes.size());
        uint32_t chunk_len = chunk_header.u32be();
        size_t body_begin = pos + 8;
        if (body_begin + chunk_len > bytes.size()) {
            throw TruncatedChunk("chunk length exceeds remaining bytes");
        }
        if (is_track) {
            TrackParseResult r = parse_track(Reader(bytes, body_begin, body_begin + chunk_len));
            piece.tempo_events.insert(piece.tempo_events.end(), r.tempos.begin(), r.tempos.end());
            piece.text_events.insert(piece.text_events.end(), r.texts.begin(), r.texts.end());
            if (!r.track.notes.empty() || !r.track.controls.empty()) {
                piece.tracks.push_back(std::move(r.track));
            }
            ++seen_tracks;
        }
        // unknown chunk types are skipped, length-respected
        pos = body_begin + chunk_len;
    }

    // Sort tempo events, keep the last event per tick.
    std::stable_sort(piece.tempo_events.begin(), piece.tempo_events.end(),
                     [](const TempoEvent& a, const TempoEvent& b) { return a.tick < b.tick; });
    std::vector<TempoEvent> deduped;
    for (const TempoEvent& t : piece.tempo_events) {
        if (!deduped.empty() && deduped.back().tick == t.tick) {
            deduped.back() = t;
        } else {
            deduped.push_back(t);
        }
    }
    piece.tempo_events = std::move(deduped);
    std::stable_sort(piece.text_events.begin(), piece.text_events.end(),
                     [](const TextEvent& a, const TextEvent& b) { return a.tick < b.tick; });
    return piece;
}

std::vector<uint8_t> write_smf(const MidiPiece& piece) {
    std::vector<uint8_t> out;
    out.insert(out.end(), {'M', 'T', 'h', 'd'});
    put_u32be(out, 6);
    put_u16be(out, 1); // format 1
    uint32_t ntrks = static_cast<uint32_t>(std::max<size_t>(1, piece.tracks.size()));
    put_u16be(out, ntrks);
    put_u16be(out, static_cast<uint32_t>(piece.ppq));

    if (piece.tracks.empty()) {
        append_track(out, meta_events(piece));
        return out;
    }
    for (size_t i = 0; i < piece.tracks.size(); ++i) {
        std::vector<WireEvent> events = track_events(piece.tracks[i]);
        if (i == 0) {
            // tempo and text meta live in the first track
            std::vector<WireEvent> meta = meta_events(piece);
            events.insert(events.end(), meta.begin(), meta.end());
        }
        append_track(out, std::move(events));
    }
    return out;
}

// ---------------------------------------------------------------------------
// wall-clock conversion and normalization
// ---------------------------------------------------------------------------

double render_wallclock(int64_t tick, std::span<const TempoEvent> tempo_events, int ppq) {
    double us = 0.0;
    int64_t cursor = 0;
    int64_t us_per_quarter = kDefaultUsPerQuarter;
    for (const TempoEvent& t : tempo_events) {
        if (t.tick >= tick) break;
        if (t.tick > cursor) {
            us += double(t.tick - cursor) * double(us_per_quarter) / double(ppq);
            cursor = t.tick;
        }
        us_per_quarter = t.us_per_quarter;
    }
    us += double(tick - cursor) * double(us_per_quarter) / double(ppq);
    return us / 1000.0;
}

NormalizedPiece normalize(const MidiPiece& piece, NormalizeMode mode) {
    auto to_ms = [&](int64_t tick) {
        return mode == NormalizeMode::score
                   ? ticks_to_ms_fixed_120(tick, piece.ppq)
                   : render_wallclock(tick, piece.tempo_events, piece.ppq);
    };

    // Merge all tracks, then collapse duplicates: same pitch and same onset
    // tick keep the larger velocity, then the longer duration.
    struct TickNote {
        uint8_t pitch;
        uint8_t velocity;
        int64_t onset_tick;
        int64_t duration_ticks;
    };
    std::vector<TickNote> merged;
    for (const Track& track : piece.tracks) {
        for (const NoteEvent& n : track.notes) {
            merged.push_back(TickNote{n.pitch, n.velocity, n.onset_tick, n.duration_ticks});
        }
    }
    std::sort(merged.begin(), merged.end(), [](const TickNote& a, const TickNote& b) {
        return std::tie(a.onset_tick, a.pitch, a.velocity, a.duration_ticks) <
               std::tie(b.onset_tick, b.pitch, b.velocity, b.duration_ticks);
    });
    std::vector<TickNote> deduped;
    for (const TickNote& n : merged) {
        if (!deduped.empty() && deduped.back().onset_tick == n.onset_tick &&
            deduped.back().pitch == n.pitch) {
            TickNote& kept = deduped.back();
            if (n.velocity > kept.velocity ||
                (n.velocity == kept.velocity && n.duration_ticks > kept.duration_ticks)) {
                kept = n;
            }
        } else {
            deduped.push_back(n);
        }
    }

    NormalizedPiece out;
    out.notes.reserve(deduped.size());
    for (const TickNote& n : deduped) {
        double onset_ms = to_ms(n.onset_tick);
        double end_ms = to_ms(n.onset_tick + n.duration_ticks);
        out.notes.push_back(NormalizedNote{
            n.pitch, n.velocity, onset_ms, std::max(1.0, end_ms - onset_ms)});
    }
    std::sort(out.notes.begin(), out.notes.end(),
              [](const NormalizedNote& a, const NormalizedNote& b) {
                  return std::tie(a.onset_ms, a.pitch) < std::tie(b.onset_ms, b.pitch);
              });

    // Sustain pedal: merge CC64 across tracks in (tick, track, stream) order.
    struct PedalEvent {
        int64_t tick;
        size_t track;
        size_t seq;
        uint8_t value;
    };
    std::vector<PedalEvent> pedal_events;
    for (size_t ti = 0; ti < piece.tracks.size(); ++ti) {
        const auto& controls = piece.tracks[ti].controls;
        for (size_t si = 0; si < controls.size(); ++si) {
            if (controls[si].controller == kSustainController) {
                pedal_events.push_back(PedalEvent{controls[si].tick, ti, si, controls[si].value});
            }
        }
    }
    std::sort(pedal_events.begin(), pedal_events.end(),
              [](const PedalEvent& a, const PedalEvent& b) {
                  return std::tie(a.tick, a.track, a.seq) < std::tie(b.tick, b.track, b.seq);
              });
    for (const PedalEvent& p : pedal_events) {
        out.pedal.add_point(to_ms(p.tick), p.value);
    }
    return out;
}

// ---------------------------------------------------------------------------
// file helpers
// ---------------------------------------------------------------------------

MidiPiece read_smf_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MalformedHeader("cannot open file: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return parse_smf(bytes);
}

void write_smf_file(const std::string& path, const MidiPiece& piece) {
    std::vector<uint8_t> bytes = write_smf(piece);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw MalformedHeader("cannot open file for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

} // namespace rubato::midi
