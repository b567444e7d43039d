#pragma once

#include <canroll/common.hpp>

#include <cstdint>
#include <span>
#include <vector>

namespace canroll {

// One note in the tick domain: [onset, onset + duration) at the given pitch.
struct NoteEvent {
  int pitch = 0;                 // MIDI note number, 0..127
  std::int64_t onset = 0;        // ticks, >= 0
  std::int64_t duration = 1;     // ticks, >= 1
  int velocity = 100;            // 1..127
  int track = 0;                 // source track index, >= 0

  bool operator==(const NoteEvent&) const = default;
};

// (onset, pitch, track) ordering; remaining fields break ties so sorting is total.
bool note_less(const NoteEvent& a, const NoteEvent& b);

struct MidiSong {
  int ppq = 96;                  // ticks per quarter note
  std::vector<NoteEvent> notes;  // sorted by note_less

  bool operator==(const MidiSong&) const = default;

  std::int64_t end_tick() const;

  // Validating constructor: enforces ppq > 0, per-note ranges and sortedness.
  static MidiSong make(int ppq, std::vector<NoteEvent> notes);
};

struct ParseOptions {
  // channel 10 (percussion) is dropped unless set
  bool keep_drums = false;
};

// Standard MIDI File format 0/1, tick domain only: tempo and other meta
// events are skipped. Running status honored. A Note-On left open at end of
// track closes at the final track tick.
MidiSong parse_midi(std::span<const std::uint8_t> bytes, const ParseOptions& opt = {});

inline MidiSong parse_midi(const std::vector<std::uint8_t>& bytes, const ParseOptions& opt = {}) {
  return parse_midi(std::span<const std::uint8_t>(bytes.data(), bytes.size()), opt);
}

// SMF format 0, single track, division = ppq. Emits a fixed 120 BPM tempo
// event; note offs precede note ons at equal ticks so abutting notes
// round-trip. parse_midi(write_midi(s)) == s for every valid song.
std::vector<std::uint8_t> write_midi(const MidiSong& song);

// Onsets snap to the nearest multiple of step_ticks, durations to the nearest
// positive multiple. Same-pitch notes whose snapped spans overlap or abut are
// merged into one note covering the union (a binary roll cannot represent
// re-articulation). Idempotent on already-aligned songs.
MidiSong quantize(const MidiSong& song, std::int64_t step_ticks);

}  // namespace canroll
