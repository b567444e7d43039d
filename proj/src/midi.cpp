#include <canroll/midi.hpp>

#include <algorithm>
#include <deque>
#include <map>
#include <string>

namespace canroll {

bool note_less(const NoteEvent& a, const NoteEvent& b) {
  const auto key = [](const NoteEvent& n) {
    return std::tuple(n.onset, n.pitch, n.track, n.duration, n.velocity);
  };
  return key(a) < key(b);
}

std::int64_t MidiSong::end_tick() const {
  std::int64_t end = 0;
  for (const auto& n : notes) end = std::max(end, n.onset + n.duration);
  return end;
}

MidiSong MidiSong::make(int ppq, std::vector<NoteEvent> notes) {
  require(ppq > 0, Errc::InvalidArgument, "ppq must be positive");
  for (const auto& n : notes) {
    require(n.pitch >= 0 && n.pitch <= 127, Errc::InvalidArgument, "pitch out of range");
    require(n.onset >= 0, Errc::InvalidArgument, "negative onset");
    require(n.duration >= 1, Errc::InvalidArgument, "duration must be >= 1");
    require(n.velocity >= 1 && n.velocity <= 127, Errc::InvalidArgument, "velocity out of range");
    require(n.track >= 0, Errc::InvalidArgument, "negative track");
  }
  require(std::is_sorted(notes.begin(), notes.end(), note_less), Errc::InvalidArgument,
          "notes not sorted by (onset, pitch, track)");
  return MidiSong{ppq, std::move(notes)};
}

namespace {

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : data_(bytes) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

  std::uint8_t u8() {
    require(remaining() >= 1, Errc::TruncatedTrack, "unexpected end of data");
    return data_[pos_++];
  }

  std::uint8_t peek() const {
    require(pos_ < data_.size(), Errc::TruncatedTrack, "unexpected end of data");
    return data_[pos_];
  }

  std::uint16_t u16() { return static_cast<std::uint16_t>(u8() << 8 | u8()); }

  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = v << 8 | u8();
    return v;
  }

  // variable-length quantity, at most 4 bytes per the SMF spec
  std::uint32_t vlq() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      const std::uint8_t b = u8();
      v = v << 7 | (b & 0x7f);
      if (!(b & 0x80)) return v;
    }
    fail(Errc::TruncatedTrack, "overlong variable-length quantity");
  }

  void skip(std::size_t n) {
    require(remaining() >= n, Errc::TruncatedTrack, "unexpected end of data");
    pos_ += n;
  }

  bool chunk_id(const char* id) {
    require(remaining() >= 4, Errc::TruncatedTrack, "unexpected end of data");
    const bool match = std::equal(id, id + 4, data_.begin() + static_cast<std::ptrdiff_t>(pos_));
    pos_ += 4;
    return match;
  }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

struct OpenNote {
  std::int64_t onset;
  int velocity;
};

void parse_track(Reader& r, std::uint32_t length, int track_index, bool keep_drums,
                 std::vector<NoteEvent>& out) {
  const std::size_t end = r.pos() + length;
  require(r.remaining() >= length, Errc::TruncatedTrack, "track length exceeds data");

  // FIFO per (channel, pitch): a Note-Off closes the oldest open note, which
  // round-trips overlapping same-pitch notes.
  std::map<std::pair<int, int>, std::deque<OpenNote>> open;
  std::int64_t tick = 0;
  std::uint8_t running = 0;

  const auto close_note = [&](int channel, int pitch, std::int64_t off_tick) {
    auto it = open.find({channel, pitch});
    if (it == open.end() || it->second.empty()) return;  // stray Note-Off, ignore
    const OpenNote on = it->second.front();
    it->second.pop_front();
    if (!keep_drums && channel == 9) return;
    NoteEvent n;
    n.pitch = pitch;
    n.onset = on.onset;
    n.duration = std::max<std::int64_t>(1, off_tick - on.onset);
    n.velocity = on.velocity;
    n.track = track_index;
    out.push_back(n);
  };

  while (r.pos() < end) {
    tick += r.vlq();
    std::uint8_t status = r.peek();
    if (status & 0x80) {
      r.skip(1);
      if (status < 0xf0) running = status;
    } else {
      require(running != 0, Errc::TruncatedTrack, "data byte without running status");
      status = running;
    }

    const int kind = status & 0xf0;
    const int channel = status & 0x0f;
    switch (kind) {
      case 0x80: {  // note off
        const int pitch = r.u8() & 0x7f;
        r.skip(1);  // release velocity
        close_note(channel, pitch, tick);
        break;
      }
      case 0x90: {  // note on (velocity 0 acts as note off)
        const int pitch = r.u8() & 0x7f;
        const int vel = r.u8() & 0x7f;
        if (vel == 0) {
          close_note(channel, pitch, tick);
        } else {
          open[{channel, pitch}].push_back(OpenNote{tick, vel});
        }
        break;
      }
      case 0xa0:  // polyphonic pressure
      case 0xb0:  // controller
      case 0xe0:  // pitch bend
        r.skip(2);
        break;
      case 0xc0:  // program change
      case 0xd0:  // channel pressure
        r.skip(1);
        break;
      case 0xf0: {
        if (status == 0xf0 || status == 0xf7) {  // sysex
          r.skip(r.vlq());
        } else if (status == 0xff) {  // meta: skipped, tick domain only
          const std::uint8_t type = r.u8();
          const std::uint32_t len = r.vlq();
          r.skip(len);
          if (type == 0x2f) {  // end of track
            // close remaining notes at this tick
            for (auto& [key, dq] : open)
              while (!dq.empty()) close_note(key.first, key.second, tick);
            r.skip(end - r.pos());
            return;
          }
        } else if (status == 0xf2) {
          r.skip(2);
        } else if (status == 0xf3) {
          r.skip(1);
        }
        break;
      }
      default:
        fail(Errc::TruncatedTrack, "unexpected status byte");
    }
  }
  for (auto& [key, dq] : open)
    while (!dq.empty()) close_note(key.first, key.second, tick);
}

}  // namespace

MidiSong parse_midi(std::span<const std::uint8_t> bytes, const ParseOptions& opt) {
  Reader r(bytes);
  require(bytes.size() >= 14, Errc::MalformedHeader, "file shorter than SMF header");
  require(r.chunk_id("MThd"), Errc::MalformedHeader, "missing MThd magic");
  require(r.u32() == 6, Errc::MalformedHeader, "bad MThd length");
  const std::uint16_t format = r.u16();
  const std::uint16_t ntrks = r.u16();
  const std::uint16_t division = r.u16();
  require(format <= 1, Errc::UnsupportedFormat, "SMF type 2 not supported");
  require((division & 0x8000) == 0, Errc::UnsupportedFormat, "SMPTE division not supported");
  require(division > 0, Errc::MalformedHeader, "division must be positive");

  std::vector<NoteEvent> notes;
  int track_index = 0;
  for (int i = 0; i < ntrks && r.remaining() > 0; ++i) {
    if (!r.chunk_id("MTrk")) {
      // unknown chunk: skip per the SMF spec
      r.skip(r.u32());
      --i;
      continue;
    }
    const std::uint32_t len = r.u32();
    parse_track(r, len, track_index++, opt.keep_drums, notes);
  }
  std::sort(notes.begin(), notes.end(), note_less);
  return MidiSong::make(division, std::move(notes));
}

namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i) & 0xff));
}

void put_vlq(std::vector<std::uint8_t>& out, std::int64_t v) {
  std::uint8_t stack[5];
  int n = 0;
  do {
    stack[n++] = static_cast<std::uint8_t>(v & 0x7f);
    v >>= 7;
  } while (v > 0);
  while (n > 1) out.push_back(stack[--n] | 0x80);
  out.push_back(stack[0]);
}

struct TrackEvent {
  std::int64_t tick;
  int order;  // note off then note on at equal ticks
  int seq;    // stable emission order
  std::uint8_t bytes[3];
  int size;
};

}  // namespace

std::vector<std::uint8_t> write_midi(const MidiSong& song) {
  require(song.ppq > 0 && song.ppq < 0x8000, Errc::InvalidArgument, "ppq not encodable");

  std::vector<TrackEvent> events;
  events.reserve(song.notes.size() * 2);
  int seq = 0;
  for (const auto& n : song.notes) {
    events.push_back({n.onset, 1, seq++,
                      {0x90, static_cast<std::uint8_t>(n.pitch), static_cast<std::uint8_t>(n.velocity)},
                      3});
    events.push_back({n.onset + n.duration, 0, seq++,
                      {0x80, static_cast<std::uint8_t>(n.pitch), 0}, 3});
  }
  std::stable_sort(events.begin(), events.end(), [](const TrackEvent& a, const TrackEvent& b) {
    return std::tuple(a.tick, a.order, a.seq) < std::tuple(b.tick, b.order, b.seq);
  });

  std::vector<std::uint8_t> track;
  // fixed 120 BPM tempo event: the roll is tick-domain, tempo is presentation
  const std::uint8_t tempo[] = {0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20};
  track.insert(track.end(), std::begin(tempo), std::end(tempo));

  std::int64_t tick = 0;
  for (const auto& e : events) {
    put_vlq(track, e.tick - tick);
    tick = e.tick;
    track.insert(track.end(), e.bytes, e.bytes + e.size);
  }
  put_vlq(track, 0);
  const std::uint8_t eot[] = {0xff, 0x2f, 0x00};
  track.insert(track.end(), std::begin(eot), std::end(eot));

  std::vector<std::uint8_t> out;
  out.reserve(track.size() + 22);
  const char mthd[] = {'M', 'T', 'h', 'd'};
  out.insert(out.end(), std::begin(mthd), std::end(mthd));
  put_u32(out, 6);
  put_u16(out, 0);  // format 0
  put_u16(out, 1);  // single track
  put_u16(out, static_cast<std::uint16_t>(song.ppq));
  const char mtrk[] = {'M', 'T', 'r', 'k'};
  out.insert(out.end(), std::begin(mtrk), std::end(mtrk));
  put_u32(out, static_cast<std::uint32_t>(track.size()));
  out.insert(out.end(), track.begin(), track.end());
  return out;
}

namespace {

std::int64_t nearest_multiple(std::int64_t v, std::int64_t step) {
  // round half up
  return (2 * v + step) / (2 * step) * step;
}

}  // namespace

MidiSong quantize(const MidiSong& song, std::int64_t step_ticks) {
  require(step_ticks >= 1, Errc::InvalidArgument, "step_ticks must be >= 1");

  std::vector<NoteEvent> snapped = song.notes;
  for (auto& n : snapped) {
    n.onset = nearest_multiple(n.onset, step_ticks);
    n.duration = std::max(step_ticks, nearest_multiple(n.duration, step_ticks));
  }

  // merge same-pitch notes whose snapped spans overlap or abut
  std::sort(snapped.begin(), snapped.end(), [](const NoteEvent& a, const NoteEvent& b) {
    return std::tuple(a.pitch, a.onset, a.duration) < std::tuple(b.pitch, b.onset, b.duration);
  });
  std::vector<NoteEvent> merged;
  for (const auto& n : snapped) {
    if (!merged.empty() && merged.back().pitch == n.pitch &&
        n.onset <= merged.back().onset + merged.back().duration) {
      auto& m = merged.back();
      m.duration = std::max(m.duration, n.onset + n.duration - m.onset);
    } else {
      merged.push_back(n);
    }
  }
  std::sort(merged.begin(), merged.end(), note_less);
  return MidiSong::make(song.ppq, std::move(merged));
}

}  // namespace canroll
