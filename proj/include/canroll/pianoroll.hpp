#pragma once

#include <canroll/common.hpp>
#include <canroll/midi.hpp>

#include <filesystem>
#include <vector>

namespace canroll {

// Square pitch x time grid. Row r is MIDI pitch 127 - r, so row 0 is the
// highest pitch (top of the image). Column c covers ticks
// [c*step_ticks, (c+1)*step_ticks). The canonical side is 128; the reduced
// test profiles use 32, which sees only the top 32 pitches.
struct PianoRoll {
  enum class Domain { Binary01, Signed11 };

  Mat grid;  // side x side, row-major
  Domain domain = Domain::Binary01;
  std::int64_t step_ticks = 24;

  int side() const { return static_cast<int>(grid.rows()); }

  bool operator==(const PianoRoll&) const = default;
};

inline PianoRoll make_roll(int side, PianoRoll::Domain domain, std::int64_t step_ticks) {
  PianoRoll r;
  r.domain = domain;
  r.step_ticks = step_ticks;
  r.grid = domain == PianoRoll::Domain::Binary01 ? Mat::Zero(side, side)
                                                 : Mat::Constant(side, side, -1.0);
  return r;
}

// Default sixteenth-note grid: 128 columns is about 8 bars of 4/4.
inline std::int64_t default_step_ticks(int ppq) { return std::max(1, ppq / 4); }

// Binary roll of window w (columns side*w .. side*w + side - 1 of the global
// grid). Precondition: song already quantized to step_ticks.
PianoRoll encode(const MidiSong& song, int window, std::int64_t step_ticks = 0, int side = 128);

// Cells >= threshold are on; each maximal horizontal run of on-cells in a row
// becomes one note (velocity 100, pitch 127 - row).
MidiSong decode(const PianoRoll& roll, double threshold, int ppq);

// Non-overlapping consecutive windows covering the song; all-zero windows
// dropped, order preserved.
std::vector<PianoRoll> segment(const MidiSong& song, std::int64_t step_ticks = 0, int side = 128);

// 0 -> -1, 1 -> +1; inverse of thresholding at 0.
PianoRoll normalize(const PianoRoll& roll);

// Threshold any roll back into the binary domain (cells >= threshold are on).
PianoRoll binarize(const PianoRoll& roll, double threshold);

// 8-bit grayscale PGM (P5). Binary rolls map {0,1} to {0,255}; signed rolls
// map [-1,1] linearly onto [0,255].
std::vector<std::uint8_t> roll_to_pgm(const PianoRoll& roll);
void write_pgm(const PianoRoll& roll, const std::filesystem::path& path);

// Flatten to a 1 x side^2 row (row-major) and back; the batch layout used by
// the models.
Eigen::RowVectorXd roll_to_row(const PianoRoll& roll);
PianoRoll row_to_roll(const Eigen::RowVectorXd& row, PianoRoll::Domain domain, std::int64_t step_ticks);

}  // namespace canroll
