#include <canroll/pianoroll.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

namespace canroll {

PianoRoll encode(const MidiSong& song, int window, std::int64_t step_ticks, int side) {
  if (step_ticks == 0) step_ticks = default_step_ticks(song.ppq);
  require(step_ticks >= 1, Errc::InvalidArgument, "step_ticks must be >= 1");
  require(window >= 0, Errc::InvalidArgument, "window must be >= 0");

  PianoRoll roll = make_roll(side, PianoRoll::Domain::Binary01, step_ticks);
  const std::int64_t col0 = static_cast<std::int64_t>(window) * side;
  for (const auto& n : song.notes) {
    const int row = 127 - n.pitch;
    if (row < 0 || row >= side) continue;  // below the visible band on reduced grids
    const std::int64_t first = n.onset / step_ticks;
    const std::int64_t last = (n.onset + n.duration - 1) / step_ticks;
    const std::int64_t lo = std::max(first, col0);
    const std::int64_t hi = std::min(last, col0 + side - 1);
    for (std::int64_t c = lo; c <= hi; ++c) roll.grid(row, c - col0) = 1.0;
  }
  return roll;
}

MidiSong decode(const PianoRoll& roll, double threshold, int ppq) {
  if (roll.domain == PianoRoll::Domain::Binary01) {
    require(threshold > 0.0 && threshold < 1.0, Errc::InvalidArgument,
            "threshold must be in (0,1) for binary rolls");
  } else {
    require(threshold > -1.0 && threshold < 1.0, Errc::InvalidArgument,
            "threshold must be in (-1,1) for signed rolls");
  }
  const int side = roll.side();
  std::vector<NoteEvent> notes;
  for (int r = 0; r < side; ++r) {
    int run_start = -1;
    for (int c = 0; c <= side; ++c) {
      const bool on = c < side && roll.grid(r, c) >= threshold;
      if (on && run_start < 0) run_start = c;
      if (!on && run_start >= 0) {
        NoteEvent n;
        n.pitch = 127 - r;
        n.onset = static_cast<std::int64_t>(run_start) * roll.step_ticks;
        n.duration = static_cast<std::int64_t>(c - run_start) * roll.step_ticks;
        n.velocity = 100;
        n.track = 0;
        notes.push_back(n);
        run_start = -1;
      }
    }
  }
  std::sort(notes.begin(), notes.end(), note_less);
  return MidiSong::make(ppq, std::move(notes));
}

std::vector<PianoRoll> segment(const MidiSong& song, std::int64_t step_ticks, int side) {
  if (step_ticks == 0) step_ticks = default_step_ticks(song.ppq);
  const std::int64_t window_ticks = step_ticks * side;
  const std::int64_t end = song.end_tick();
  const int windows = std::max<std::int64_t>(1, (end + window_ticks - 1) / window_ticks);
  std::vector<PianoRoll> out;
  for (int w = 0; w < windows; ++w) {
    PianoRoll roll = encode(song, w, step_ticks, side);
    if (roll.grid.cwiseAbs().sum() > 0.0) out.push_back(std::move(roll));
  }
  return out;
}

PianoRoll normalize(const PianoRoll& roll) {
  require(roll.domain == PianoRoll::Domain::Binary01, Errc::InvalidArgument,
          "normalize expects a binary roll");
  PianoRoll out = roll;
  out.domain = PianoRoll::Domain::Signed11;
  out.grid = 2.0 * roll.grid.array() - 1.0;
  return out;
}

PianoRoll binarize(const PianoRoll& roll, double threshold) {
  PianoRoll out = roll;
  out.domain = PianoRoll::Domain::Binary01;
  out.grid = (roll.grid.array() >= threshold).cast<double>();
  return out;
}

std::vector<std::uint8_t> roll_to_pgm(const PianoRoll& roll) {
  const int side = roll.side();
  std::string header = "P5\n" + std::to_string(side) + " " + std::to_string(side) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + static_cast<std::size_t>(side) * side);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const double v = roll.grid(r, c);
      const double unit = roll.domain == PianoRoll::Domain::Binary01 ? v : (v + 1.0) / 2.0;
      const int byte = std::clamp(static_cast<int>(std::lround(unit * 255.0)), 0, 255);
      out.push_back(static_cast<std::uint8_t>(byte));
    }
  return out;
}

void write_pgm(const PianoRoll& roll, const std::filesystem::path& path) {
  const auto bytes = roll_to_pgm(roll);
  std::ofstream f(path, std::ios::binary);
  require(f.good(), Errc::IoError, "cannot open " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(f.good(), Errc::IoError, "write failed for " + path.string());
}

Eigen::RowVectorXd roll_to_row(const PianoRoll& roll) {
  return Eigen::Map<const Eigen::RowVectorXd>(roll.grid.data(), roll.grid.size());
}

PianoRoll row_to_roll(const Eigen::RowVectorXd& row, PianoRoll::Domain domain, std::int64_t step_ticks) {
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(row.size()))));
  require(static_cast<Eigen::Index>(side) * side == row.size(), Errc::ShapeMismatch,
          "row length is not a perfect square");
  PianoRoll out;
  out.domain = domain;
  out.step_ticks = step_ticks;
  out.grid = Eigen::Map<const Mat>(row.data(), side, side);
  return out;
}

}  // namespace canroll
