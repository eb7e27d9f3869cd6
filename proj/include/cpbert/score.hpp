#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "cpbert/error.hpp"
#include "cpbert/rational.hpp"

namespace cpbert {

enum class TimeUnit { beats, seconds };

/// One note. Times are crotchet beats (or seconds for performance input).
struct Note {
  Rational onset;
  Rational duration;
  int pitch = 60;
  std::optional<int> velocity;
  int track = 0;

  friend bool operator==(const Note&, const Note&) = default;
};

struct Score {
  std::vector<Note> notes;
  std::vector<Rational> downbeats;
  TimeUnit time_unit = TimeUnit::beats;
  std::string source_meta;

  friend bool operator==(const Score& a, const Score& b) {
    return a.notes == b.notes && a.downbeats == b.downbeats && a.time_unit == b.time_unit;
  }
};

inline bool note_order(const Note& a, const Note& b) {
  return std::tie(a.onset, a.pitch, a.track) < std::tie(b.onset, b.pitch, b.track);
}

/// Sorts notes by (onset, pitch, track) and checks every Score invariant.
/// Idempotent. Throws ValidationError naming the offending note index.
inline Score validate_score(Score score) {
  std::stable_sort(score.notes.begin(), score.notes.end(), note_order);
  for (std::size_t i = 1; i < score.downbeats.size(); ++i) {
    if (!(score.downbeats[i - 1] < score.downbeats[i]))
      throw ValidationError("downbeats not strictly increasing at index " + std::to_string(i));
  }
  for (std::size_t i = 0; i < score.notes.size(); ++i) {
    const Note& n = score.notes[i];
    const std::string where = " (note " + std::to_string(i) + ")";
    if (n.duration <= Rational(0)) throw ValidationError("non-positive duration" + where);
    if (n.pitch < 0 || n.pitch > 127) throw ValidationError("pitch out of range [0,127]" + where);
    if (n.onset < Rational(0)) throw ValidationError("negative onset" + where);
    if (n.velocity && (*n.velocity < 1 || *n.velocity > 127))
      throw ValidationError("velocity out of range [1,127]" + where);
    if (!score.downbeats.empty() && n.onset < score.downbeats.front())
      throw ValidationError("note onset before first downbeat" + where);
  }
  return score;
}

}  // namespace cpbert
