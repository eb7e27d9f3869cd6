#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <vector>

#include "cpbert/tokenizer.hpp"

namespace cpbert {

inline constexpr int kPitchClasses = 12;

/// Bar-level pianoroll (16 x 86) and chromagram (16 x 12) targets for one
/// note, plus the note's tatum in the bar. Row-major, entries in {0, 1}.
struct PianorollTarget {
  std::array<std::uint8_t, kTatumsPerBar * kPitchCount> pr{};
  std::array<std::uint8_t, kTatumsPerBar * kPitchClasses> cm{};
  int pos = 0;

  std::uint8_t pr_at(int tatum, int pitch_index) const { return pr[tatum * kPitchCount + pitch_index]; }
  std::uint8_t cm_at(int tatum, int pitch_class) const { return cm[tatum * kPitchClasses + pitch_class]; }
};

/// Tatums a duration token spans: one tatum is two duration units.
inline int duration_tatums(int dur) { return (dur + 1) / 2; }

/// Builds pianoroll/chromagram targets from the clean tokens of a segment.
/// Each note sounds from its onset tatum for duration_tatums(dur) tatums,
/// truncated at the bar end; all notes of a bar share the same matrices.
inline std::vector<PianorollTarget> build_targets(const Segment& segment) {
  const auto& toks = segment.clean_tokens.empty() ? segment.tokens : segment.clean_tokens;
  std::map<int, PianorollTarget> bars;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    PianorollTarget& bar = bars[segment.bar_index[i]];
    const CPToken& t = toks[i];
    const int pitch_index = t.pit - kMinPitch;
    const int end = std::min(kTatumsPerBar, t.pos + duration_tatums(t.dur));
    for (int tatum = t.pos; tatum < end; ++tatum) {
      bar.pr[tatum * kPitchCount + pitch_index] = 1;
      bar.cm[tatum * kPitchClasses + t.pit % kPitchClasses] = 1;
    }
  }
  std::vector<PianorollTarget> out;
  out.reserve(toks.size());
  for (std::size_t i = 0; i < toks.size(); ++i) {
    out.push_back(bars[segment.bar_index[i]]);
    out.back().pos = toks[i].pos;
  }
  return out;
}

}  // namespace cpbert
