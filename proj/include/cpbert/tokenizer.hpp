#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cpbert/error.hpp"
#include "cpbert/score.hpp"

namespace cpbert {

enum Attribute : int { kBar = 0, kPos = 1, kPitch = 2, kDur = 3 };
inline constexpr int kNumAttributes = 4;
inline constexpr std::array<const char*, kNumAttributes> kAttributeNames{"b", "pos", "pit", "dur"};

/// Value ranges of the four compound-word attributes and the reserved mask/pad ids.
///
/// Token values live in value space (pit 22..107, dur 1..64). Model ids are
/// value - offset, so clean ids run 0..cardinality-1, mask_id = cardinality
/// and pad_id = cardinality + 1.
struct VocabSpec {
  static constexpr std::array<int, kNumAttributes> cardinality{2, 16, 86, 64};
  static constexpr std::array<int, kNumAttributes> offset{0, 0, 22, 1};
  static constexpr int logit_width = 2 + 16 + 86 + 64;
  static constexpr std::array<int, kNumAttributes> logit_offset{0, 2, 18, 104};

  static constexpr int min_value(int a) { return offset[a]; }
  static constexpr int max_value(int a) { return offset[a] + cardinality[a] - 1; }
  static constexpr int mask_id(int a) { return cardinality[a]; }
  static constexpr int pad_id(int a) { return cardinality[a] + 1; }
  static constexpr int embedding_rows(int a) { return cardinality[a] + 2; }
  static constexpr int mask_value(int a) { return offset[a] + mask_id(a); }
  static constexpr int pad_value(int a) { return offset[a] + pad_id(a); }
};

inline constexpr int kMinPitch = 22;
inline constexpr int kMaxPitch = 107;
inline constexpr int kPitchCount = 86;
inline constexpr int kTatumsPerBar = 16;

struct CPToken {
  int b = 0;
  int pos = 0;
  int pit = 60;
  int dur = 1;

  int operator[](int a) const { return a == kBar ? b : a == kPos ? pos : a == kPitch ? pit : dur; }
  int& operator[](int a) { return a == kBar ? b : a == kPos ? pos : a == kPitch ? pit : dur; }
  int id(int a) const { return (*this)[a] - VocabSpec::offset[a]; }

  bool is_clean() const {
    for (int a = 0; a < kNumAttributes; ++a)
      if ((*this)[a] < VocabSpec::min_value(a) || (*this)[a] > VocabSpec::max_value(a)) return false;
    return true;
  }
  bool is_pad() const { return b == VocabSpec::pad_value(kBar); }

  static CPToken mask() {
    return {VocabSpec::mask_value(0), VocabSpec::mask_value(1), VocabSpec::mask_value(2), VocabSpec::mask_value(3)};
  }
  static CPToken pad() {
    return {VocabSpec::pad_value(0), VocabSpec::pad_value(1), VocabSpec::pad_value(2), VocabSpec::pad_value(3)};
  }

  friend bool operator==(const CPToken&, const CPToken&) = default;
};

/// A token together with the index of the bar holding its note onset.
struct BarToken {
  CPToken token;
  int bar = 0;
  friend bool operator==(const BarToken&, const BarToken&) = default;
};

/// Bounded window of tokens from one piece.
struct Segment {
  std::vector<CPToken> tokens;
  std::vector<int> bar_index;
  std::string piece_id;
  std::vector<CPToken> clean_tokens;

  std::size_t size() const { return tokens.size(); }
};

/// Maps every bar onto a 4-crotchet bar. Notes past the last downbeat fall in
/// implicit bars that repeat the length of the final bar (4 crotchets when
/// only one downbeat exists). Output downbeats are 0, 4, 8, ...
inline Score rescale_bars(const Score& score) {
  if (score.downbeats.empty()) throw ValidationError("rescale_bars: empty downbeat list");
  if (score.time_unit != TimeUnit::beats) throw ValidationError("rescale_bars: score must be in beat units");
  const auto& db = score.downbeats;
  const std::size_t m_count = db.size();
  const Rational tail_len = m_count >= 2 ? db[m_count - 1] - db[m_count - 2] : Rational(4);

  Score out;
  out.time_unit = TimeUnit::beats;
  out.source_meta = score.source_meta;
  std::int64_t bars = static_cast<std::int64_t>(m_count);
  for (const Note& n : score.notes) {
    if (n.onset < db.front()) throw ValidationError("rescale_bars: note onset before first downbeat");
    auto it = std::upper_bound(db.begin(), db.end(), n.onset);
    auto m = static_cast<std::int64_t>(it - db.begin()) - 1;
    Rational start = db[m];
    Rational len;
    if (static_cast<std::size_t>(m) + 1 < m_count) {
      len = db[m + 1] - db[m];
    } else {
      len = tail_len;
      const std::int64_t k = ((n.onset - start) / len).floor();
      start += Rational(k) * len;
      m += k;
    }
    const Rational scale = Rational(4) / len;
    Note r = n;
    r.onset = Rational(4 * m) + (n.onset - start) * scale;
    r.duration = n.duration * scale;
    out.notes.push_back(r);
    bars = std::max(bars, m + 1);
  }
  for (std::int64_t i = 0; i < bars; ++i) out.downbeats.push_back(Rational(4 * i));
  return validate_score(std::move(out));
}

/// Shifts a MIDI pitch by octaves into [22, 107].
inline int fold_pitch(int pitch) {
  while (pitch < kMinPitch) pitch += 12;
  while (pitch > kMaxPitch) pitch -= 12;
  return pitch;
}

/// Quantizes a 4/4-grid score into compound-word tokens, preserving note order.
///
/// The onset is rounded (half up) to the 1/4-crotchet grid and the bar is
/// derived from the rounded tatum, so an onset that rounds onto the next
/// downbeat becomes position 0 of the next bar. Durations round half up to
/// 1/8 crotchet and clamp to [1, 64].
inline std::vector<BarToken> tokenize(const Score& score) {
  if (score.time_unit != TimeUnit::beats) throw ValidationError("tokenize: score must be in beat units");
  std::vector<BarToken> out;
  out.reserve(score.notes.size());
  int prev_bar = -1;
  for (const Note& n : score.notes) {
    const std::int64_t tatum = (n.onset * Rational(4)).round_half_up();
    const auto bar = static_cast<int>(tatum / kTatumsPerBar);
    BarToken t;
    t.bar = bar;
    t.token.pos = static_cast<int>(tatum - std::int64_t{kTatumsPerBar} * bar);
    t.token.dur = static_cast<int>(std::clamp<std::int64_t>((n.duration * Rational(8)).round_half_up(), 1, 64));
    t.token.pit = fold_pitch(n.pitch);
    t.token.b = bar != prev_bar ? 1 : 0;
    prev_bar = bar;
    out.push_back(t);
  }
  return out;
}

/// Splits a piece into consecutive windows of at most max_len tokens.
inline std::vector<Segment> segment(const std::vector<BarToken>& tokens, std::size_t max_len,
                                    const std::string& piece_id = {}) {
  if (max_len < 1) throw ValidationError("segment: max_len must be >= 1");
  std::vector<Segment> out;
  for (std::size_t start = 0; start < tokens.size(); start += max_len) {
    const std::size_t end = std::min(tokens.size(), start + max_len);
    Segment s;
    s.piece_id = piece_id;
    for (std::size_t i = start; i < end; ++i) {
      s.tokens.push_back(tokens[i].token);
      s.bar_index.push_back(tokens[i].bar);
    }
    s.clean_tokens = s.tokens;
    out.push_back(std::move(s));
  }
  return out;
}

/// Inverse of tokenize on the grid: onset = 4*bar + pos/4, duration = dur/8.
inline Score detokenize(const std::vector<BarToken>& tokens) {
  Score s;
  s.time_unit = TimeUnit::beats;
  int max_bar = 0;
  for (const auto& t : tokens) {
    Note n;
    n.onset = Rational(4 * static_cast<std::int64_t>(t.bar)) + Rational(t.token.pos, 4);
    n.duration = Rational(t.token.dur, 8);
    n.pitch = t.token.pit;
    s.notes.push_back(n);
    max_bar = std::max(max_bar, t.bar);
  }
  for (int i = 0; i <= max_bar; ++i) s.downbeats.push_back(Rational(4 * i));
  return validate_score(std::move(s));
}

/// Full ingestion path for a beat-unit score: rescale bars then tokenize.
inline std::vector<BarToken> tokenize_score(const Score& score) {
  if (score.downbeats.empty()) {
    Score copy = score;
    copy.downbeats = {Rational(0)};
    return tokenize(rescale_bars(copy));
  }
  return tokenize(rescale_bars(score));
}

}  // namespace cpbert
