#pragma once

#include <array>
#include <string>
#include <vector>

#include "cpbert/random.hpp"
#include "cpbert/score.hpp"
#include "cpbert/shards.hpp"
#include "cpbert/tokenizer.hpp"

namespace cpbert {

/// Toy tonal pieces: a major key, one triad per 4/4 bar drawn from a fixed
/// progression, a bass root on every downbeat and a chord-tone melody on
/// quaver/crotchet positions with a small set of durations.
struct SynthOptions {
  int min_bars = 8;
  int max_bars = 16;
  std::size_t max_notes = 256;
};

inline Score synth_score(Rng& rng, const SynthOptions& opt = {}) {
  static constexpr std::array<int, 7> kMajor{0, 2, 4, 5, 7, 9, 11};
  static constexpr std::array<int, 4> kDegrees{0, 3, 4, 5};  // I IV V vi
  static constexpr std::array<int, 3> kDurs{1, 2, 4};        // quaver, crotchet, minim in quavers
  const int key = static_cast<int>(rng.uniform_int(0, 12));
  const int n_bars = static_cast<int>(rng.uniform_int(opt.min_bars, opt.max_bars + 1));
  Score s;
  s.time_unit = TimeUnit::beats;
  for (int bar = 0; bar < n_bars; ++bar) {
    s.downbeats.push_back(Rational(4 * bar));
    const int degree = kDegrees[static_cast<std::size_t>(rng.uniform_int(0, 4))];
    std::array<int, 3> triad{};
    for (int k = 0; k < 3; ++k) triad[k] = key + kMajor[static_cast<std::size_t>((degree + 2 * k) % 7)] + ((degree + 2 * k) / 7) * 12;
    Note bass;
    bass.onset = Rational(4 * bar);
    bass.duration = Rational(4);
    bass.pitch = 36 + triad[0] % 12;
    s.notes.push_back(bass);
    int q = 0;  // position in quavers within the bar
    while (q < 8) {
      const int len = std::min(kDurs[static_cast<std::size_t>(rng.uniform_int(0, 3))], 8 - q);
      Note n;
      n.onset = Rational(4 * bar) + Rational(q, 2);
      n.duration = Rational(len, 2);
      n.pitch = 60 + triad[static_cast<std::size_t>(rng.uniform_int(0, 3))] % 12 + 12 * static_cast<int>(rng.uniform_int(0, 2));
      s.notes.push_back(n);
      q += len;
    }
    if (s.notes.size() >= opt.max_notes) break;
  }
  if (s.notes.size() > opt.max_notes) s.notes.resize(opt.max_notes);
  return validate_score(std::move(s));
}

inline std::vector<Piece> synth_corpus(std::size_t n_pieces, std::uint64_t seed, const SynthOptions& opt = {}) {
  Rng rng(seed);
  std::vector<Piece> out;
  for (std::size_t i = 0; i < n_pieces; ++i) {
    Piece p;
    char id[32];
    std::snprintf(id, sizeof id, "synth-%04zu", i);
    p.id = id;
    p.source = "synthetic";
    p.tokens = tokenize_score(synth_score(rng, opt));
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace cpbert
