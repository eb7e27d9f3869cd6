#include <filesystem>

#include <gtest/gtest.h>

#include "cpbert/random.hpp"
#include "cpbert/shards.hpp"
#include "cpbert/tokenizer.hpp"

using namespace cpbert;

namespace {

Note note(Rational on, Rational dur, int pitch) {
  Note n;
  n.onset = on;
  n.duration = dur;
  n.pitch = pitch;
  return n;
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

// Straight-line quantizer written without the library's helpers.
std::vector<BarToken> oracle_tokenize(const Score& s) {
  std::vector<BarToken> out;
  int last_bar = -1;
  for (const Note& n : s.notes) {
    const std::int64_t tatum = floor_div(8 * n.onset.num() + n.onset.den(), 2 * n.onset.den());
    std::int64_t dur = floor_div(16 * n.duration.num() + n.duration.den(), 2 * n.duration.den());
    if (dur < 1) dur = 1;
    if (dur > 64) dur = 64;
    int p = n.pitch;
    while (p < 22) p += 12;
    while (p > 107) p -= 12;
    BarToken t;
    t.bar = static_cast<int>(tatum / 16);
    t.token.pos = static_cast<int>(tatum % 16);
    t.token.pit = p;
    t.token.dur = static_cast<int>(dur);
    t.token.b = t.bar != last_bar;
    last_bar = t.bar;
    out.push_back(t);
  }
  return out;
}

Score random_grid_score(Rng& rng, int max_notes) {
  Score s;
  const int n = static_cast<int>(rng.uniform_int(1, max_notes + 1));
  for (int i = 0; i < n; ++i)
    s.notes.push_back(note(Rational(rng.uniform_int(0, 16 * 40), 4), Rational(rng.uniform_int(1, 65), 8),
                           static_cast<int>(rng.uniform_int(22, 108))));
  s = validate_score(s);
  std::int64_t bars = 1;
  for (const auto& x : s.notes) bars = std::max(bars, x.onset.floor() / 4 + 1);
  for (std::int64_t b = 0; b < bars; ++b) s.downbeats.push_back(Rational(4 * b));
  return s;
}

}  // namespace

TEST(Tokenize, FirstNoteOfBar) {
  Score s;
  s.downbeats = {Rational(0)};
  s.notes = {note(Rational(0), Rational(1), 60)};
  const auto t = tokenize(s);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0].token, (CPToken{1, 0, 60, 8}));
  EXPECT_EQ(t[0].bar, 0);
}

TEST(Tokenize, BoundaryValues) {
  Score s;
  s.downbeats = {Rational(0)};
  s.notes = {note(Rational(0), Rational(1, 8), 22), note(Rational(1), Rational(8), 107)};
  const auto t = tokenize(s);
  EXPECT_EQ(t[1].token.pos, 4);
  EXPECT_EQ(t[1].token.pit, 107);
  EXPECT_EQ(t[1].token.dur, 64);
  EXPECT_EQ(t[1].token.b, 0);
}

TEST(Tokenize, OctaveFoldingPreservesPitchClass) {
  for (int p = 0; p < 128; ++p) {
    const int f = fold_pitch(p);
    EXPECT_GE(f, kMinPitch);
    EXPECT_LE(f, kMaxPitch);
    EXPECT_EQ(f % 12, p % 12);
    if (p >= kMinPitch && p <= kMaxPitch) EXPECT_EQ(f, p);
  }
}

TEST(Tokenize, MatchesStraightLineOracle) {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    Score s;
    s.downbeats = {Rational(0)};
    for (int i = 0; i < 500; ++i)
      s.notes.push_back(note(Rational(rng.uniform_int(0, 3000), static_cast<std::int64_t>(rng.uniform_int(1, 97))),
                             Rational(rng.uniform_int(1, 400), static_cast<std::int64_t>(rng.uniform_int(1, 50))),
                             static_cast<int>(rng.uniform_int(0, 128))));
    s = validate_score(s);
    EXPECT_EQ(tokenize(s), oracle_tokenize(s));
  }
}

TEST(Tokenize, OnsetRoundingRollsIntoNextBar) {
  Score s;
  s.downbeats = {Rational(0), Rational(4)};
  s.notes = {note(Rational(0), Rational(1), 60), note(Rational(31, 8), Rational(1), 62)};  // rounds to tatum 16
  const auto t = tokenize(s);
  EXPECT_EQ(t[1].bar, 1);
  EXPECT_EQ(t[1].token.pos, 0);
  EXPECT_EQ(t[1].token.b, 1);
}

TEST(Tokenize, OneBarFlagPerBarAndItIsFirst) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto toks = tokenize(random_grid_score(rng, 200));
    std::map<int, std::vector<int>> flags;
    for (const auto& t : toks) flags[t.bar].push_back(t.token.b);
    for (const auto& [bar, f] : flags) {
      EXPECT_EQ(f.front(), 1);
      EXPECT_EQ(std::count(f.begin(), f.end(), 1), 1);
    }
  }
}

TEST(Detokenize, SingleToken) {
  const Score s = detokenize({{{1, 0, 22, 1}, 0}});
  ASSERT_EQ(s.notes.size(), 1u);
  EXPECT_EQ(s.notes[0].onset, Rational(0));
  EXPECT_EQ(s.notes[0].duration, Rational(1, 8));
  EXPECT_EQ(s.notes[0].pitch, 22);
}

TEST(Detokenize, GridScoresRoundTripExactly) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const Score s = random_grid_score(rng, 100);
    EXPECT_EQ(detokenize(tokenize(s)), s);
  }
}

TEST(Detokenize, Idempotence) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<BarToken> toks;
    const int n = static_cast<int>(rng.uniform_int(1, 60));
    for (int i = 0; i < n; ++i) {
      BarToken t;
      t.bar = static_cast<int>(rng.uniform_int(0, 20));
      t.token = {static_cast<int>(rng.uniform_int(0, 2)), static_cast<int>(rng.uniform_int(0, 16)),
                 static_cast<int>(rng.uniform_int(22, 108)), static_cast<int>(rng.uniform_int(1, 65))};
      toks.push_back(t);
    }
    const Score once = detokenize(toks);
    EXPECT_EQ(detokenize(tokenize(once)), once);
  }
}

TEST(Detokenize, ErrorBoundsOnArbitraryScores) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    Score s;
    s.downbeats = {Rational(0)};
    for (int i = 0; i < 80; ++i)
      s.notes.push_back(note(Rational(rng.uniform_int(0, 10000), 137),
                             Rational(rng.uniform_int(137, 137 * 128), 137 * 16),  // [1/16, 8]
                             static_cast<int>(rng.uniform_int(22, 108))));
    s = validate_score(s);
    const auto toks = tokenize(s);
    const Score back = detokenize(toks);
    ASSERT_EQ(toks.size(), s.notes.size());
    for (std::size_t i = 0; i < toks.size(); ++i) {
      const Rational on = Rational(4 * static_cast<std::int64_t>(toks[i].bar)) + Rational(toks[i].token.pos, 4);
      const Rational dur(toks[i].token.dur, 8);
      const Rational de = on - s.notes[i].onset, dd = dur - s.notes[i].duration;
      EXPECT_LE(de < Rational(0) ? -de : de, Rational(1, 8));
      EXPECT_LE(dd < Rational(0) ? -dd : dd, Rational(1, 16));
    }
  }
}

TEST(Rescale, FourFourIsIdentity) {
  Rng rng(10);
  const Score s = random_grid_score(rng, 50);
  EXPECT_EQ(rescale_bars(s).notes, s.notes);
}

TEST(Rescale, ThreeFourBar) {
  Score s;
  s.downbeats = {Rational(0), Rational(3)};
  s.notes = {note(Rational(3, 2), Rational(3, 4), 60)};
  const Score r = rescale_bars(s);
  EXPECT_EQ(r.notes[0].onset, Rational(2));
  EXPECT_EQ(r.notes[0].duration, Rational(1));
  EXPECT_EQ(r.downbeats[0], Rational(0));
}

TEST(Rescale, MixedMetersMatchPerBarOracle) {
  // 3/4, 3/4, 4/4, 6/8 (3 crotchets), open tail
  const std::vector<Rational> db{Rational(0), Rational(3), Rational(6), Rational(10), Rational(13)};
  Rng rng(12);
  Score s;
  s.downbeats = db;
  for (int i = 0; i < 200; ++i)
    s.notes.push_back(note(Rational(rng.uniform_int(0, 17 * 24), 24), Rational(rng.uniform_int(1, 48), 24),
                           static_cast<int>(rng.uniform_int(30, 100))));
  s = validate_score(s);
  const Score r = rescale_bars(s);
  ASSERT_EQ(r.notes.size(), s.notes.size());
  for (std::size_t i = 0; i < s.notes.size(); ++i) {
    const Note& n = s.notes[i];
    std::size_t m = 0;
    while (m + 1 < db.size() && db[m + 1] <= n.onset) ++m;
    Rational start = db[m], len = m + 1 < db.size() ? db[m + 1] - db[m] : db[m] - db[m - 1];
    std::int64_t bar = static_cast<std::int64_t>(m);
    while (n.onset >= start + len) {  // implicit bars in the open tail
      start += len;
      ++bar;
    }
    EXPECT_EQ(r.notes[i].onset, Rational(4 * bar) + (n.onset - start) * Rational(4) / len) << i;
    EXPECT_EQ(r.notes[i].duration, n.duration * Rational(4) / len) << i;
  }
  for (std::size_t k = 0; k < r.downbeats.size(); ++k) EXPECT_EQ(r.downbeats[k], Rational(4 * static_cast<std::int64_t>(k)));
}

TEST(Rescale, EmptyDownbeatsRejected) {
  Score s;
  EXPECT_THROW(rescale_bars(s), ValidationError);
}

TEST(Segment, Lengths) {
  auto make = [](std::size_t n) {
    std::vector<BarToken> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = {{i % 16 == 0, static_cast<int>(i % 16), 60, 4}, static_cast<int>(i / 16)};
    return v;
  };
  EXPECT_EQ(segment(make(1024), 1024).size(), 1u);
  const auto two = segment(make(1025), 1024);
  ASSERT_EQ(two.size(), 2u);
  EXPECT_EQ(two[1].size(), 1u);
  const auto toks = make(3000);
  const auto three = segment(toks, 1024);
  ASSERT_EQ(three.size(), 3u);
  EXPECT_EQ(three[0].size(), 1024u);
  EXPECT_EQ(three[1].size(), 1024u);
  EXPECT_EQ(three[2].size(), 952u);
  std::vector<BarToken> joined;
  for (const auto& s : three)
    for (std::size_t i = 0; i < s.size(); ++i) joined.push_back({s.tokens[i], s.bar_index[i]});
  EXPECT_EQ(joined, toks);
  // first token keeps its original flag
  EXPECT_EQ(three[1].tokens[0].b, toks[1024].token.b);
  EXPECT_THROW(segment(toks, 0), ValidationError);
}

TEST(Shards, RoundTripAndChecksum) {
  const auto dir = std::filesystem::temp_directory_path() / "cpbert_shards_test";
  std::filesystem::remove_all(dir);
  Rng rng(13);
  std::vector<Piece> pieces;
  for (int i = 0; i < 5; ++i)
    pieces.push_back({"p" + std::to_string(i), "mem", tokenize(random_grid_score(rng, 50))});
  const auto manifest = write_shards(dir, pieces, 2);
  EXPECT_EQ(manifest["pieces"].size(), 5u);
  std::size_t total = 0;
  for (const auto& p : pieces) total += p.tokens.size();
  EXPECT_EQ(manifest["total_notes"].get<std::size_t>(), total);
  const auto back = read_corpus(dir / "manifest.json");
  ASSERT_EQ(back.size(), pieces.size());
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    EXPECT_EQ(back[i].id, pieces[i].id);
    EXPECT_EQ(back[i].tokens, pieces[i].tokens);
  }
  // identical inputs give identical bytes
  const auto first = read_bytes(dir / "shard-00000.bin");
  write_shards(dir, pieces, 2);
  EXPECT_EQ(read_bytes(dir / "shard-00000.bin"), first);
  // corruption is detected
  auto bytes = first;
  bytes[5] ^= 1;
  write_bytes(dir / "shard-00000.bin", bytes);
  EXPECT_THROW(read_corpus(dir / "manifest.json"), ParseError);
  std::filesystem::remove_all(dir);
}
