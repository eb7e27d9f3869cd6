#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include <map>
#include <set>

#include "cpbert/random.hpp"
#include "cpbert/smf.hpp"
#include "cpbert/text_score.hpp"

using namespace cpbert;

namespace {

// Minimal SMF builder for hand-written byte streams.
std::vector<std::uint8_t> smf(std::uint16_t format, std::uint16_t tpq, const std::vector<std::vector<std::uint8_t>>& tracks) {
  std::vector<std::uint8_t> out{'M', 'T', 'h', 'd', 0, 0, 0, 6};
  auto be16 = [&](std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
  };
  be16(format);
  be16(static_cast<std::uint16_t>(tracks.size()));
  be16(tpq);
  for (const auto& t : tracks) {
    out.insert(out.end(), {'M', 'T', 'r', 'k'});
    const auto n = static_cast<std::uint32_t>(t.size());
    out.insert(out.end(), {static_cast<std::uint8_t>(n >> 24), static_cast<std::uint8_t>(n >> 16),
                           static_cast<std::uint8_t>(n >> 8), static_cast<std::uint8_t>(n)});
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

Rational frac(const std::string& s) {
  const auto slash = s.find('/');
  return Rational(std::stoll(s.substr(0, slash)), std::stoll(s.substr(slash + 1)));
}

Note note(Rational on, Rational dur, int pitch, int track = 0) {
  Note n;
  n.onset = on;
  n.duration = dur;
  n.pitch = pitch;
  n.track = track;
  return n;
}

}  // namespace

TEST(Rational, ArithmeticAndRounding) {
  EXPECT_EQ(Rational(1, 2) + Rational(1, 3), Rational(5, 6));
  EXPECT_EQ(Rational(2, 4), Rational(1, 2));
  EXPECT_EQ(Rational(-3, 6).den(), 2);
  EXPECT_EQ(Rational(3, -6), Rational(-1, 2));
  EXPECT_EQ(Rational(5, 2).round_half_up(), 3);
  EXPECT_EQ(Rational(-5, 2).round_half_up(), -2);
  EXPECT_EQ(Rational(7, 3).floor(), 2);
  EXPECT_EQ(Rational(-7, 3).floor(), -3);
  EXPECT_EQ(Rational::from_double(0.375), Rational(3, 8));
  EXPECT_LT(Rational(1, 3), Rational(1, 2));
  EXPECT_THROW(Rational(1, 0), std::domain_error);
}

TEST(Smf, SingleNoteNoMeta) {
  const auto bytes = smf(0, 480, {{0x00, 0x90, 60, 100, 0x83, 0x60, 0x80, 60, 0, 0x00, 0xFF, 0x2F, 0x00}});
  const Score s = parse_smf(bytes);
  ASSERT_EQ(s.notes.size(), 1u);
  EXPECT_EQ(s.notes[0].onset, Rational(0));
  EXPECT_EQ(s.notes[0].duration, Rational(1));
  EXPECT_EQ(s.notes[0].pitch, 60);
  EXPECT_EQ(s.notes[0].velocity, 100);
  ASSERT_FALSE(s.downbeats.empty());
  EXPECT_EQ(s.downbeats[0], Rational(0));
  EXPECT_EQ(s.time_unit, TimeUnit::beats);
}

TEST(Smf, ThreeFourDownbeats) {
  // 3/4 at tick 0, one note spanning 9 crotchets
  const auto bytes = smf(0, 96, {{0x00, 0xFF, 0x58, 0x04, 3, 2, 24, 8,  //
                                  0x00, 0x90, 62, 64,                   //
                                  0x86, 0x60, 0x80, 62, 0,              // 864 = 9 * 96
                                  0x00, 0xFF, 0x2F, 0x00}});
  const Score s = parse_smf(bytes);
  ASSERT_EQ(s.downbeats.size(), 3u);
  EXPECT_EQ(s.downbeats[0], Rational(0));
  EXPECT_EQ(s.downbeats[1], Rational(3));
  EXPECT_EQ(s.downbeats[2], Rational(6));
}

TEST(Smf, FourFourDownbeatsCoverSpan) {
  // property: only 4/4 -> downbeats are exactly 4k over the span
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Score sc;
    const int n = static_cast<int>(rng.uniform_int(1, 20));
    for (int i = 0; i < n; ++i)
      sc.notes.push_back(note(Rational(rng.uniform_int(0, 400), 8), Rational(rng.uniform_int(1, 40), 8),
                              static_cast<int>(rng.uniform_int(21, 109))));
    sc = validate_score(sc);
    const Score back = parse_smf(write_smf(sc));
    Rational end(0);
    for (const auto& x : sc.notes) end = std::max(end, x.onset + x.duration);  // track span
    std::size_t k = 0;
    for (; Rational(4 * static_cast<std::int64_t>(k)) < end; ++k) {
      ASSERT_LT(k, back.downbeats.size());
      EXPECT_EQ(back.downbeats[k], Rational(4 * static_cast<std::int64_t>(k)));
    }
    EXPECT_EQ(back.downbeats.size(), k);
  }
}

TEST(Smf, GoldenTwoTrackFixture) {
  const std::string dir = CPBERT_TEST_DATA;
  std::ifstream gin(dir + "/two_track.golden.json");
  ASSERT_TRUE(gin.good());
  const auto golden = nlohmann::json::parse(gin);
  std::vector<std::string> warnings;
  const Score s = parse_smf_file(dir + "/two_track.mid", &warnings);
  EXPECT_TRUE(warnings.empty());
  ASSERT_EQ(s.notes.size(), golden["notes"].size());
  ASSERT_EQ(s.notes.size(), 10u);
  for (std::size_t i = 0; i < s.notes.size(); ++i) {
    const auto& g = golden["notes"][i];
    EXPECT_EQ(s.notes[i].onset, frac(g["onset"])) << i;
    EXPECT_EQ(s.notes[i].duration, frac(g["duration"])) << i;
    EXPECT_EQ(s.notes[i].pitch, g["pitch"].get<int>()) << i;
    EXPECT_EQ(s.notes[i].velocity, g["velocity"].get<int>()) << i;
    EXPECT_EQ(s.notes[i].track, g["track"].get<int>()) << i;
  }
  ASSERT_EQ(s.downbeats.size(), golden["downbeats"].size());
  for (std::size_t i = 0; i < s.downbeats.size(); ++i) EXPECT_EQ(s.downbeats[i], frac(golden["downbeats"][i]));
}

TEST(Smf, RunningStatusAndVelocityZeroNoteOff) {
  const auto bytes = smf(0, 480, {{0x00, 0x90, 60, 90,  //
                                   0x00, 64, 80,        // running status note-on
                                   0x83, 0x60, 60, 0,   // running status, velocity 0 = off
                                   0x81, 0x70, 64, 0,   // +240
                                   0x00, 0xFF, 0x2F, 0x00}});
  const Score s = parse_smf(bytes);
  ASSERT_EQ(s.notes.size(), 2u);
  EXPECT_EQ(s.notes[0].pitch, 60);
  EXPECT_EQ(s.notes[0].duration, Rational(1));
  EXPECT_EQ(s.notes[1].pitch, 64);
  EXPECT_EQ(s.notes[1].duration, Rational(3, 2));
}

TEST(Smf, OverlappingSamePitchLastOnWins) {
  const auto bytes = smf(0, 480, {{0x00, 0x90, 60, 90,       //
                                   0x81, 0x70, 0x90, 60, 70,  // re-trigger at 240
                                   0x81, 0x70, 0x80, 60, 0,   // off at 480
                                   0x00, 0xFF, 0x2F, 0x00}});
  const Score s = parse_smf(bytes);
  ASSERT_EQ(s.notes.size(), 2u);
  EXPECT_EQ(s.notes[0].duration, Rational(1, 2));
  EXPECT_EQ(s.notes[1].onset, Rational(1, 2));
  EXPECT_EQ(s.notes[1].velocity, 70);
}

TEST(Smf, UnmatchedNoteOnClosedAtTrackEnd) {
  const auto bytes = smf(0, 480, {{0x00, 0x90, 67, 90, 0x87, 0x40, 0xFF, 0x2F, 0x00}});  // end at 960
  std::vector<std::string> warnings;
  const Score s = parse_smf(bytes, &warnings);
  ASSERT_EQ(s.notes.size(), 1u);
  EXPECT_EQ(s.notes[0].duration, Rational(2));
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("unmatched"), std::string::npos);
}

TEST(Smf, Errors) {
  EXPECT_THROW(parse_smf(std::vector<std::uint8_t>{'M', 'T', 'h'}), ParseError);
  auto bad_magic = smf(0, 480, {});
  bad_magic[0] = 'X';
  EXPECT_THROW(parse_smf(bad_magic), ParseError);
  EXPECT_THROW(parse_smf(smf(2, 480, {{0x00, 0xFF, 0x2F, 0x00}})), ParseError);
  auto truncated = smf(0, 480, {{0x00, 0x90, 60, 90, 0x00, 0xFF, 0x2F, 0x00}});
  truncated.resize(truncated.size() - 3);
  EXPECT_THROW(parse_smf(truncated), ParseError);
  auto smpte = smf(0, 0xE728, {{0x00, 0xFF, 0x2F, 0x00}});
  EXPECT_THROW(parse_smf(smpte), ParseError);
  try {
    parse_smf(smf(2, 480, {}));
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("format 2"), std::string::npos);
  }
}

TEST(Smf, WriteParseRoundTripIsLossFree) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Score sc;
    sc.downbeats = {Rational(0)};
    const int n = static_cast<int>(rng.uniform_int(1, 30));
    for (int i = 0; i < n; ++i) {
      Note x = note(Rational(rng.uniform_int(0, 4000), 480), Rational(rng.uniform_int(1, 2000), 480),
                    static_cast<int>(rng.uniform_int(0, 128)), static_cast<int>(rng.uniform_int(0, 3)));
      x.velocity = static_cast<int>(rng.uniform_int(1, 128));
      sc.notes.push_back(x);
    }
    // distinct (track, pitch) intervals must not overlap for a faithful SMF; drop overlaps
    sc = validate_score(sc);
    std::vector<Note> kept;
    for (const auto& x : sc.notes) {
      bool clash = false;
      for (const auto& k : kept)
        clash = clash || (k.track == x.track && k.pitch == x.pitch && x.onset < k.onset + k.duration &&
                          k.onset < x.onset + x.duration);
      if (!clash) kept.push_back(x);
    }
    // tracks must be contiguous from 0 because the chunk index becomes the track id
    std::set<int> used;
    for (const auto& k : kept) used.insert(k.track);
    std::map<int, int> remap;
    for (int t : used) remap[t] = static_cast<int>(remap.size());
    for (auto& k : kept) k.track = remap[k.track];
    sc.notes = kept;
    sc = validate_score(sc);
    const Score back = parse_smf(write_smf(sc));
    EXPECT_EQ(back.notes, sc.notes);
  }
}

TEST(TextScore, EmptyNoteList) {
  const Score s = parse_text_score(R"({"downbeats": [0], "notes": []})");
  EXPECT_TRUE(s.notes.empty());
  ASSERT_EQ(s.downbeats.size(), 1u);
}

TEST(TextScore, RecordLandsInSecondBar) {
  const Score s = parse_text_score(R"({"downbeats": [0, 4, 8], "notes": [{"onset": 4.0, "duration": 0.5, "pitch": 69}]})");
  ASSERT_EQ(s.notes.size(), 1u);
  EXPECT_EQ(s.notes[0].onset, Rational(4));
  EXPECT_EQ(s.notes[0].duration, Rational(1, 2));
  EXPECT_EQ(s.notes[0].pitch, 69);
  const auto bar = std::upper_bound(s.downbeats.begin(), s.downbeats.end(), s.notes[0].onset) - s.downbeats.begin() - 1;
  EXPECT_EQ(bar, 1);
}

TEST(TextScore, ZeroDurationRejected) {
  try {
    parse_text_score(R"({"downbeats": [0], "notes": [{"onset": 0, "duration": 0, "pitch": 60}]})");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("non-positive duration"), std::string::npos);
  }
}

TEST(TextScore, SchemaViolations) {
  EXPECT_THROW(parse_text_score("not json"), ParseError);
  EXPECT_THROW(parse_text_score(R"({"downbeats": [0]})"), ParseError);
  EXPECT_THROW(parse_text_score(R"({"notes": [{"onset": 0, "pitch": 60}]})"), ParseError);
  EXPECT_THROW(parse_text_score(R"({"notes": [{"onset": 0, "duration": 1, "pitch": 60.5}]})"), ParseError);
  EXPECT_THROW(parse_text_score(R"({"time_unit": "ticks", "notes": []})"), ParseError);
  EXPECT_THROW(parse_text_score(R"({"downbeats": [0, 4, 2], "notes": []})"), ValidationError);
}

TEST(TextScore, ExactFractionsAndRoundTrip) {
  const Score s = parse_text_score(
      R"({"time_unit": "seconds", "notes": [{"onset": "1/3", "duration": "2/3", "pitch": 60, "velocity": 77, "track": 2}]})");
  EXPECT_EQ(s.time_unit, TimeUnit::seconds);
  EXPECT_EQ(s.notes[0].onset, Rational(1, 3));
  EXPECT_EQ(s.notes[0].velocity, 77);
  EXPECT_EQ(parse_text_score(write_text_score(s)), s);
}

TEST(ValidateScore, IdempotentAndSorts) {
  Score s;
  s.downbeats = {Rational(0), Rational(4)};
  s.notes = {note(Rational(2), Rational(1), 64), note(Rational(0), Rational(1), 67), note(Rational(0), Rational(1), 60, 1),
             note(Rational(0), Rational(1), 60, 0)};
  const Score v = validate_score(s);
  EXPECT_EQ(v.notes[0], note(Rational(0), Rational(1), 60, 0));
  EXPECT_EQ(v.notes[1], note(Rational(0), Rational(1), 60, 1));
  EXPECT_EQ(v.notes[2].pitch, 67);
  EXPECT_EQ(v.notes[3].pitch, 64);
  EXPECT_EQ(validate_score(v), v);
}

TEST(ValidateScore, InvariantViolations) {
  Score s;
  s.downbeats = {Rational(0), Rational(0)};
  try {
    validate_score(s);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("downbeats not strictly increasing"), std::string::npos);
  }
  Score p;
  p.notes = {note(Rational(0), Rational(1), 128)};
  EXPECT_THROW(validate_score(p), ValidationError);
  Score neg;
  neg.notes = {note(Rational(-1), Rational(1), 60)};
  EXPECT_THROW(validate_score(neg), ValidationError);
  Score before;
  before.downbeats = {Rational(1)};
  before.notes = {note(Rational(0), Rational(1), 60)};
  EXPECT_THROW(validate_score(before), ValidationError);
  Score vel;
  vel.notes = {note(Rational(0), Rational(1), 60)};
  vel.notes[0].velocity = 0;
  EXPECT_THROW(validate_score(vel), ValidationError);
}
