#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "cpbert/error.hpp"
#include "cpbert/score.hpp"

namespace cpbert {

/// Low-level event after delta-time decoding.
struct RawEvent {
  enum class Kind { note_on, note_off, tempo_change, time_signature };
  Kind kind;
  std::uint64_t tick = 0;
  int track = 0;
  int channel = 0;
  // note: {pitch, velocity}; tempo: {usec per quarter}; time signature: {numerator, denominator}
  std::array<int, 2> payload{};
};

namespace smf_detail {

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  bool done() const { return pos_ >= bytes_.size(); }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::uint8_t u8(const char* what) {
    if (pos_ >= bytes_.size()) throw ParseError(std::string("truncated ") + what);
    return bytes_[pos_++];
  }
  std::uint8_t peek(const char* what) const {
    if (pos_ >= bytes_.size()) throw ParseError(std::string("truncated ") + what);
    return bytes_[pos_];
  }
  std::uint32_t be(int n, const char* what) {
    std::uint32_t v = 0;
    for (int i = 0; i < n; ++i) v = (v << 8) | u8(what);
    return v;
  }
  std::uint32_t vlq(const char* what) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      std::uint8_t b = u8(what);
      v = (v << 7) | (b & 0x7F);
      if (!(b & 0x80)) return v;
    }
    throw ParseError(std::string("variable-length quantity too long in ") + what);
  }
  void skip(std::size_t n, const char* what) {
    if (n > remaining()) throw ParseError(std::string("truncated ") + what);
    pos_ += n;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (n > remaining()) throw ParseError(std::string("truncated ") + what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

struct Track {
  std::vector<RawEvent> events;
  std::uint64_t end_tick = 0;
};

inline Track read_track(std::span<const std::uint8_t> data, int track_index) {
  Reader r(data);
  Track out;
  std::uint64_t tick = 0;
  std::uint8_t status = 0;
  while (!r.done()) {
    tick += r.vlq("track chunk");
    std::uint8_t b = r.peek("track chunk");
    if (b & 0x80) {
      r.u8("track chunk");
      if (b < 0xF0) status = b;
    } else if (status == 0) {
      throw ParseError("data byte without running status in track " + std::to_string(track_index));
    } else {
      b = status;
    }
    if (b == 0xFF) {
      const std::uint8_t type = r.u8("meta event");
      const std::uint32_t len = r.vlq("meta event");
      auto body = r.take(len, "track chunk");
      if (type == 0x2F) {
        out.end_tick = tick;
        break;
      }
      if (type == 0x51 && len >= 3) {
        RawEvent e{RawEvent::Kind::tempo_change, tick, track_index, 0, {}};
        e.payload[0] = (body[0] << 16) | (body[1] << 8) | body[2];
        out.events.push_back(e);
      } else if (type == 0x58 && len >= 2) {
        if (body[1] > 6) throw ParseError("unsupported time-signature denominator exponent");
        RawEvent e{RawEvent::Kind::time_signature, tick, track_index, 0, {}};
        e.payload = {body[0], 1 << body[1]};
        if (e.payload[0] == 0) throw ParseError("time signature with zero numerator");
        out.events.push_back(e);
      }
      continue;
    }
    if (b == 0xF0 || b == 0xF7) {
      r.skip(r.vlq("sysex event"), "track chunk");
      continue;
    }
    const int kind = b & 0xF0;
    const int channel = b & 0x0F;
    const int nbytes = (kind == 0xC0 || kind == 0xD0) ? 1 : 2;
    const int d1 = r.u8("channel event");
    const int d2 = nbytes == 2 ? r.u8("channel event") : 0;
    if (kind == 0x90 || kind == 0x80) {
      const bool on = kind == 0x90 && d2 > 0;
      out.events.push_back(
          {on ? RawEvent::Kind::note_on : RawEvent::Kind::note_off, tick, track_index, channel, {d1 & 0x7F, d2}});
    }
    out.end_tick = tick;
  }
  out.end_tick = std::max(out.end_tick, tick);
  return out;
}

}  // namespace smf_detail

/// Downbeats in ticks from time-signature events; a bar of n/d spans n*4/d crotchets.
/// A signature change starts a new bar at its tick. Default 4/4 from tick 0.
inline std::vector<Rational> downbeats_from_signatures(std::vector<std::pair<std::uint64_t, std::pair<int, int>>> sigs,
                                                       std::uint32_t tpq, const Rational& end_beats) {
  std::stable_sort(sigs.begin(), sigs.end(), [](auto& a, auto& b) { return a.first < b.first; });
  if (sigs.empty() || sigs.front().first != 0) sigs.insert(sigs.begin(), {0, {4, 4}});
  std::vector<Rational> out;
  for (std::size_t s = 0; s < sigs.size(); ++s) {
    const Rational start(static_cast<std::int64_t>(sigs[s].first), tpq);
    const Rational bar(4 * static_cast<std::int64_t>(sigs[s].second.first), sigs[s].second.second);
    const bool last = s + 1 == sigs.size();
    const Rational stop = last ? end_beats : Rational(static_cast<std::int64_t>(sigs[s + 1].first), tpq);
    for (Rational t = start; t < stop || (out.empty() && t == start); t += bar) {
      if (out.empty() || out.back() < t) out.push_back(t);
    }
  }
  return out;
}

/// Decodes a Standard MIDI File (format 0 or 1) into a beat-unit Score.
///
/// Note-on with velocity 0 is a note-off. A repeated note-on for an open
/// (track, channel, pitch) closes the earlier note. Notes still open at the
/// end of their track are closed there and reported through `warnings`.
inline Score parse_smf(std::span<const std::uint8_t> bytes, std::vector<std::string>* warnings = nullptr) {
  auto warn = [&](std::string msg) {
    if (warnings) warnings->push_back(std::move(msg));
  };
  smf_detail::Reader r(bytes);
  if (r.remaining() < 14) throw ParseError("malformed header: file too short");
  auto magic = r.take(4, "header");
  if (std::string(magic.begin(), magic.end()) != "MThd") throw ParseError("malformed header: missing MThd");
  const std::uint32_t hlen = r.be(4, "header");
  if (hlen < 6) throw ParseError("malformed header: length < 6");
  const std::uint32_t format = r.be(2, "header");
  const std::uint32_t ntracks = r.be(2, "header");
  const std::uint32_t division = r.be(2, "header");
  r.skip(hlen - 6, "header");
  if (format == 2) throw ParseError("unsupported SMF format 2");
  if (format > 2) throw ParseError("malformed header: unknown format " + std::to_string(format));
  if (division & 0x8000) throw ParseError("unsupported SMPTE time division");
  if (division == 0) throw ParseError("malformed header: zero ticks per quarter");
  const std::uint32_t tpq = division;

  std::vector<smf_detail::Track> tracks;
  while (tracks.size() < ntracks) {
    if (r.remaining() < 8) throw ParseError("truncated track chunk: expected " + std::to_string(ntracks) + " tracks");
    auto id = r.take(4, "chunk header");
    const std::uint32_t len = r.be(4, "chunk header");
    if (len > r.remaining()) throw ParseError("truncated track chunk");
    auto body = r.take(len, "track chunk");
    if (std::string(id.begin(), id.end()) != "MTrk") continue;
    tracks.push_back(smf_detail::read_track(body, static_cast<int>(tracks.size())));
  }

  Score score;
  score.time_unit = TimeUnit::beats;
  score.source_meta = "smf format " + std::to_string(format) + ", tpq " + std::to_string(tpq);
  std::vector<std::pair<std::uint64_t, std::pair<int, int>>> sigs;
  std::uint64_t span_end = 0;

  for (const auto& tr : tracks) {
    struct Open {
      std::uint64_t tick;
      int velocity;
    };
    std::map<std::pair<int, int>, Open> open;  // (channel, pitch)
    auto close = [&](int channel, int pitch, const Open& o, std::uint64_t tick, int track) {
      if (tick <= o.tick) {
        warn("dropped zero-length note pitch " + std::to_string(pitch) + " at tick " + std::to_string(o.tick) +
             " in track " + std::to_string(track));
        return;
      }
      Note n;
      n.onset = Rational(static_cast<std::int64_t>(o.tick), tpq);
      n.duration = Rational(static_cast<std::int64_t>(tick - o.tick), tpq);
      n.pitch = pitch;
      n.velocity = o.velocity;
      n.track = track;
      (void)channel;
      score.notes.push_back(n);
      span_end = std::max(span_end, tick);
    };
    for (const RawEvent& e : tr.events) {
      switch (e.kind) {
        case RawEvent::Kind::note_on: {
          const auto key = std::make_pair(e.channel, e.payload[0]);
          if (auto it = open.find(key); it != open.end()) {
            close(e.channel, e.payload[0], it->second, e.tick, e.track);
            open.erase(it);
          }
          open[key] = Open{e.tick, e.payload[1]};
          break;
        }
        case RawEvent::Kind::note_off: {
          const auto key = std::make_pair(e.channel, e.payload[0]);
          if (auto it = open.find(key); it != open.end()) {
            close(e.channel, e.payload[0], it->second, e.tick, e.track);
            open.erase(it);
          }
          break;
        }
        case RawEvent::Kind::time_signature:
          sigs.push_back({e.tick, {e.payload[0], e.payload[1]}});
          break;
        case RawEvent::Kind::tempo_change:
          break;
      }
    }
    const int track_index = static_cast<int>(&tr - tracks.data());
    for (const auto& [key, o] : open) {
      warn("unmatched note-on pitch " + std::to_string(key.second) + " at tick " + std::to_string(o.tick) +
           " in track " + std::to_string(track_index) + "; closed at track end");
      close(key.first, key.second, o, tr.end_tick, track_index);
    }
    span_end = std::max(span_end, tr.end_tick);
  }

  score.downbeats = downbeats_from_signatures(std::move(sigs), tpq, Rational(static_cast<std::int64_t>(span_end), tpq));
  return validate_score(std::move(score));
}

inline Score parse_smf_file(const std::string& path, std::vector<std::string>* warnings = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_smf(bytes, warnings);
}

/// Writes notes as a format-1 SMF with one chunk per track id.
/// Onsets and durations must lie on the 1/tpq grid.
inline std::vector<std::uint8_t> write_smf(const Score& score, std::uint16_t tpq = 480) {
  auto put_be = [](std::vector<std::uint8_t>& out, std::uint32_t v, int n) {
    for (int i = n - 1; i >= 0; --i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
  };
  auto put_vlq = [](std::vector<std::uint8_t>& out, std::uint32_t v) {
    std::uint8_t buf[5];
    int n = 0;
    buf[n++] = v & 0x7F;
    while (v >>= 7) buf[n++] = static_cast<std::uint8_t>((v & 0x7F) | 0x80);
    while (n) out.push_back(buf[--n]);
  };
  auto to_tick = [tpq](const Rational& t) {
    const Rational x = t * Rational(tpq);
    if (x.den() != 1) throw ValidationError("time not on the tick grid");
    return static_cast<std::uint32_t>(x.num());
  };

  std::map<int, std::vector<std::tuple<std::uint32_t, int, int, int>>> per_track;  // tick, order, pitch, vel
  for (const Note& n : score.notes) {
    auto& ev = per_track[n.track];
    ev.emplace_back(to_tick(n.onset + n.duration), 0, n.pitch, 0);
    ev.emplace_back(to_tick(n.onset), 1, n.pitch, n.velocity.value_or(64));
  }
  if (per_track.empty()) per_track[0] = {};

  std::vector<std::uint8_t> out{'M', 'T', 'h', 'd'};
  put_be(out, 6, 4);
  put_be(out, 1, 2);
  put_be(out, static_cast<std::uint32_t>(per_track.size()), 2);
  put_be(out, tpq, 2);
  for (auto& [track, ev] : per_track) {
    std::sort(ev.begin(), ev.end());
    std::vector<std::uint8_t> body;
    std::uint32_t last = 0;
    for (auto& [tick, order, pitch, vel] : ev) {
      put_vlq(body, tick - last);
      last = tick;
      body.push_back(order == 1 ? 0x90 : 0x80);
      body.push_back(static_cast<std::uint8_t>(pitch));
      body.push_back(static_cast<std::uint8_t>(vel));
    }
    put_vlq(body, 0);
    body.insert(body.end(), {0xFF, 0x2F, 0x00});
    out.insert(out.end(), {'M', 'T', 'r', 'k'});
    put_be(out, static_cast<std::uint32_t>(body.size()), 4);
    out.insert(out.end(), body.begin(), body.end());
  }
  return out;
}

}  // namespace cpbert
