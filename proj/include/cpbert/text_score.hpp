#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "cpbert/error.hpp"
#include "cpbert/score.hpp"

namespace cpbert {

namespace text_detail {

using nlohmann::json;

inline Rational time_value(const json& v, const std::string& where) {
  if (v.is_number_integer()) return Rational(v.get<std::int64_t>());
  if (v.is_number()) return Rational::from_double(v.get<double>());
  if (v.is_string()) {
    // exact "num/den" form
    const auto s = v.get<std::string>();
    const auto slash = s.find('/');
    try {
      if (slash == std::string::npos) return Rational(std::stoll(s));
      return Rational(std::stoll(s.substr(0, slash)), std::stoll(s.substr(slash + 1)));
    } catch (const std::logic_error&) {
      throw ParseError("schema violation: " + where + " is not a number or \"num/den\" string");
    }
  }
  throw ParseError("schema violation: " + where + " must be a number");
}

inline json time_json(const Rational& r) {
  if (r.den() == 1) return r.num();
  // powers of two up to 2^20 are exact as doubles
  if ((r.den() & (r.den() - 1)) == 0 && r.den() <= (1 << 20) && std::llabs(r.num()) < (1LL << 52))
    return r.to_double();
  std::ostringstream os;
  os << r.num() << '/' << r.den();
  return os.str();
}

}  // namespace text_detail

/// Parses the structured-text score schema:
/// {"time_unit": "beats"|"seconds", "downbeats": [...], "notes": [{"onset", "duration", "pitch", "velocity"?, "track"?}]}
inline Score parse_text_score(const std::string& text) {
  using text_detail::json;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("schema violation: invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ParseError("schema violation: document must be an object");
  Score score;
  if (doc.contains("time_unit")) {
    const auto& tu = doc["time_unit"];
    if (tu == "beats") score.time_unit = TimeUnit::beats;
    else if (tu == "seconds") score.time_unit = TimeUnit::seconds;
    else throw ParseError("schema violation: time_unit must be \"beats\" or \"seconds\"");
  }
  if (doc.contains("downbeats")) {
    if (!doc["downbeats"].is_array()) throw ParseError("schema violation: downbeats must be an array");
    for (std::size_t i = 0; i < doc["downbeats"].size(); ++i)
      score.downbeats.push_back(text_detail::time_value(doc["downbeats"][i], "downbeats[" + std::to_string(i) + "]"));
  }
  if (!doc.contains("notes") || !doc["notes"].is_array()) throw ParseError("schema violation: missing notes array");
  const auto& notes = doc["notes"];
  for (std::size_t i = 0; i < notes.size(); ++i) {
    const auto& rec = notes[i];
    const std::string where = "notes[" + std::to_string(i) + "]";
    if (!rec.is_object()) throw ParseError("schema violation: " + where + " must be an object");
    for (const char* key : {"onset", "duration", "pitch"})
      if (!rec.contains(key)) throw ParseError("schema violation: " + where + " missing \"" + key + "\"");
    Note n;
    n.onset = text_detail::time_value(rec["onset"], where + ".onset");
    n.duration = text_detail::time_value(rec["duration"], where + ".duration");
    if (!rec["pitch"].is_number_integer()) throw ParseError("schema violation: " + where + ".pitch must be an integer");
    n.pitch = rec["pitch"].get<int>();
    if (rec.contains("velocity") && !rec["velocity"].is_null()) {
      if (!rec["velocity"].is_number_integer())
        throw ParseError("schema violation: " + where + ".velocity must be an integer");
      n.velocity = rec["velocity"].get<int>();
    }
    if (rec.contains("track")) {
      if (!rec["track"].is_number_integer()) throw ParseError("schema violation: " + where + ".track must be an integer");
      n.track = rec["track"].get<int>();
    }
    score.notes.push_back(n);
  }
  if (doc.contains("source_meta") && doc["source_meta"].is_string()) score.source_meta = doc["source_meta"];
  return validate_score(std::move(score));
}

inline std::string write_text_score(const Score& score) {
  using text_detail::json;
  json doc;
  doc["time_unit"] = score.time_unit == TimeUnit::beats ? "beats" : "seconds";
  doc["downbeats"] = json::array();
  for (const auto& d : score.downbeats) doc["downbeats"].push_back(text_detail::time_json(d));
  doc["notes"] = json::array();
  for (const auto& n : score.notes) {
    json rec{{"onset", text_detail::time_json(n.onset)},
             {"duration", text_detail::time_json(n.duration)},
             {"pitch", n.pitch}};
    if (n.velocity) rec["velocity"] = *n.velocity;
    if (n.track != 0) rec["track"] = n.track;
    doc["notes"].push_back(rec);
  }
  if (!score.source_meta.empty()) doc["source_meta"] = score.source_meta;
  return doc.dump();
}

inline Score parse_text_score_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text_score(ss.str());
}

}  // namespace cpbert
