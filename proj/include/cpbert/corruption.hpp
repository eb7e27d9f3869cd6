#pragma once

#include <algorithm>
#include <array>
#include <climits>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cpbert/error.hpp"
#include "cpbert/random.hpp"
#include "cpbert/tokenizer.hpp"

namespace cpbert {

enum class CorruptionMode { rc, rc_inf, mlm };

inline constexpr int kInfiniteRange = INT_MAX / 4;

inline std::string to_string(CorruptionMode m) {
  switch (m) {
    case CorruptionMode::rc: return "rc";
    case CorruptionMode::rc_inf: return "rc-inf";
    case CorruptionMode::mlm: return "mlm";
  }
  return "?";
}

inline CorruptionMode corruption_mode_from_string(const std::string& s) {
  if (s == "rc") return CorruptionMode::rc;
  if (s == "rc-inf" || s == "rc_inf") return CorruptionMode::rc_inf;
  if (s == "mlm") return CorruptionMode::mlm;
  throw ValidationError("unknown corruption mode: " + s);
}

struct CorruptionConfig {
  double ratio = 0.30;
  CorruptionMode mode = CorruptionMode::rc;
  int range_pos = 4;
  int range_pit = 12;
  int range_dur = 12;
  /// Samples from [lo, hi] instead of the half-open [lo, hi).
  bool inclusive_upper = false;
  std::uint64_t seed = 0;

  int range(int attribute) const {
    return attribute == kPos ? range_pos : attribute == kPitch ? range_pit : range_dur;
  }

  void validate() const {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ValidationError("corruption ratio must lie in [0,1]");
    if (range_pos < 0 || range_pit < 0 || range_dur < 0) throw ValidationError("corruption ranges must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const CorruptionConfig& c) {
  auto r = [](int v) { return v >= kInfiniteRange ? nlohmann::json("inf") : nlohmann::json(v); };
  j = nlohmann::json{{"ratio", c.ratio},
                     {"mode", to_string(c.mode)},
                     {"ranges", {r(c.range_pos), r(c.range_pit), r(c.range_dur)}},
                     {"inclusive_upper", c.inclusive_upper},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, CorruptionConfig& c) {
  c.ratio = j.value("ratio", c.ratio);
  if (j.contains("mode")) c.mode = corruption_mode_from_string(j["mode"].get<std::string>());
  if (j.contains("ranges")) {
    const auto& r = j["ranges"];
    if (!r.is_array() || r.size() != 3) throw ValidationError("corruption ranges must be [pos, pit, dur]");
    auto get = [](const nlohmann::json& v) { return v.is_string() && v == "inf" ? kInfiniteRange : v.get<int>(); };
    c.range_pos = get(r[0]);
    c.range_pit = get(r[1]);
    c.range_dur = get(r[2]);
  }
  c.inclusive_upper = j.value("inclusive_upper", c.inclusive_upper);
  c.seed = j.value("seed", c.seed);
  c.validate();
}

struct CorruptionRecord {
  std::vector<std::size_t> corrupted_indices;
  std::vector<CPToken> originals;
  CorruptionMode mode = CorruptionMode::rc;
};

/// Number of notes corrupted in a window of n tokens: floor(ratio * n).
inline std::size_t corruption_count(std::size_t n_tokens, double ratio) {
  // the epsilon absorbs representation error such as 0.3 * 10 = 3.0000000000000004 or 2.9999...
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n_tokens) + 1e-9));
}

/// Uniform subset of exactly floor(ratio * n) distinct indices, sorted.
inline std::vector<std::size_t> sample_corruption_set(std::size_t n_tokens, const CorruptionConfig& config, Rng& rng) {
  config.validate();
  const std::size_t k = corruption_count(n_tokens, config.ratio);
  std::vector<std::size_t> idx(n_tokens);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(n_tokens)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace corruption_detail {

inline void check_indices(const Segment& s, const std::vector<std::size_t>& indices) {
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= s.tokens.size())
      throw ValidationError("corruption index " + std::to_string(indices[i]) + " out of range");
    if (i > 0 && indices[i] <= indices[i - 1]) throw ValidationError("corruption indices must be sorted and unique");
  }
}

}  // namespace corruption_detail

/// Bounded random perturbation of the selected tokens.
///
/// b is redrawn from {0, 1}; each other attribute v is drawn from
/// [clip(v - r), clip(v + r)), an empty interval keeps v. rc_inf draws every
/// attribute from its whole domain.
inline std::pair<Segment, CorruptionRecord> corrupt_rc(const Segment& segment, const std::vector<std::size_t>& indices,
                                                       const CorruptionConfig& config, Rng& rng) {
  if (config.mode == CorruptionMode::mlm) throw ValidationError("corrupt_rc called with mlm mode");
  config.validate();
  corruption_detail::check_indices(segment, indices);
  Segment out = segment;
  CorruptionRecord rec;
  rec.mode = config.mode;
  rec.corrupted_indices = indices;
  for (std::size_t i : indices) {
    rec.originals.push_back(segment.tokens[i]);
    CPToken& t = out.tokens[i];
    t.b = static_cast<int>(rng.uniform_int(0, 2));
    for (int a : {kPos, kPitch, kDur}) {
      const int lo_dom = VocabSpec::min_value(a);
      const int hi_dom = VocabSpec::max_value(a);
      const int v = t[a];
      int lo, hi;
      if (config.mode == CorruptionMode::rc_inf) {
        lo = lo_dom;
        hi = hi_dom + 1;
      } else {
        const long r = config.range(a);
        lo = static_cast<int>(std::clamp<long>(v - r, lo_dom, hi_dom));
        hi = static_cast<int>(std::clamp<long>(v + r, lo_dom, hi_dom));
        if (config.inclusive_upper) ++hi;
      }
      if (lo < hi) t[a] = static_cast<int>(rng.uniform_int(lo, hi));
    }
  }
  return {std::move(out), std::move(rec)};
}

/// BERT-style masking: 80% of selected tokens become [MASK] in every
/// attribute, 10% get every attribute redrawn from its domain, 10% stay.
inline std::pair<Segment, CorruptionRecord> corrupt_mlm(const Segment& segment, const std::vector<std::size_t>& indices,
                                                        Rng& rng) {
  corruption_detail::check_indices(segment, indices);
  Segment out = segment;
  CorruptionRecord rec;
  rec.mode = CorruptionMode::mlm;
  rec.corrupted_indices = indices;
  for (std::size_t i : indices) {
    rec.originals.push_back(segment.tokens[i]);
    const double u = rng.uniform();
    CPToken& t = out.tokens[i];
    if (u < 0.8) {
      t = CPToken::mask();
    } else if (u < 0.9) {
      for (int a = 0; a < kNumAttributes; ++a)
        t[a] = static_cast<int>(rng.uniform_int(VocabSpec::min_value(a), VocabSpec::max_value(a) + 1));
    }
  }
  return {std::move(out), std::move(rec)};
}

/// Samples the corruption set and applies the configured mode.
inline std::pair<Segment, CorruptionRecord> corrupt(const Segment& segment, const CorruptionConfig& config, Rng& rng) {
  auto indices = sample_corruption_set(segment.tokens.size(), config, rng);
  if (config.mode == CorruptionMode::mlm) return corrupt_mlm(segment, indices, rng);
  return corrupt_rc(segment, indices, config, rng);
}

/// One JSON line per changed attribute: {segment, index, attribute, old, new}.
inline void write_corruption_audit(std::ostream& os, std::size_t segment_ordinal, const Segment& corrupted,
                                   const CorruptionRecord& record) {
  for (std::size_t k = 0; k < record.corrupted_indices.size(); ++k) {
    const std::size_t i = record.corrupted_indices[k];
    for (int a = 0; a < kNumAttributes; ++a) {
      if (record.originals[k][a] == corrupted.tokens[i][a]) continue;
      os << nlohmann::json{{"segment", segment_ordinal},
                           {"index", i},
                           {"attribute", kAttributeNames[a]},
                           {"old", record.originals[k][a]},
                           {"new", corrupted.tokens[i][a]}}
                .dump()
         << "\n";
    }
  }
}

}  // namespace cpbert
