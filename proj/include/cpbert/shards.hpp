#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpbert/error.hpp"
#include "cpbert/tokenizer.hpp"

namespace cpbert {

/// One tokenized piece of a corpus.
struct Piece {
  std::string id;
  std::string source;
  std::vector<BarToken> tokens;
};

inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Shard record layout: u32 LE token count, then per token five u16 LE
/// values (b, pos, pit, dur, bar_index).
inline void append_piece_record(std::vector<std::uint8_t>& out, const std::vector<BarToken>& tokens) {
  auto put16 = [&](int v) {
    if (v < 0 || v > 0xFFFF) throw ValidationError("shard value out of u16 range: " + std::to_string(v));
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
  };
  const auto n = static_cast<std::uint32_t>(tokens.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((n >> (8 * i)) & 0xFF));
  for (const auto& t : tokens) {
    put16(t.token.b);
    put16(t.token.pos);
    put16(t.token.pit);
    put16(t.token.dur);
    put16(t.bar);
  }
}

inline std::vector<BarToken> read_piece_record(const std::vector<std::uint8_t>& bytes, std::size_t& offset) {
  auto need = [&](std::size_t k) {
    if (offset + k > bytes.size()) throw ParseError("truncated shard record");
  };
  need(4);
  std::uint32_t n = 0;
  for (int i = 0; i < 4; ++i) n |= static_cast<std::uint32_t>(bytes[offset + i]) << (8 * i);
  offset += 4;
  need(static_cast<std::size_t>(n) * 10);
  auto get16 = [&]() {
    int v = bytes[offset] | (bytes[offset + 1] << 8);
    offset += 2;
    return v;
  };
  std::vector<BarToken> tokens(n);
  for (auto& t : tokens) {
    t.token.b = get16();
    t.token.pos = get16();
    t.token.pit = get16();
    t.token.dur = get16();
    t.bar = get16();
    if (!t.token.is_clean()) throw ParseError("shard token outside vocabulary range");
  }
  return tokens;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ParseError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Writes pieces into shard files under `dir` and returns the manifest
/// (also saved as dir/manifest.json).
inline nlohmann::json write_shards(const std::filesystem::path& dir, const std::vector<Piece>& pieces,
                                   std::size_t pieces_per_shard = 256) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "cpbert-token-shards";
  manifest["version"] = 1;
  manifest["shards"] = nlohmann::json::array();
  manifest["pieces"] = nlohmann::json::array();
  std::uint64_t checksum = 0xcbf29ce484222325ULL;
  std::size_t total = 0;
  for (std::size_t start = 0, shard = 0; start < pieces.size(); start += pieces_per_shard, ++shard) {
    char name[32];
    std::snprintf(name, sizeof name, "shard-%05zu.bin", shard);
    std::vector<std::uint8_t> bytes;
    for (std::size_t i = start; i < std::min(pieces.size(), start + pieces_per_shard); ++i) {
      manifest["pieces"].push_back({{"id", pieces[i].id},
                                    {"source", pieces[i].source},
                                    {"shard", shard},
                                    {"offset", bytes.size()},
                                    {"n_notes", pieces[i].tokens.size()}});
      append_piece_record(bytes, pieces[i].tokens);
      total += pieces[i].tokens.size();
    }
    checksum = fnv1a64(bytes.data(), bytes.size(), checksum);
    write_bytes(dir / name, bytes);
    manifest["shards"].push_back(name);
  }
  manifest["total_notes"] = total;
  manifest["checksum"] = "fnv1a64:" + hex64(checksum);
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
  return manifest;
}

inline nlohmann::json read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw ParseError("cannot open manifest " + manifest_path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("invalid manifest " + manifest_path.string() + ": " + e.what());
  }
}

/// Loads every piece listed in a manifest and verifies the corpus checksum.
inline std::vector<Piece> read_corpus(const std::filesystem::path& manifest_path) {
  const auto manifest = read_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  std::vector<std::vector<std::uint8_t>> shards;
  std::uint64_t checksum = 0xcbf29ce484222325ULL;
  try {
    for (const auto& name : manifest.at("shards")) {
      shards.push_back(read_bytes(dir / name.get<std::string>()));
      checksum = fnv1a64(shards.back().data(), shards.back().size(), checksum);
    }
    if (manifest.contains("checksum") && manifest["checksum"] != "fnv1a64:" + hex64(checksum))
      throw ParseError("corpus checksum mismatch for " + manifest_path.string());
    std::vector<Piece> pieces;
    for (const auto& p : manifest.at("pieces")) {
      Piece piece;
      piece.id = p.at("id").get<std::string>();
      piece.source = p.value("source", "");
      const auto shard = p.at("shard").get<std::size_t>();
      if (shard >= shards.size()) throw ParseError("manifest references missing shard");
      std::size_t offset = p.at("offset").get<std::size_t>();
      piece.tokens = read_piece_record(shards[shard], offset);
      if (piece.tokens.size() != p.at("n_notes").get<std::size_t>())
        throw ParseError("note count mismatch for piece " + piece.id);
      pieces.push_back(std::move(piece));
    }
    return pieces;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("invalid manifest " + manifest_path.string() + ": " + e.what());
  }
}

}  // namespace cpbert
