#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpbert/error.hpp"
#include "cpbert/optimizer.hpp"
#include "cpbert/tensor.hpp"

namespace cpbert {

/// Versioned weight container.
///
/// Layout: 8-byte magic "CPBTCKPT", u32 LE version, u64 LE header length,
/// UTF-8 JSON header, then every tensor as row-major little-endian float32 in
/// header order. The header carries the model config, tensor table,
/// optimizer step, seed and free-form metadata.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json header = nlohmann::json::object();
  // group: "model", "adam_m" or "adam_v"
  struct Tensor {
    std::string name;
    std::string group;
    Matrix<float> value;
  };
  std::vector<Tensor> tensors;

  const Tensor* find(const std::string& name, const std::string& group = "model") const {
    for (const auto& t : tensors)
      if (t.name == name && t.group == group) return &t;
    return nullptr;
  }

  std::vector<std::uint8_t> serialize() const {
    nlohmann::json h = header;
    h["tensors"] = nlohmann::json::array();
    for (const auto& t : tensors) h["tensors"].push_back({{"name", t.name}, {"group", t.group}, {"rows", t.value.rows()}, {"cols", t.value.cols()}});
    const std::string hs = h.dump();
    std::vector<std::uint8_t> out{'C', 'P', 'B', 'T', 'C', 'K', 'P', 'T'};
    auto put = [&](std::uint64_t v, int n) {
      for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
    };
    put(kVersion, 4);
    put(hs.size(), 8);
    out.insert(out.end(), hs.begin(), hs.end());
    for (const auto& t : tensors) {
      for (Eigen::Index k = 0; k < t.value.size(); ++k) {
        std::uint32_t bits;
        const float f = t.value.data()[k];
        std::memcpy(&bits, &f, 4);
        put(bits, 4);
      }
    }
    return out;
  }

  static Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
    std::size_t off = 0;
    auto need = [&](std::size_t n) {
      if (off + n > bytes.size()) throw ParseError("truncated checkpoint");
    };
    auto get = [&](int n) {
      need(static_cast<std::size_t>(n));
      std::uint64_t v = 0;
      for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes[off + i]) << (8 * i);
      off += static_cast<std::size_t>(n);
      return v;
    };
    need(8);
    if (std::memcmp(bytes.data(), "CPBTCKPT", 8) != 0) throw ParseError("not a checkpoint file (bad magic)");
    off = 8;
    const auto version = get(4);
    if (version != kVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version));
    const auto hlen = get(8);
    need(hlen);
    Checkpoint c;
    try {
      c.header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                                       bytes.begin() + static_cast<std::ptrdiff_t>(off + hlen));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("corrupt checkpoint header: ") + e.what());
    }
    off += hlen;
    const auto table = c.header.at("tensors");
    c.header.erase("tensors");
    for (const auto& e : table) {
      Tensor t;
      t.name = e.at("name").get<std::string>();
      t.group = e.at("group").get<std::string>();
      t.value.resize(e.at("rows").get<Eigen::Index>(), e.at("cols").get<Eigen::Index>());
      for (Eigen::Index k = 0; k < t.value.size(); ++k) {
        const auto bits = static_cast<std::uint32_t>(get(4));
        float f;
        std::memcpy(&f, &bits, 4);
        t.value.data()[k] = f;
      }
      c.tensors.push_back(std::move(t));
    }
    if (off != bytes.size()) throw ParseError("trailing bytes in checkpoint");
    return c;
  }

  void save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
  }

  /// Copies the tensors of a module (visit order) into the "model" group.
  template <class T, class Module>
  void store_module(Module& m) {
    m.visit([&](const std::string& name, Matrix<T>& v) { tensors.push_back({name, "model", v.template cast<float>()}); });
  }

  /// Loads every tensor the module names; missing tensors are an error unless allow_missing.
  template <class T, class Module>
  void load_module(Module& m, bool allow_missing = false) const {
    m.visit([&](const std::string& name, Matrix<T>& v) {
      const Tensor* t = find(name);
      if (!t) {
        if (allow_missing) return;
        throw ParseError("checkpoint missing tensor " + name);
      }
      if (t->value.rows() != v.rows() || t->value.cols() != v.cols())
        throw ParseError("checkpoint tensor shape mismatch for " + name);
      v = t->value.template cast<T>();
    });
  }

  template <class T>
  void store_optimizer(const std::vector<ParamRef<T>>& params, const AdamState<T>& state) {
    header["optimizer_step"] = state.step;
    for (std::size_t i = 0; i < state.m.size(); ++i) {
      tensors.push_back({params[i].name, "adam_m", state.m[i].template cast<float>()});
      tensors.push_back({params[i].name, "adam_v", state.v[i].template cast<float>()});
    }
  }

  template <class T>
  AdamState<T> load_optimizer(const std::vector<ParamRef<T>>& params) const {
    AdamState<T> s = AdamState<T>::zeros_for(params);
    s.step = header.value("optimizer_step", std::uint64_t{0});
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (const Tensor* t = find(params[i].name, "adam_m")) s.m[i] = t->value.template cast<T>();
      if (const Tensor* t = find(params[i].name, "adam_v")) s.v[i] = t->value.template cast<T>();
    }
    return s;
  }
};

}  // namespace cpbert
