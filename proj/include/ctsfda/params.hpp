#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>

#include <json.hpp>

#include "ctsfda/errors.hpp"
#include "ctsfda/tensor.hpp"

namespace ctsfda {

inline std::uint64_t fnv1a(const void* bytes, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

// Named parameter arrays with a per-array frozen flag. Buffers (e.g. batch
// norm running statistics) are state carried alongside the weights; they are
// never touched by the optimizer.
template <typename T>
class ModelParams {
 public:
  std::map<std::string, Tensor<T>> arrays;
  std::set<std::string> frozen;
  std::set<std::string> buffers;

  Tensor<T>& at(const std::string& name) {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  void add(const std::string& name, Tensor<T> t, bool buffer = false) {
    arrays.emplace(name, std::move(t));
    if (buffer) buffers.insert(name);
  }

  bool is_frozen(const std::string& name) const { return frozen.count(name); }
  bool all_frozen() const { return frozen.size() == arrays.size(); }

  // Content hash over every array (names, shapes, raw bytes).
  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : arrays) {
      h = fnv1a(name.data(), name.size(), h);
      for (auto d : t.shape) h = fnv1a(&d, sizeof(d), h);
      h = fnv1a(t.data.data(), t.data.size() * sizeof(T), h);
    }
    return h;
  }

  // Hash restricted to the frozen subset.
  std::uint64_t frozen_fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : arrays) {
      if (!frozen.count(name)) continue;
      h = fnv1a(name.data(), name.size(), h);
      h = fnv1a(t.data.data(), t.data.size() * sizeof(T), h);
    }
    return h;
  }

  std::uint64_t frozen_fingerprint_at_freeze = 0;

  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : arrays)
      if (!buffers.count(name)) n += t.size();
    return n;
  }
};

// Flag every array frozen and record the reference fingerprint.
template <typename T>
ModelParams<T>& freeze(ModelParams<T>& p) {
  for (const auto& [name, t] : p.arrays) p.frozen.insert(name);
  p.frozen_fingerprint_at_freeze = p.frozen_fingerprint();
  return p;
}

// True iff the frozen subset is bit-identical to its state at freeze time.
template <typename T>
bool assert_frozen(const ModelParams<T>& p) {
  if (p.frozen.empty()) return false;
  return p.frozen_fingerprint() == p.frozen_fingerprint_at_freeze;
}

// ---- checkpoint format ----
// Directory with params.json (names, shapes, frozen flags, fingerprint) and
// one raw little-endian float32 file per array.

template <typename T>
void save_checkpoint(const ModelParams<T>& p,
                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["fingerprint"] = p.fingerprint();
  manifest["arrays"] = nlohmann::json::array();
  for (const auto& [name, t] : p.arrays) {
    nlohmann::json entry;
    entry["name"] = name;
    entry["shape"] = t.shape;
    entry["frozen"] = p.frozen.count(name) > 0;
    entry["buffer"] = p.buffers.count(name) > 0;
    entry["file"] = name + ".bin";
    manifest["arrays"].push_back(entry);

    std::vector<float> f32(t.data.begin(), t.data.end());
    std::ofstream out(dir / (name + ".bin"), std::ios::binary);
    out.write(reinterpret_cast<const char*>(f32.data()),
              static_cast<std::streamsize>(f32.size() * sizeof(float)));
  }
  std::ofstream(dir / "params.json") << manifest.dump(2) << "\n";
}

template <typename T>
ModelParams<T> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "params.json");
  if (!in) throw ConfigError("missing checkpoint manifest: " +
                             (dir / "params.json").string());
  nlohmann::json manifest;
  in >> manifest;
  ModelParams<T> p;
  bool any_frozen = false;
  for (const auto& entry : manifest["arrays"]) {
    const std::string name = entry["name"];
    Shape shape = entry["shape"].get<Shape>();
    std::ifstream bin(dir / entry["file"].get<std::string>(),
                      std::ios::binary);
    if (!bin) throw ConfigError("missing checkpoint array file for " + name);
    std::vector<float> f32(static_cast<std::size_t>(numel(shape)));
    bin.read(reinterpret_cast<char*>(f32.data()),
             static_cast<std::streamsize>(f32.size() * sizeof(float)));
    if (!bin) throw ConfigError("truncated checkpoint array: " + name);
    Tensor<T> t(shape, std::vector<T>(f32.begin(), f32.end()));
    p.add(name, std::move(t), entry.value("buffer", false));
    if (entry.value("frozen", false)) {
      p.frozen.insert(name);
      any_frozen = true;
    }
  }
  if (any_frozen) p.frozen_fingerprint_at_freeze = p.frozen_fingerprint();
  return p;
}

}  // namespace ctsfda
