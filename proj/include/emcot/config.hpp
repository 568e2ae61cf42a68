#pragma once

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace emcot {

using Json = nlohmann::json;

// Declarative run configuration: one JSON tree with documented defaults,
// section-scoped (env / thresholds / annotator / tokens / model / train /
// rollout). Unknown keys are rejected; dotted CLI overrides are applied on
// top of the file; every output artifact embeds the resulting hash.
class RunConfig {
 public:
  // Full default tree, every key present.
  static Json defaults();

  // Build from an optional config file plus "a.b.c=value" overrides.
  static RunConfig load(const std::string& path_or_empty,
                        const std::vector<std::string>& overrides);
  static RunConfig from_json(const Json& partial);

  const Json& tree() const { return tree_; }
  Json& tree() { return tree_; }

  // Canonical serialization + FNV hash of it.
  std::string canonical() const;
  std::string hash() const;

  double num(const std::string& dotted) const;
  int64_t integer(const std::string& dotted) const;
  bool flag(const std::string& dotted) const;
  std::string str(const std::string& dotted) const;

 private:
  Json tree_;
};

extern const char* kToolVersion;

}  // namespace emcot
