#pragma once

#include <map>
#include <string>

namespace gmfpca {

// Nested key-value configuration text. Keys flatten to dotted paths:
//
//   family = binary
//   bins {
//     width_pct = 5
//   }
//   mcmc.iters = 1000    # dotted keys work directly; '#' starts a comment
//
using KvConfig = std::map<std::string, std::string>;

KvConfig parse_kv_text(const std::string& text);
KvConfig parse_kv_file(const std::string& path);

// Typed lookups with defaults; throw ConfigError on malformed values.
std::string kv_get(const KvConfig& cfg, const std::string& key, const std::string& fallback);
double kv_get_num(const KvConfig& cfg, const std::string& key, double fallback);
int kv_get_int(const KvConfig& cfg, const std::string& key, int fallback);
bool kv_get_bool(const KvConfig& cfg, const std::string& key, bool fallback);

} // namespace gmfpca
