#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace imformer {

enum class ModuleKind
{
  temporal, // T
  local,    // L
  global,   // G
  conv2d,   // C2
  conv3d,   // C3
};

inline char const *symbol(ModuleKind k)
{
  switch (k) {
  case ModuleKind::temporal: return "T";
  case ModuleKind::local: return "L";
  case ModuleKind::global: return "G";
  case ModuleKind::conv2d: return "C2";
  case ModuleKind::conv3d: return "C3";
  }
  return "?";
}

inline bool is_attention(ModuleKind k) {
  return k == ModuleKind::temporal || k == ModuleKind::local || k == ModuleKind::global;
}

class BlockConfigError : public std::invalid_argument
{
public:
  BlockConfigError(std::string const &msg, std::size_t position)
    : std::invalid_argument(msg)
    , position_(position)
  {
  }
  std::size_t position() const { return position_; }

private:
  std::size_t position_;
};

/// Ordered module list of one block, e.g. "TLG" or "C3C3C3".
struct BlockConfig
{
  std::vector<ModuleKind> modules;

  friend bool operator==(BlockConfig const &, BlockConfig const &) = default;
};

/// Grammar (T|L|G|C2|C3)+. Subscript digits (C₂, C₃) are accepted as well.
inline BlockConfig parse_block_config(std::string_view s)
{
  if (s.empty()) { throw BlockConfigError("empty block config", 0); }
  BlockConfig cfg;
  std::size_t i = 0;
  while (i < s.size()) {
    char const c = s[i];
    if (c == 'T') {
      cfg.modules.push_back(ModuleKind::temporal);
      ++i;
    } else if (c == 'L') {
      cfg.modules.push_back(ModuleKind::local);
      ++i;
    } else if (c == 'G') {
      cfg.modules.push_back(ModuleKind::global);
      ++i;
    } else if (c == 'C') {
      std::string_view const rest = s.substr(i + 1);
      if (!rest.empty() && (rest[0] == '2' || rest[0] == '3')) {
        cfg.modules.push_back(rest[0] == '2' ? ModuleKind::conv2d : ModuleKind::conv3d);
        i += 2;
      } else if (rest.starts_with("₂") || rest.starts_with("₃")) {
        cfg.modules.push_back(rest.starts_with("₂") ? ModuleKind::conv2d : ModuleKind::conv3d);
        i += 1 + std::string_view("₂").size();
      } else {
        throw BlockConfigError("convolution module at index " + std::to_string(i) + " needs dimension 2 or 3", i);
      }
    } else {
      throw BlockConfigError("unknown module symbol '" + std::string(1, c) + "' at index " + std::to_string(i), i);
    }
  }
  return cfg;
}

inline std::string format(BlockConfig const &cfg)
{
  std::string s;
  for (auto k : cfg.modules) { s += symbol(k); }
  return s;
}

/// Comma-separated per-level configs, e.g. "TLG,TLG".
inline std::vector<BlockConfig> parse_level_configs(std::string_view s)
{
  std::vector<BlockConfig> out;
  std::size_t start = 0;
  while (true) {
    std::size_t const comma = s.find(',', start);
    std::string_view const part = s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    try {
      out.push_back(parse_block_config(part));
    } catch (BlockConfigError const &e) {
      throw BlockConfigError(std::string("level ") + std::to_string(out.size()) + ": " + e.what(), start + e.position());
    }
    if (comma == std::string_view::npos) { break; }
    start = comma + 1;
  }
  return out;
}

inline std::string format_levels(std::vector<BlockConfig> const &levels)
{
  std::string s;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (i) { s += ','; }
    s += format(levels[i]);
  }
  return s;
}

} // namespace imformer
