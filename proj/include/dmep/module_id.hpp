// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>

#include "dmep/numerics.hpp"

namespace dmep {

// The seven adapted projections of one transformer layer.
enum class ProjKind : std::uint8_t { Q, K, V, O, Gate, Up, Down };

inline constexpr std::array<ProjKind, 7> kAllProjKinds = {ProjKind::Q,    ProjKind::K,  ProjKind::V,
                                                          ProjKind::O,    ProjKind::Gate, ProjKind::Up,
                                                          ProjKind::Down};
inline constexpr std::size_t kProjKindsPerLayer = kAllProjKinds.size();

inline constexpr std::string_view to_string(ProjKind k) {
  switch (k) {
    case ProjKind::Q: return "Q";
    case ProjKind::K: return "K";
    case ProjKind::V: return "V";
    case ProjKind::O: return "O";
    case ProjKind::Gate: return "GATE";
    case ProjKind::Up: return "UP";
    case ProjKind::Down: return "DOWN";
  }
  return "?";
}

inline std::optional<ProjKind> parse_proj_kind(std::string_view s) {
  for (ProjKind k : kAllProjKinds) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

inline constexpr bool is_attention(ProjKind k) {
  return k == ProjKind::Q || k == ProjKind::K || k == ProjKind::V || k == ProjKind::O;
}

struct ModuleId {
  std::size_t layer = 0;
  ProjKind kind = ProjKind::Q;

  friend auto operator<=>(const ModuleId&, const ModuleId&) = default;

  std::string name() const { return "L" + std::to_string(layer) + "." + std::string(to_string(kind)); }
};

// Independent stream per (seed, module, purpose).
inline std::mt19937_64 module_rng(std::uint64_t seed, ModuleId m, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(m.layer), static_cast<std::uint32_t>(m.kind),
                    static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

inline Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

}  // namespace dmep
