// Symbolic I-RAVEN-style puzzle generation: attribute grids governed by the
// four row rules (constant, progression, arithmetic, distribute-three),
// unbiased candidate sets built by attribute bisection, JSONL round-trip,
// and the holdout predicates for rule-attribute OOD splits. This module is
// also the integer oracle the reasoner is tested against.
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "arlc/common.hpp"

namespace arlc::rpm {

enum class Constellation {
  Center,
  TwoByTwo,
  ThreeByThree,
  LeftRight,
  UpDown,
  InOutCenter,
  InOutGrid,
};

inline const std::vector<Constellation>& all_constellations() {
  static const std::vector<Constellation> v = {
      Constellation::Center,      Constellation::TwoByTwo,
      Constellation::ThreeByThree, Constellation::LeftRight,
      Constellation::UpDown,      Constellation::InOutCenter,
      Constellation::InOutGrid};
  return v;
}

inline std::string to_string(Constellation c) {
  switch (c) {
    case Constellation::Center: return "center";
    case Constellation::TwoByTwo: return "2x2";
    case Constellation::ThreeByThree: return "3x3";
    case Constellation::LeftRight: return "left-right";
    case Constellation::UpDown: return "up-down";
    case Constellation::InOutCenter: return "in-out-center";
    case Constellation::InOutGrid: return "in-out-grid";
  }
  return "?";
}

inline Constellation constellation_from(const std::string& s) {
  for (Constellation c : all_constellations())
    if (to_string(c) == s) return c;
  throw ParseError("unknown constellation '" + s + "'");
}

enum class Attr { Type, Size, Color, Number, Position };

inline const std::vector<Attr>& all_attrs() {
  static const std::vector<Attr> v = {Attr::Type, Attr::Size, Attr::Color,
                                      Attr::Number, Attr::Position};
  return v;
}

inline std::string to_string(Attr a) {
  switch (a) {
    case Attr::Type: return "type";
    case Attr::Size: return "size";
    case Attr::Color: return "color";
    case Attr::Number: return "number";
    case Attr::Position: return "position";
  }
  return "?";
}

inline Attr attr_from(const std::string& s) {
  for (Attr a : all_attrs())
    if (to_string(a) == s) return a;
  throw ParseError("unknown attribute '" + s + "'");
}

enum class RuleFamily { Constant, Progression, Arithmetic, DistributeThree };

inline std::string to_string(RuleFamily f) {
  switch (f) {
    case RuleFamily::Constant: return "constant";
    case RuleFamily::Progression: return "progression";
    case RuleFamily::Arithmetic: return "arithmetic";
    case RuleFamily::DistributeThree: return "distribute_three";
  }
  return "?";
}

inline RuleFamily family_from(const std::string& s) {
  for (RuleFamily f : {RuleFamily::Constant, RuleFamily::Progression,
                       RuleFamily::Arithmetic, RuleFamily::DistributeThree})
    if (to_string(f) == s) return f;
  if (s == "const") return RuleFamily::Constant;
  if (s == "progr" || s == "prog") return RuleFamily::Progression;
  if (s == "arith") return RuleFamily::Arithmetic;
  if (s == "dist3" || s == "d3") return RuleFamily::DistributeThree;
  throw ParseError("unknown rule family '" + s + "'");
}

// param: progression step in {-2,-1,+1,+2}; arithmetic +1 (plus) or -1
// (minus); distribute_three +1 (left shift) or -1 (right shift); constant 0.
struct RuleDescriptor {
  RuleFamily family = RuleFamily::Constant;
  int param = 0;

  bool operator==(const RuleDescriptor&) const = default;
};

struct ValueRange {
  int lo = 0;
  int hi = 0;
  int width() const { return hi - lo + 1; }
  bool contains(int v) const { return v >= lo && v <= hi; }
};

// Context handed to apply_rule: the attribute's value range, the row's value
// triple (distribute-three only), and mask semantics for position.
struct RuleContext {
  ValueRange range;
  std::array<int, 3> triple{0, 0, 0};
  bool is_mask = false;
  int slots = 0;
};

// Raised when a rule application lands outside the attribute range; the
// generator resamples instead of clipping.
struct ResampleSignal : Error {
  using Error::Error;
};

inline int rotate_mask(int mask, int k, int slots) {
  k %= slots;
  if (k < 0) k += slots;
  int full = (1 << slots) - 1;
  return ((mask << k) | (mask >> (slots - k))) & full;
}

// The unique third value mandated by the rule given the first two panels of
// a row. For masks, progression is circular slot rotation and arithmetic is
// set union / difference.
inline int apply_rule(const RuleDescriptor& rule, int first, int second,
                      const RuleContext& ctx) {
  int result = 0;
  switch (rule.family) {
    case RuleFamily::Constant:
      result = first;
      break;
    case RuleFamily::Progression:
      result = ctx.is_mask ? rotate_mask(second, rule.param, ctx.slots)
                           : second + rule.param;
      break;
    case RuleFamily::Arithmetic:
      if (ctx.is_mask)
        result = rule.param > 0 ? (first | second) : (first & ~second);
      else
        result = rule.param > 0 ? first + second : first - second;
      break;
    case RuleFamily::DistributeThree: {
      // Remaining member of the row's value triple (multiset difference).
      std::array<int, 3> t = ctx.triple;
      bool used_first = false, used_second = false;
      int remaining = t[0];
      bool found = false;
      for (int i = 0; i < 3; ++i) {
        if (!used_first && t[static_cast<std::size_t>(i)] == first) {
          used_first = true;
        } else if (!used_second && t[static_cast<std::size_t>(i)] == second) {
          used_second = true;
        } else if (!found) {
          remaining = t[static_cast<std::size_t>(i)];
          found = true;
        }
      }
      if (!used_first || !used_second || !found)
        throw ContractError("apply_rule: row values not drawn from the triple");
      result = remaining;
      break;
    }
  }
  if (ctx.is_mask) {
    if (result == 0 || result >= (1 << ctx.slots))
      throw ResampleSignal("apply_rule: mask result out of range");
  } else if (!ctx.range.contains(result)) {
    throw ResampleSignal("apply_rule: value " + std::to_string(result) +
                         " outside [" + std::to_string(ctx.range.lo) + ", " +
                         std::to_string(ctx.range.hi) + "]");
  }
  return result;
}

// ---- puzzle structure ----------------------------------------------------

using Grid = std::array<std::array<int, 3>, 3>;

enum class ComponentKind { Single, Grid4, Grid9 };

inline int slot_count(ComponentKind k) {
  switch (k) {
    case ComponentKind::Single: return 1;
    case ComponentKind::Grid4: return 4;
    case ComponentKind::Grid9: return 9;
  }
  return 1;
}

struct Component {
  ComponentKind kind = ComponentKind::Single;
  std::map<Attr, Grid> attrs;
  std::map<Attr, RuleDescriptor> rules;   // governing rules only
  std::optional<Attr> derived;            // Number or Position when coupled

  bool has_hard_position_rule() const {
    auto it = rules.find(Attr::Position);
    return it != rules.end() && (it->second.family == RuleFamily::Progression ||
                                 it->second.family == RuleFamily::Arithmetic);
  }
};

using CandidateComponent = std::map<Attr, int>;
using Candidate = std::vector<CandidateComponent>;  // one entry per component

struct Puzzle {
  Constellation constellation = Constellation::Center;
  std::vector<Component> components;
  std::vector<Candidate> candidates;  // 8 entries
  int answer_index = 0;
  std::uint64_t seed = 0;

  bool has_hard_rule() const {
    for (const Component& c : components)
      if (c.has_hard_position_rule()) return true;
    return false;
  }
};

inline std::vector<ComponentKind> components_of(Constellation c) {
  switch (c) {
    case Constellation::Center: return {ComponentKind::Single};
    case Constellation::TwoByTwo: return {ComponentKind::Grid4};
    case Constellation::ThreeByThree: return {ComponentKind::Grid9};
    case Constellation::LeftRight:
    case Constellation::UpDown:
    case Constellation::InOutCenter:
      return {ComponentKind::Single, ComponentKind::Single};
    case Constellation::InOutGrid:
      return {ComponentKind::Single, ComponentKind::Grid4};
  }
  return {ComponentKind::Single};
}

// ---- generation config -----------------------------------------------------

struct GenConfig {
  Constellation constellation = Constellation::Center;
  ValueRange type_range{1, 5};
  ValueRange size_range{1, 6};
  ValueRange color_range{0, 9};
  bool include_hard_position = true;
  // Rule families allowed per value attribute. Arithmetic is never offered
  // on type, matching the RAVEN rule-attribute matrix.
  std::map<Attr, std::vector<RuleFamily>> allowed = default_allowed();
  // OOD holdout: (attr, family) pairs excluded from sampling.
  std::set<std::pair<Attr, RuleFamily>> excluded;
  // Force a governing family on a value attribute (used to build OOD eval
  // sets for one held-out pair).
  std::map<Attr, RuleFamily> forced;

  static std::map<Attr, std::vector<RuleFamily>> default_allowed() {
    std::map<Attr, std::vector<RuleFamily>> m;
    m[Attr::Type] = {RuleFamily::Constant, RuleFamily::Progression,
                     RuleFamily::DistributeThree};
    m[Attr::Size] = {RuleFamily::Constant, RuleFamily::Progression,
                     RuleFamily::DistributeThree, RuleFamily::Arithmetic};
    m[Attr::Color] = {RuleFamily::Constant, RuleFamily::Progression,
                      RuleFamily::DistributeThree, RuleFamily::Arithmetic};
    m[Attr::Number] = {RuleFamily::Constant, RuleFamily::Progression,
                       RuleFamily::DistributeThree, RuleFamily::Arithmetic};
    // progression/arithmetic on masks are the hard object-granular rules;
    // include_hard_position=false filters them out
    m[Attr::Position] = {RuleFamily::Constant, RuleFamily::DistributeThree,
                         RuleFamily::Progression, RuleFamily::Arithmetic};
    return m;
  }

  ValueRange range_of(Attr a, ComponentKind kind) const {
    switch (a) {
      case Attr::Type: return type_range;
      case Attr::Size: return size_range;
      case Attr::Color: return color_range;
      case Attr::Number:
        return kind == ComponentKind::Grid9 ? ValueRange{1, 9} : ValueRange{1, 4};
      case Attr::Position:
        return ValueRange{1, (1 << slot_count(kind)) - 1};
    }
    return {0, 0};
  }

  std::vector<RuleFamily> families_for(Attr a, ComponentKind kind) const {
    std::vector<RuleFamily> out;
    auto it = allowed.find(a);
    if (it == allowed.end()) return out;
    for (RuleFamily f : it->second) {
      if (excluded.count({a, f})) continue;
      if (a == Attr::Position && !include_hard_position &&
          (f == RuleFamily::Progression || f == RuleFamily::Arithmetic))
        continue;
      if (!family_feasible(f, range_of(a, kind))) continue;
      out.push_back(f);
    }
    auto fit = forced.find(a);
    if (fit != forced.end()) {
      if (!family_feasible(fit->second, range_of(a, kind)))
        throw ConfigError("forced rule " + to_string(fit->second) + " on " +
                          to_string(a) + " is not satisfiable");
      out = {fit->second};
    }
    return out;
  }

  static bool family_feasible(RuleFamily f, ValueRange r) {
    switch (f) {
      case RuleFamily::Constant: return r.width() >= 1;
      case RuleFamily::Progression: return r.width() >= 3;
      case RuleFamily::DistributeThree: return r.width() >= 3;
      case RuleFamily::Arithmetic: return 2 * r.lo <= r.hi;
    }
    return false;
  }

  void validate() const {
    for (ComponentKind kind : components_of(constellation)) {
      for (Attr a : {Attr::Type, Attr::Size, Attr::Color})
        if (families_for(a, kind).empty())
          throw ConfigError("no satisfiable rule family for attribute '" +
                            to_string(a) + "'");
      // either number or position must be able to carry a rule
      if (kind != ComponentKind::Single &&
          families_for(Attr::Number, kind).empty() &&
          families_for(Attr::Position, kind).empty())
        throw ConfigError("neither number nor position has a satisfiable rule");
    }
  }
};

// ---- sampling --------------------------------------------------------------

namespace detail {

inline int random_mask_with_popcount(Rng& rng, int slots, int n) {
  std::vector<int> idx(static_cast<std::size_t>(slots));
  for (int i = 0; i < slots; ++i) idx[static_cast<std::size_t>(i)] = i;
  rng.shuffle(idx);
  int m = 0;
  for (int i = 0; i < n; ++i) m |= 1 << idx[static_cast<std::size_t>(i)];
  return m;
}

inline int random_nonzero_mask(Rng& rng, int slots) {
  return rng.range(1, (1 << slots) - 1);
}

inline std::array<int, 3> sample_distinct_triple(Rng& rng, ValueRange r) {
  std::vector<int> vals;
  for (int v = r.lo; v <= r.hi; ++v) vals.push_back(v);
  rng.shuffle(vals);
  return {vals[0], vals[1], vals[2]};
}

// Fills one attribute grid so every row obeys the rule.
inline Grid sample_value_grid(Rng& rng, RuleDescriptor& rule, ValueRange r) {
  Grid g{};
  switch (rule.family) {
    case RuleFamily::Constant: {
      rule.param = 0;
      for (int i = 0; i < 3; ++i) {
        int v = rng.range(r.lo, r.hi);
        g[i] = {v, v, v};
      }
      break;
    }
    case RuleFamily::Progression: {
      std::vector<int> steps;
      for (int s : {-2, -1, 1, 2})
        if (r.width() >= 2 * std::abs(s) + 1) steps.push_back(s);
      rule.param = steps[rng.below(steps.size())];
      int s = rule.param;
      for (int i = 0; i < 3; ++i) {
        int lo = s > 0 ? r.lo : r.lo - 2 * s;
        int hi = s > 0 ? r.hi - 2 * s : r.hi;
        int start = rng.range(lo, hi);
        g[i] = {start, start + s, start + 2 * s};
      }
      break;
    }
    case RuleFamily::Arithmetic: {
      rule.param = rng.below(2) == 0 ? 1 : -1;
      for (int i = 0; i < 3; ++i) {
        if (rule.param > 0) {
          int a = rng.range(r.lo, r.hi - r.lo);
          int b = rng.range(r.lo, r.hi - a);
          g[i] = {a, b, a + b};
        } else {
          int a = rng.range(2 * r.lo, r.hi);
          int b = rng.range(r.lo, a - r.lo);
          g[i] = {a, b, a - b};
        }
      }
      break;
    }
    case RuleFamily::DistributeThree: {
      rule.param = rng.below(2) == 0 ? 1 : -1;
      std::array<int, 3> t = sample_distinct_triple(rng, r);
      std::vector<int> row0 = {t[0], t[1], t[2]};
      rng.shuffle(row0);
      for (int j = 0; j < 3; ++j) g[0][j] = row0[static_cast<std::size_t>(j)];
      for (int i = 1; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          g[i][j] = rule.param > 0 ? g[i - 1][(j + 1) % 3] : g[i - 1][(j + 2) % 3];
      break;
    }
  }
  return g;
}

inline Grid sample_mask_grid(Rng& rng, RuleDescriptor& rule, int slots) {
  Grid g{};
  switch (rule.family) {
    case RuleFamily::Constant: {
      rule.param = 0;
      for (int i = 0; i < 3; ++i) {
        int m = random_nonzero_mask(rng, slots);
        g[i] = {m, m, m};
      }
      break;
    }
    case RuleFamily::Progression: {
      rule.param = rng.below(2) == 0 ? 1 : -1;
      for (int i = 0; i < 3; ++i) {
        int m = 0;
        do {
          m = random_nonzero_mask(rng, slots);
        } while (rotate_mask(m, rule.param, slots) == m);
        g[i] = {m, rotate_mask(m, rule.param, slots),
                rotate_mask(m, 2 * rule.param, slots)};
      }
      break;
    }
    case RuleFamily::Arithmetic: {
      rule.param = rng.below(2) == 0 ? 1 : -1;
      for (int i = 0; i < 3; ++i) {
        for (int tries = 0;; ++tries) {
          if (tries > 200) throw ConfigError("mask arithmetic: no valid row");
          int a = random_nonzero_mask(rng, slots);
          int b = random_nonzero_mask(rng, slots);
          int c = rule.param > 0 ? (a | b) : (a & ~b);
          if (c == 0) continue;
          g[i] = {a, b, c};
          break;
        }
      }
      break;
    }
    case RuleFamily::DistributeThree: {
      rule.param = rng.below(2) == 0 ? 1 : -1;
      int full = (1 << slots) - 1;
      std::array<int, 3> t{};
      do {
        t = {rng.range(1, full), rng.range(1, full), rng.range(1, full)};
      } while (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]);
      std::vector<int> row0 = {t[0], t[1], t[2]};
      rng.shuffle(row0);
      for (int j = 0; j < 3; ++j) g[0][j] = row0[static_cast<std::size_t>(j)];
      for (int i = 1; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          g[i][j] = rule.param > 0 ? g[i - 1][(j + 1) % 3] : g[i - 1][(j + 2) % 3];
      break;
    }
  }
  return g;
}

inline Component sample_component(Rng& rng, const GenConfig& cfg,
                                  ComponentKind kind) {
  Component comp;
  comp.kind = kind;
  std::vector<Attr> governed = {Attr::Type, Attr::Size, Attr::Color};
  if (kind != ComponentKind::Single) {
    // Exactly one of number/position carries a sampled rule.
    bool number_governs = rng.below(2) == 0;
    auto pos_families = cfg.families_for(Attr::Position, kind);
    auto num_families = cfg.families_for(Attr::Number, kind);
    if (pos_families.empty()) number_governs = true;
    if (num_families.empty()) number_governs = false;
    if (pos_families.empty() && num_families.empty())
      throw ConfigError("neither number nor position has a satisfiable rule");
    governed.push_back(number_governs ? Attr::Number : Attr::Position);
    comp.derived = number_governs ? Attr::Position : Attr::Number;
  }
  for (Attr a : governed) {
    auto families = cfg.families_for(a, kind);
    if (families.empty())
      throw ConfigError("no satisfiable rule family for attribute '" +
                        to_string(a) + "'");
    RuleDescriptor rule;
    rule.family = families[rng.below(families.size())];
    Grid g = a == Attr::Position ? sample_mask_grid(rng, rule, slot_count(kind))
                                 : sample_value_grid(rng, rule, cfg.range_of(a, kind));
    comp.rules[a] = rule;
    comp.attrs[a] = g;
  }
  if (comp.derived) {
    Grid d{};
    if (*comp.derived == Attr::Number) {
      const Grid& pos = comp.attrs[Attr::Position];
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          d[i][j] = std::popcount(static_cast<unsigned>(pos[i][j]));
    } else {
      const Grid& num = comp.attrs[Attr::Number];
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          d[i][j] = random_mask_with_popcount(rng, slot_count(kind), num[i][j]);
    }
    comp.attrs[*comp.derived] = d;
  }
  return comp;
}

}  // namespace detail

// Verifies every governed row against the integer oracle and the coupling
// between number and position. Throws ContractError on violation.
inline void verify_puzzle(const Puzzle& p) {
  for (const Component& comp : p.components) {
    for (const auto& [attr, rule] : comp.rules) {
      const Grid& g = comp.attrs.at(attr);
      RuleContext ctx;
      ctx.is_mask = attr == Attr::Position;
      ctx.slots = slot_count(comp.kind);
      ctx.range = GenConfig{}.range_of(attr, comp.kind);
      // Generous range for verification; generated values satisfy the
      // configured range by construction.
      ctx.range.lo = std::min(ctx.range.lo, -1000);
      ctx.range.hi = std::max(ctx.range.hi, 1000);
      for (int i = 0; i < 3; ++i) {
        ctx.triple = {g[i][0], g[i][1], g[i][2]};
        if (apply_rule(rule, g[i][0], g[i][1], ctx) != g[i][2])
          throw ContractError("verify: row " + std::to_string(i + 1) +
                              " of attribute '" + to_string(attr) +
                              "' violates its rule");
      }
    }
    if (comp.derived && *comp.derived == Attr::Number) {
      const Grid& num = comp.attrs.at(Attr::Number);
      const Grid& pos = comp.attrs.at(Attr::Position);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          if (num[i][j] != std::popcount(static_cast<unsigned>(pos[i][j])))
            throw ContractError("verify: number is not the position popcount");
    }
  }
  if (p.candidates.size() != 8)
    throw ContractError("verify: expected 8 candidates");
  int matches = 0;
  for (const Candidate& cand : p.candidates) {
    bool equal = true;
    for (std::size_t ci = 0; ci < p.components.size(); ++ci)
      for (const auto& [attr, grid] : p.components[ci].attrs)
        if (cand[ci].at(attr) != grid[2][2]) equal = false;
    if (equal) ++matches;
  }
  if (matches != 1)
    throw ContractError("verify: " + std::to_string(matches) +
                        " candidates equal the true panel");
}

// Attribute-bisection candidate construction: three iterations, each
// doubling the pool and perturbing one chosen attribute (a single fresh
// value) in the new half. Number and position stay coupled: perturbing the
// count resamples a mask, perturbing the mask preserves the count.
inline void gen_candidates(Puzzle& p, Rng& rng, const GenConfig& cfg) {
  struct Option {
    std::size_t comp;
    Attr attr;  // Type/Size/Color, or Number meaning the number/position pair
  };
  std::vector<Option> pool;
  for (std::size_t ci = 0; ci < p.components.size(); ++ci) {
    pool.push_back({ci, Attr::Type});
    pool.push_back({ci, Attr::Size});
    pool.push_back({ci, Attr::Color});
    if (p.components[ci].kind != ComponentKind::Single)
      pool.push_back({ci, Attr::Number});
  }
  rng.shuffle(pool);

  Candidate truth;
  for (const Component& comp : p.components) {
    CandidateComponent cc;
    for (const auto& [attr, grid] : comp.attrs) cc[attr] = grid[2][2];
    truth.push_back(cc);
  }
  std::vector<Candidate> cands = {truth};

  for (int iter = 0; iter < 3; ++iter) {
    const Option& opt = pool[static_cast<std::size_t>(iter)];
    const Component& comp = p.components[opt.comp];
    std::size_t half = cands.size();
    for (std::size_t i = 0; i < half; ++i) cands.push_back(cands[i]);
    if (opt.attr == Attr::Number) {
      int slots = slot_count(comp.kind);
      int true_num = truth[opt.comp].at(Attr::Number);
      int true_pos = truth[opt.comp].at(Attr::Position);
      // Prefer re-arranging the panel; fall back to changing the count when
      // the mask is unique for this popcount.
      bool move_mask = rng.below(2) == 0;
      double nmasks = 1.0;
      for (int i = 0; i < true_num; ++i)
        nmasks = nmasks * (slots - i) / (i + 1);
      if (nmasks < 2.0) move_mask = false;
      if (move_mask) {
        int mask = true_pos;
        while (mask == true_pos)
          mask = detail::random_mask_with_popcount(rng, slots, true_num);
        for (std::size_t i = half; i < cands.size(); ++i)
          cands[i][opt.comp][Attr::Position] = mask;
      } else {
        ValueRange nr = cfg.range_of(Attr::Number, comp.kind);
        int num = true_num;
        while (num == true_num) num = rng.range(nr.lo, nr.hi);
        int mask = detail::random_mask_with_popcount(rng, slots, num);
        for (std::size_t i = half; i < cands.size(); ++i) {
          cands[i][opt.comp][Attr::Number] = num;
          cands[i][opt.comp][Attr::Position] = mask;
        }
      }
    } else {
      ValueRange r = cfg.range_of(opt.attr, comp.kind);
      if (r.width() < 2)
        throw ConfigError("candidate perturbation: attribute '" +
                          to_string(opt.attr) + "' has no alternative value");
      int truev = truth[opt.comp].at(opt.attr);
      int v = truev;
      while (v == truev) v = rng.range(r.lo, r.hi);
      for (std::size_t i = half; i < cands.size(); ++i)
        cands[i][opt.comp][opt.attr] = v;
    }
  }

  std::vector<int> order = {0, 1, 2, 3, 4, 5, 6, 7};
  rng.shuffle(order);
  p.candidates.assign(8, {});
  for (int i = 0; i < 8; ++i) {
    p.candidates[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] =
        cands[static_cast<std::size_t>(i)];
    if (i == 0) p.answer_index = order[0];
  }
}

inline Puzzle sample_puzzle(const GenConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Puzzle p;
  p.constellation = cfg.constellation;
  p.seed = seed;
  for (ComponentKind kind : components_of(cfg.constellation))
    p.components.push_back(detail::sample_component(rng, cfg, kind));
  gen_candidates(p, rng, cfg);
  verify_puzzle(p);
  return p;
}

// One independent seeded stream per puzzle index.
inline std::vector<Puzzle> generate_dataset(const GenConfig& cfg, int n,
                                            std::uint64_t base_seed) {
  std::vector<Puzzle> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    out.push_back(sample_puzzle(cfg, derive_seed(base_seed, static_cast<std::uint64_t>(i))));
  return out;
}

// ---- JSONL -----------------------------------------------------------------

using ordered_json = nlohmann::ordered_json;

inline ordered_json rule_to_json(const RuleDescriptor& r) {
  ordered_json j;
  j["family"] = to_string(r.family);
  switch (r.family) {
    case RuleFamily::Constant: j["param"] = 0; break;
    case RuleFamily::Progression: j["param"] = r.param; break;
    case RuleFamily::Arithmetic: j["param"] = r.param > 0 ? "plus" : "minus"; break;
    case RuleFamily::DistributeThree: j["param"] = r.param > 0 ? "left" : "right"; break;
  }
  return j;
}

inline RuleDescriptor rule_from_json(const ordered_json& j) {
  RuleDescriptor r;
  r.family = family_from(j.at("family").get<std::string>());
  const auto& p = j.at("param");
  switch (r.family) {
    case RuleFamily::Constant: r.param = 0; break;
    case RuleFamily::Progression: r.param = p.get<int>(); break;
    case RuleFamily::Arithmetic: r.param = p.get<std::string>() == "plus" ? 1 : -1; break;
    case RuleFamily::DistributeThree: r.param = p.get<std::string>() == "left" ? 1 : -1; break;
  }
  return r;
}

inline ordered_json puzzle_to_json(const Puzzle& p) {
  ordered_json j;
  j["constellation"] = to_string(p.constellation);
  j["components"] = ordered_json::array();
  for (const Component& comp : p.components) {
    ordered_json cj;
    ordered_json attrs;
    for (Attr a : all_attrs()) {
      auto it = comp.attrs.find(a);
      if (it == comp.attrs.end()) continue;
      ordered_json rows = ordered_json::array();
      for (int i = 0; i < 3; ++i)
        rows.push_back({it->second[i][0], it->second[i][1], it->second[i][2]});
      attrs[to_string(a)] = rows;
    }
    cj["attributes"] = attrs;
    ordered_json rules;
    for (Attr a : all_attrs()) {
      auto it = comp.rules.find(a);
      if (it != comp.rules.end()) {
        rules[to_string(a)] = rule_to_json(it->second);
      } else if (comp.derived && *comp.derived == a) {
        ordered_json dj;
        dj["family"] = "derived";
        dj["param"] = 0;
        rules[to_string(a)] = dj;
      }
    }
    cj["rules"] = rules;
    j["components"].push_back(cj);
  }
  j["candidates"] = ordered_json::array();
  for (const Candidate& cand : p.candidates) {
    auto comp_json = [](const CandidateComponent& cc) {
      ordered_json o;
      for (Attr a : all_attrs()) {
        auto it = cc.find(a);
        if (it != cc.end()) o[to_string(a)] = it->second;
      }
      return o;
    };
    if (p.components.size() == 1) {
      j["candidates"].push_back(comp_json(cand[0]));
    } else {
      ordered_json arr = ordered_json::array();
      for (const CandidateComponent& cc : cand) arr.push_back(comp_json(cc));
      j["candidates"].push_back(arr);
    }
  }
  j["answer_index"] = p.answer_index;
  j["seed"] = p.seed;
  return j;
}

inline Puzzle puzzle_from_json(const ordered_json& j) {
  Puzzle p;
  p.constellation = constellation_from(j.at("constellation").get<std::string>());
  std::vector<ComponentKind> kinds = components_of(p.constellation);
  std::size_t ci = 0;
  for (const auto& cj : j.at("components")) {
    Component comp;
    comp.kind = ci < kinds.size() ? kinds[ci] : ComponentKind::Single;
    for (const auto& [name, rows] : cj.at("attributes").items()) {
      Attr a = attr_from(name);
      Grid g{};
      for (int i = 0; i < 3; ++i)
        for (int jj = 0; jj < 3; ++jj)
          g[i][jj] = rows.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(jj)).get<int>();
      comp.attrs[a] = g;
    }
    for (const auto& [name, rj] : cj.at("rules").items()) {
      Attr a = attr_from(name);
      if (rj.at("family").get<std::string>() == "derived")
        comp.derived = a;
      else
        comp.rules[a] = rule_from_json(rj);
    }
    p.components.push_back(std::move(comp));
    ++ci;
  }
  for (const auto& candj : j.at("candidates")) {
    Candidate cand;
    auto parse_comp = [](const ordered_json& o) {
      CandidateComponent cc;
      for (const auto& [name, v] : o.items()) cc[attr_from(name)] = v.get<int>();
      return cc;
    };
    if (candj.is_array())
      for (const auto& o : candj) cand.push_back(parse_comp(o));
    else
      cand.push_back(parse_comp(candj));
    p.candidates.push_back(std::move(cand));
  }
  p.answer_index = j.at("answer_index").get<int>();
  p.seed = j.at("seed").get<std::uint64_t>();
  return p;
}

inline void write_jsonl(const std::vector<Puzzle>& puzzles, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  for (const Puzzle& p : puzzles) out << puzzle_to_json(p).dump() << "\n";
}

inline std::vector<Puzzle> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "' for reading");
  std::vector<Puzzle> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(puzzle_from_json(ordered_json::parse(line)));
    } catch (const std::exception& e) {
      throw ParseError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---- OOD splits ------------------------------------------------------------

using AttrRulePair = std::pair<Attr, RuleFamily>;

// The 11 rule-attribute pairs of the center constellation (type never takes
// arithmetic).
inline std::vector<AttrRulePair> center_pairs() {
  std::vector<AttrRulePair> v;
  for (Attr a : {Attr::Type, Attr::Size, Attr::Color}) {
    v.push_back({a, RuleFamily::Constant});
    v.push_back({a, RuleFamily::Progression});
    v.push_back({a, RuleFamily::DistributeThree});
    if (a != Attr::Type) v.push_back({a, RuleFamily::Arithmetic});
  }
  return v;
}

struct OodSplit {
  std::set<AttrRulePair> held;
  std::function<bool(const Puzzle&)> train_pred;
  std::function<bool(const Puzzle&)> test_pred;
};

inline OodSplit ood_split(const std::vector<AttrRulePair>& holdout) {
  if (holdout.empty()) throw ConfigError("ood_split: empty holdout");
  std::set<AttrRulePair> held(holdout.begin(), holdout.end());
  std::size_t total = center_pairs().size();
  std::size_t covered = 0;
  for (const AttrRulePair& p : center_pairs())
    if (held.count(p)) ++covered;
  if (covered >= total)
    throw ConfigError("ood_split: holdout covers every rule-attribute pair");
  OodSplit s;
  s.held = held;
  s.train_pred = [held](const Puzzle& p) {
    for (const Component& c : p.components)
      for (const auto& [attr, rule] : c.rules)
        if (held.count({attr, rule.family})) return false;
    return true;
  };
  s.test_pred = [held](const Puzzle& p) {
    for (const Component& c : p.components)
      for (const auto& [attr, rule] : c.rules)
        if (held.count({attr, rule.family})) return true;
    return false;
  };
  return s;
}

}  // namespace arlc::rpm
