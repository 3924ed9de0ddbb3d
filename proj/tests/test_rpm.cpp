#include <catch2/catch_amalgamated.hpp>

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "arlc/rpm.hpp"

using namespace arlc;
using namespace arlc::rpm;

namespace {

RuleContext value_ctx(int lo, int hi) {
  RuleContext ctx;
  ctx.range = {lo, hi};
  return ctx;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("apply_rule: the four families on values") {
  RuleDescriptor plus{RuleFamily::Arithmetic, 1};
  REQUIRE(apply_rule(plus, 1, 2, value_ctx(0, 9)) == 3);
  RuleDescriptor minus{RuleFamily::Arithmetic, -1};
  REQUIRE(apply_rule(minus, 7, 3, value_ctx(0, 9)) == 4);

  RuleDescriptor prog{RuleFamily::Progression, 1};
  REQUIRE(apply_rule(prog, 2, 3, value_ctx(0, 9)) == 4);
  RuleDescriptor prog2{RuleFamily::Progression, -2};
  REQUIRE(apply_rule(prog2, 9, 7, value_ctx(0, 9)) == 5);

  RuleDescriptor constant{RuleFamily::Constant, 0};
  REQUIRE(apply_rule(constant, 6, 6, value_ctx(0, 9)) == 6);

  RuleDescriptor d3{RuleFamily::DistributeThree, 1};
  RuleContext ctx = value_ctx(0, 9);
  ctx.triple = {3, 6, 9};
  REQUIRE(apply_rule(d3, 3, 6, ctx) == 9);
  REQUIRE(apply_rule(d3, 6, 9, ctx) == 3);
  REQUIRE(apply_rule(d3, 9, 3, ctx) == 6);

  // out of range -> resample signal, never clipping
  REQUIRE_THROWS_AS(apply_rule(plus, 7, 8, value_ctx(0, 9)), ResampleSignal);
}

TEST_CASE("distribute three: cyclic shift rows from the spec example") {
  GenConfig cfg;
  // Find a left-shifted color d3 puzzle and check the row structure.
  for (int i = 0; i < 200; ++i) {
    Puzzle p = sample_puzzle(cfg, derive_seed(404, static_cast<std::uint64_t>(i)));
    const Component& c = p.components[0];
    auto it = c.rules.find(Attr::Color);
    if (it == c.rules.end() || it->second.family != RuleFamily::DistributeThree ||
        it->second.param != 1)
      continue;
    const Grid& g = c.attrs.at(Attr::Color);
    for (int row = 1; row < 3; ++row)
      for (int col = 0; col < 3; ++col)
        REQUIRE(g[row][col] == g[row - 1][(col + 1) % 3]);
    // columns carry the same triple
    for (int col = 0; col < 3; ++col) {
      std::set<int> colvals = {g[0][col], g[1][col], g[2][col]};
      std::set<int> rowvals = {g[0][0], g[0][1], g[0][2]};
      REQUIRE(colvals == rowvals);
    }
    return;
  }
  FAIL("no left-shifted color distribute-three puzzle found");
}

TEST_CASE("apply_rule: mask semantics for position") {
  RuleContext ctx;
  ctx.is_mask = true;
  ctx.slots = 4;
  RuleDescriptor por{RuleFamily::Arithmetic, 1};
  REQUIRE(apply_rule(por, 0b0011, 0b0110, ctx) == 0b0111);
  RuleDescriptor pdiff{RuleFamily::Arithmetic, -1};
  REQUIRE(apply_rule(pdiff, 0b0111, 0b0010, ctx) == 0b0101);
  RuleDescriptor prot{RuleFamily::Progression, 1};
  REQUIRE(apply_rule(prot, 0b0001, 0b0010, ctx) == 0b0100);
  // empty result is rejected
  REQUIRE_THROWS_AS(apply_rule(pdiff, 0b0010, 0b0010, ctx), ResampleSignal);
}

TEST_CASE("sample_puzzle: determinism and verification") {
  GenConfig cfg;
  cfg.constellation = Constellation::Center;
  Puzzle a = sample_puzzle(cfg, 123);
  Puzzle b = sample_puzzle(cfg, 123);
  REQUIRE(puzzle_to_json(a).dump() == puzzle_to_json(b).dump());
  Puzzle c = sample_puzzle(cfg, 124);
  REQUIRE(puzzle_to_json(a).dump() != puzzle_to_json(c).dump());
}

TEST_CASE("every constellation: construction invariants hold") {
  for (Constellation con : all_constellations()) {
    GenConfig cfg;
    cfg.constellation = con;
    for (int i = 0; i < 60; ++i) {
      Puzzle p = sample_puzzle(cfg, derive_seed(7 + static_cast<std::uint64_t>(con), static_cast<std::uint64_t>(i)));
      REQUIRE_NOTHROW(verify_puzzle(p));
      REQUIRE(p.components.size() == components_of(con).size());
      REQUIRE(p.answer_index >= 0);
      REQUIRE(p.answer_index < 8);
      for (const Component& comp : p.components) {
        if (comp.kind == ComponentKind::Single) {
          REQUIRE(comp.attrs.count(Attr::Number) == 0);
          REQUIRE(comp.attrs.count(Attr::Position) == 0);
        } else {
          // exactly one of number/position governs; the other is derived
          bool num_rule = comp.rules.count(Attr::Number) > 0;
          bool pos_rule = comp.rules.count(Attr::Position) > 0;
          REQUIRE(num_rule != pos_rule);
          REQUIRE(comp.derived.has_value());
          // number equals the popcount of position everywhere
          const Grid& num = comp.attrs.at(Attr::Number);
          const Grid& pos = comp.attrs.at(Attr::Position);
          for (int r = 0; r < 3; ++r)
            for (int cidx = 0; cidx < 3; ++cidx) {
              REQUIRE(num[r][cidx] ==
                      std::popcount(static_cast<unsigned>(pos[r][cidx])));
              REQUIRE(pos[r][cidx] >= 1);
              REQUIRE(pos[r][cidx] < (1 << slot_count(comp.kind)));
            }
        }
      }
    }
  }
}

TEST_CASE("candidates: uniqueness, difference and balanced bisection") {
  GenConfig cfg;
  for (Constellation con : {Constellation::Center, Constellation::TwoByTwo,
                            Constellation::LeftRight, Constellation::InOutGrid}) {
    cfg.constellation = con;
    for (int i = 0; i < 40; ++i) {
      Puzzle p = sample_puzzle(cfg, derive_seed(55 + static_cast<std::uint64_t>(con), static_cast<std::uint64_t>(i)));
      // exactly one candidate solves the puzzle (checked in verify_puzzle);
      // all 8 candidates are pairwise distinct
      for (std::size_t a = 0; a < 8; ++a)
        for (std::size_t b = a + 1; b < 8; ++b)
          REQUIRE(p.candidates[a] != p.candidates[b]);
      // per attribute: either untouched (1 value) or a clean 4/4 split
      for (std::size_t ci = 0; ci < p.components.size(); ++ci) {
        for (const auto& [attr, grid] : p.components[ci].attrs) {
          std::map<int, int> counts;
          for (const Candidate& cand : p.candidates) ++counts[cand[ci].at(attr)];
          if (counts.size() == 1) continue;
          REQUIRE(counts.size() == 2);
          for (const auto& [value, count] : counts) REQUIRE(count == 4);
        }
      }
    }
  }
}

TEST_CASE("answer index is uniform (chi-square over 10k puzzles)") {
  GenConfig cfg;
  cfg.constellation = Constellation::Center;
  std::array<int, 8> counts{};
  const int n = 10000;
  for (int i = 0; i < n; ++i)
    ++counts[static_cast<std::size_t>(
        sample_puzzle(cfg, derive_seed(2024, static_cast<std::uint64_t>(i))).answer_index)];
  double expected = n / 8.0;
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 7 degrees of freedom, p > 0.01 <=> chi2 < 18.475
  REQUIRE(chi2 < 18.475);
}

TEST_CASE("jsonl round trip") {
  std::vector<Puzzle> puzzles;
  for (Constellation con : all_constellations()) {
    GenConfig cfg;
    cfg.constellation = con;
    for (int i = 0; i < 30; ++i)
      puzzles.push_back(sample_puzzle(cfg, derive_seed(31 + static_cast<std::uint64_t>(con), static_cast<std::uint64_t>(i))));
  }
  auto path = temp_file("arlc_rpm_roundtrip.jsonl");
  write_jsonl(puzzles, path.string());
  std::vector<Puzzle> back = read_jsonl(path.string());
  REQUIRE(back.size() == puzzles.size());
  for (std::size_t i = 0; i < puzzles.size(); ++i)
    REQUIRE(puzzle_to_json(back[i]).dump() == puzzle_to_json(puzzles[i]).dump());

  // identical bytes across writes
  auto path2 = temp_file("arlc_rpm_roundtrip2.jsonl");
  write_jsonl(puzzles, path2.string());
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), {});
  std::string s2((std::istreambuf_iterator<char>(f2)), {});
  REQUIRE(s1 == s2);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("jsonl: empty file and truncated record") {
  auto empty = temp_file("arlc_rpm_empty.jsonl");
  { std::ofstream out(empty); }
  REQUIRE(read_jsonl(empty.string()).empty());
  std::filesystem::remove(empty);

  auto broken = temp_file("arlc_rpm_broken.jsonl");
  {
    GenConfig cfg;
    std::ofstream out(broken);
    out << puzzle_to_json(sample_puzzle(cfg, 1)).dump() << "\n";
    out << "{\"constellation\": \"center\", \"compo\n";
  }
  try {
    read_jsonl(broken.string());
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    REQUIRE(std::string(e.what()).find("line 2") != std::string::npos);
  }
  std::filesystem::remove(broken);
}

TEST_CASE("hard position rules are flagged") {
  GenConfig cfg;
  cfg.constellation = Constellation::TwoByTwo;
  cfg.allowed[Attr::Position] = {RuleFamily::Progression, RuleFamily::Arithmetic};
  // force position to govern by excluding every number family
  cfg.allowed[Attr::Number] = {};
  int hard = 0;
  for (int i = 0; i < 20; ++i) {
    Puzzle p = sample_puzzle(cfg, derive_seed(77, static_cast<std::uint64_t>(i)));
    if (p.has_hard_rule()) ++hard;
    const Component& c = p.components[0];
    REQUIRE(c.rules.count(Attr::Position) == 1);
  }
  REQUIRE(hard == 20);

  GenConfig soft_cfg;
  soft_cfg.constellation = Constellation::TwoByTwo;
  soft_cfg.include_hard_position = false;
  for (int i = 0; i < 40; ++i) {
    Puzzle p = sample_puzzle(soft_cfg, derive_seed(78, static_cast<std::uint64_t>(i)));
    REQUIRE_FALSE(p.has_hard_rule());
  }
}

TEST_CASE("unsatisfiable configuration is rejected") {
  GenConfig cfg;
  cfg.constellation = Constellation::Center;
  cfg.size_range = {2, 3};  // arithmetic needs 2*lo <= hi
  cfg.forced[Attr::Size] = RuleFamily::Arithmetic;
  REQUIRE_THROWS_AS(sample_puzzle(cfg, 1), ConfigError);
}

TEST_CASE("ood_split predicates and the Table-4 pair set") {
  REQUIRE(center_pairs().size() == 11);
  for (const auto& [attr, fam] : center_pairs())
    REQUIRE_FALSE((attr == Attr::Type && fam == RuleFamily::Arithmetic));

  OodSplit split = ood_split({{Attr::Color, RuleFamily::Arithmetic}});
  GenConfig train_cfg;
  train_cfg.excluded.insert({Attr::Color, RuleFamily::Arithmetic});
  for (int i = 0; i < 100; ++i) {
    Puzzle p = sample_puzzle(train_cfg, derive_seed(91, static_cast<std::uint64_t>(i)));
    REQUIRE(split.train_pred(p));
    REQUIRE_FALSE(split.test_pred(p));
  }
  GenConfig eval_cfg;
  eval_cfg.forced[Attr::Color] = RuleFamily::Arithmetic;
  for (int i = 0; i < 100; ++i) {
    Puzzle p = sample_puzzle(eval_cfg, derive_seed(92, static_cast<std::uint64_t>(i)));
    REQUIRE(split.test_pred(p));
    REQUIRE_FALSE(split.train_pred(p));
  }

  REQUIRE_THROWS_AS(ood_split({}), ConfigError);
  REQUIRE_THROWS_AS(ood_split(center_pairs()), ConfigError);
}
