#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "arlc/model.hpp"
#include "arlc/trainer.hpp"

using namespace arlc;
using model::EncodedGrid;
using model::RuleSet;
using vsa::BlockVector;
using vsa::Codebook;
using vsa::Dims;

namespace {

constexpr Dims kDims{1024, 4};

const Codebook& test_codebook() {
  static Codebook cb = vsa::new_codebook(5, 256, vsa::CodebookKind::Fpe, kDims);
  return cb;
}

EncodedGrid encode_ints(const std::array<std::array<int, 3>, 3>& values,
                        bool has_answer = true) {
  const Codebook& cb = test_codebook();
  EncodedGrid g;
  g.dims = kDims;
  g.has_answer = has_answer;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      if (i == 2 && j == 2 && !has_answer) continue;
      g.panel[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          cb.at(values[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
    }
  return g;
}

int decode_of(const BlockVector& v) { return vsa::decode(v, test_codebook()).index; }

std::span<const double> logits_of(const RuleSet& rs, int r) {
  return rs.rule_logits(r);
}

double confidence(const RuleSet& rs, int r, const EncodedGrid& g, model::Mode m) {
  return model::rule_confidence(logits_of(rs, r), rs.T, g, m);
}

// Example grid from the degenerate-selection construction: arithmetic plus
// everywhere, rows 1 and 2 share the third value.
constexpr std::array<std::array<int, 3>, 3> kExample1 = {
    {{9, 0, 9}, {6, 3, 9}, {3, 2, 5}}};
// Variant whose first-row sum (18) differs from the first-column sum (17).
constexpr std::array<std::array<int, 3>, 3> kExample1Variant = {
    {{8, 1, 9}, {6, 3, 9}, {3, 2, 5}}};

}  // namespace

TEST_CASE("context panels: row mapping and column alignment") {
  auto refs = model::context_panels(1);
  // x = (1,1),(1,2); o1..o3 = row 2; o4,o5 = first two of row 3
  REQUIRE(refs[0].row == 0);
  REQUIRE(refs[0].col == 0);
  REQUIRE(refs[1].row == 0);
  REQUIRE(refs[1].col == 1);
  REQUIRE(refs[2].row == 1);
  REQUIRE(refs[3].row == 1);
  REQUIRE(refs[4].row == 1);
  REQUIRE(refs[4].col == 2);
  REQUIRE(refs[5].row == 2);
  REQUIRE(refs[5].col == 0);
  REQUIRE(refs[6].row == 2);
  REQUIRE(refs[6].col == 1);

  for (int target = 1; target <= 3; ++target) {
    auto r = model::context_panels(target);
    // {x1, o1, o4} is exactly the first column
    std::set<int> rows = {r[0].row, r[2].row, r[5].row};
    REQUIRE(rows == std::set<int>{0, 1, 2});
    REQUIRE(r[0].col == 0);
    REQUIRE(r[2].col == 0);
    REQUIRE(r[5].col == 0);
    // panel (3,3) is never referenced
    for (const auto& pr : r) REQUIRE_FALSE((pr.row == 2 && pr.col == 2));
  }
}

TEST_CASE("build_context on the worked example grid") {
  EncodedGrid g = encode_ints(kExample1, false);
  model::ContextView ctx = model::build_context(g, 3);
  REQUIRE(decode_of(*ctx.x[0]) == 3);
  REQUIRE(decode_of(*ctx.x[1]) == 2);
  REQUIRE(decode_of(*ctx.o[0]) == 9);
  REQUIRE(decode_of(*ctx.o[1]) == 0);
  REQUIRE(decode_of(*ctx.o[2]) == 9);
  REQUIRE(decode_of(*ctx.o[3]) == 6);
  REQUIRE(decode_of(*ctx.o[4]) == 3);

  model::ContextView ctx1 = model::build_context(g, 1);
  REQUIRE(decode_of(*ctx1.x[0]) == 9);
  REQUIRE(decode_of(*ctx1.o[0]) == 6);
}

TEST_CASE("compute_terms: saturated and uniform assignments") {
  EncodedGrid g = encode_ints(kExample1, false);
  model::ContextView ctx = model::build_context(g, 1);

  std::vector<double> logits(12 * model::kBasis, 0.0);
  auto pin = [&](int term, int slot) {
    for (int i = 0; i < model::kBasis; ++i)
      logits[static_cast<std::size_t>(term * model::kBasis + i)] =
          i == slot ? model::kProgramLogit : -model::kProgramLogit;
  };
  for (int t = 0; t < 12; ++t) pin(t, model::E);
  pin(0, model::X1);
  auto terms = model::compute_terms(logits, 12, ctx);
  REQUIRE(terms.size() == 12);
  // saturated terms are exactly the named basis vectors
  REQUIRE(terms[0] == *ctx.x[0]);
  REQUIRE(terms[1] == ctx.e);
  REQUIRE(terms[11] == ctx.e);

  // uniform logits: the equal-weight bundle of all eight basis vectors
  std::vector<double> uniform(12 * model::kBasis, 0.0);
  auto uterms = model::compute_terms(uniform, 12, ctx);
  std::vector<BlockVector> all = {*ctx.x[0], *ctx.x[1], *ctx.o[0], *ctx.o[1],
                                  *ctx.o[2], *ctx.o[3], *ctx.o[4], ctx.e};
  std::vector<real_t> w(8, 1.0);
  BlockVector expected = vsa::bundle(all, w);
  for (std::size_t d = 0; d < expected.data.size(); ++d)
    REQUIRE(uterms[0].data[d] == Catch::Approx(expected.data[d]).margin(1e-12));
}

TEST_CASE("execute_rule: programmed rules against the integer oracle") {
  RuleSet rs = model::program_rules(model::default_programs(false));
  REQUIRE(rs.R == 4);

  // arithmetic plus on x = (b1, b2) decodes to 3
  EncodedGrid g = encode_ints({{{1, 2, 3}, {2, 2, 4}, {1, 1, 2}}});
  model::ContextView ctx = model::build_context(g, 1);
  auto terms = model::compute_terms(logits_of(rs, 0), rs.T, ctx);
  REQUIRE(decode_of(model::execute_rule(terms)) == 3);

  // progression 2*x2 - x1 on x = (b2, b4) decodes to 6
  EncodedGrid gp = encode_ints({{{2, 4, 6}, {1, 2, 3}, {3, 4, 5}}});
  model::ContextView ctxp = model::build_context(gp, 1);
  auto pterms = model::compute_terms(logits_of(rs, 2), rs.T, ctxp);
  REQUIRE(decode_of(model::execute_rule(pterms)) == 6);

  // distribute three on the worked example, target row 1: (6+3+9)-9-0 = 9
  EncodedGrid ge = encode_ints(kExample1, false);
  model::ContextView ctxe = model::build_context(ge, 1);
  auto dterms = model::compute_terms(logits_of(rs, 3), rs.T, ctxe);
  REQUIRE(decode_of(model::execute_rule(dterms)) == 9);
}

TEST_CASE("row sharing: one rule set serves every target row") {
  RuleSet rs = model::program_rules(model::default_programs(false));
  EncodedGrid g = encode_ints({{{4, 4, 4}, {4, 4, 4}, {4, 4, 4}}});
  for (int row = 1; row <= 3; ++row) {
    model::ContextView ctx = model::build_context(g, row);
    auto terms = model::compute_terms(logits_of(rs, 2), rs.T, ctx);  // progression
    auto dec = vsa::decode(model::execute_rule(terms), test_codebook());
    REQUIRE(dec.index == 4);
    REQUIRE(dec.similarity == Catch::Approx(1.0));
  }
}

TEST_CASE("rule_confidence: exact predictions and the degenerate pair") {
  RuleSet plain = model::program_rules(model::default_programs(false));
  RuleSet validated = model::program_rules(model::default_programs(true));
  const int kPlus = 0, kD3 = 3;

  // constant grid, programmed progression rule, infer mode -> 2.0
  EncodedGrid cg = encode_ints({{{5, 5, 5}, {5, 5, 5}, {5, 5, 5}}});
  REQUIRE(confidence(plain, 2, cg, model::Mode::Infer) ==
          Catch::Approx(2.0).margin(1e-9));

  // Example-1 grid: plus and d3 are indistinguishable in infer mode
  EncodedGrid ge = encode_ints(kExample1, false);
  double s_plus = confidence(plain, kPlus, ge, model::Mode::Infer);
  double s_d3 = confidence(plain, kD3, ge, model::Mode::Infer);
  REQUIRE(s_plus == Catch::Approx(2.0).margin(1e-9));
  REQUIRE(std::abs(s_plus - s_d3) < 1e-6);

  // the validated variant collapses on the 18-vs-17 sum mismatch
  EncodedGrid gv = encode_ints(kExample1Variant, false);
  double v_plus = confidence(plain, kPlus, gv, model::Mode::Infer);
  double v_d3pp = confidence(validated, kD3, gv, model::Mode::Infer);
  REQUIRE(v_plus == Catch::Approx(2.0).margin(1e-9));
  REQUIRE(v_d3pp < v_plus - 0.05);

  // train mode requires the answer panel
  EncodedGrid no_answer = encode_ints(kExample1, false);
  REQUIRE_THROWS_AS(confidence(plain, kPlus, no_answer, model::Mode::Train),
                    ContractError);
}

TEST_CASE("d3 validation terms cancel when row and column sums agree") {
  RuleSet plain = model::program_rules(model::default_programs(false));
  RuleSet validated = model::program_rules(model::default_programs(true));
  // Example-1 matrix: first-row and first-column sums are both 18
  EncodedGrid ge = encode_ints(kExample1, false);
  for (int row = 1; row <= 2; ++row) {
    model::ContextView ctx = model::build_context(ge, row);
    BlockVector d3 = model::execute_rule(
        model::compute_terms(logits_of(plain, 3), plain.T, ctx));
    BlockVector d3pp = model::execute_rule(
        model::compute_terms(logits_of(validated, 3), validated.T, ctx));
    REQUIRE(vsa::cosine(d3, d3pp) == Catch::Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("soft_select: averaging, shift invariance, saturation") {
  const Codebook& cb = test_codebook();
  std::vector<BlockVector> preds = {cb.at(1), cb.at(2)};
  std::vector<double> equal = {1.0, 1.0};
  BlockVector avg = model::soft_select(equal, preds, 1.0);
  std::vector<real_t> w = {1.0, 1.0};
  BlockVector expected = vsa::bundle(preds, w);
  for (std::size_t d = 0; d < avg.data.size(); ++d)
    REQUIRE(avg.data[d] == Catch::Approx(expected.data[d]).margin(1e-12));

  std::vector<double> shifted = {101.0, 101.0};
  BlockVector avg2 = model::soft_select(shifted, preds, 1.0);
  for (std::size_t d = 0; d < avg.data.size(); ++d)
    REQUIRE(avg2.data[d] == Catch::Approx(avg.data[d]).margin(1e-12));

  std::vector<double> dominant = {50.0, 0.0};
  BlockVector one = model::soft_select(dominant, preds, 1.0);
  for (std::size_t d = 0; d < one.data.size(); ++d)
    REQUIRE(std::abs(one.data[d] - preds[0].data[d]) < 1e-6);

  REQUIRE_THROWS_AS(model::soft_select(equal, preds, 0.0), ValidationError);
}

TEST_CASE("selection argmax is invariant to positive affine score maps") {
  Rng rng(5151);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> scores;
    for (int r = 0; r < 5; ++r) scores.push_back(rng.uniform() * 3.0);
    double scale = 0.5 + rng.uniform() * 4.0;
    double shift = rng.normal(0.0, 10.0);
    auto argmax = [](const std::vector<double>& s) {
      return static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin());
    };
    std::vector<double> mapped = scores;
    for (double& s : mapped) s = scale * s + shift;
    REQUIRE(argmax(scores) == argmax(mapped));
  }
}

TEST_CASE("attribute loss: literal values at the extremes") {
  // single perfect rule: loss = 1 - 3 = -2
  RuleSet prog = model::program_rules({{"progression", {model::X2, model::X2}, {model::X1}}});
  EncodedGrid cg = encode_ints({{{5, 5, 5}, {2, 2, 2}, {7, 7, 7}}});
  REQUIRE(model::attribute_loss(cg, prog, 1.0) == Catch::Approx(-2.0).margin(1e-9));

  // single always-wrong rule on orthogonal truths: loss = 1 - 0 = 1
  RuleSet plus = model::program_rules({{"arithmetic_plus", {model::X1, model::X2}, {}}});
  EncodedGrid bad = encode_ints({{{1, 2, 7}, {2, 3, 9}, {3, 1, 8}}});
  REQUIRE(model::attribute_loss(bad, plus, 1.0) == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("program_rules: saturation, freezing and contract errors") {
  RuleSet rs = model::program_rules(model::default_programs(false));
  for (int r = 0; r < rs.R; ++r) REQUIRE(rs.frozen[static_cast<std::size_t>(r)] == 1);
  // softmax weights within 1e-8 of one-hot
  std::vector<double> w(logits_of(rs, 0).begin(), logits_of(rs, 0).end());
  for (int t = 0; t < rs.T; ++t) {
    model::softmax_inplace(w.data() + t * rs.K, rs.K);
    double mx = 0.0;
    for (int i = 0; i < rs.K; ++i) mx = std::max(mx, w[static_cast<std::size_t>(t * rs.K + i)]);
    REQUIRE(mx > 1.0 - 1e-8);
  }
  REQUIRE(rs.trainable_parameters() == 0);

  std::vector<model::RuleProgram> too_long = {
      {"bad", {model::X1, model::X1, model::X1, model::X1, model::X1, model::X1,
               model::X1}, {}}};
  REQUIRE_THROWS_AS(model::program_rules(too_long), ContractError);
}

TEST_CASE("template containment: widened rule sets are bit-exact") {
  model::Encoder enc(kDims, 40);
  RuleSet rs6 = model::init_ruleset(5, 6, 555);
  rs6.dims = kDims;
  rs6.codebook_seeds = enc.seeds();
  RuleSet rs12 = model::widen_ruleset(rs6, 12);

  rpm::GenConfig cfg;
  for (rpm::Constellation con : {rpm::Constellation::Center, rpm::Constellation::TwoByTwo}) {
    cfg.constellation = con;
    for (int i = 0; i < 10; ++i) {
      rpm::Puzzle p = rpm::sample_puzzle(cfg, derive_seed(606 + static_cast<std::uint64_t>(con), static_cast<std::uint64_t>(i)));
      model::Prediction a = model::predict_answer_detailed(p, rs6, enc);
      model::Prediction b = model::predict_answer_detailed(p, rs12, enc);
      REQUIRE(a.index == b.index);
      REQUIRE(a.attr_predictions.size() == b.attr_predictions.size());
      for (std::size_t k = 0; k < a.attr_predictions.size(); ++k)
        REQUIRE(a.attr_predictions[k] == b.attr_predictions[k]);  // bitwise
    }
  }

  // the slow path agrees: terms of the widened set reduce to the narrow ones
  EncodedGrid g = encode_ints(kExample1, false);
  model::ContextView ctx = model::build_context(g, 1);
  for (int r = 0; r < rs6.R; ++r) {
    BlockVector narrow = model::execute_rule(
        model::compute_terms(rs6.rule_logits(r), rs6.T, ctx));
    BlockVector wide = model::execute_rule(
        model::compute_terms(rs12.rule_logits(r), rs12.T, ctx));
    REQUIRE(narrow == wide);
  }
}

TEST_CASE("programmed execution optimality on generated puzzles") {
  model::Encoder enc(kDims, 41);
  RuleSet rs = model::program_rules(model::default_programs(false));
  rs.dims = kDims;
  rs.codebook_seeds = enc.seeds();
  rpm::GenConfig cfg;
  cfg.include_hard_position = false;
  int checked = 0;
  for (rpm::Constellation con : {rpm::Constellation::Center, rpm::Constellation::TwoByTwo}) {
    cfg.constellation = con;
    for (int i = 0; i < 50; ++i) {
      rpm::Puzzle p = rpm::sample_puzzle(cfg, derive_seed(707 + static_cast<std::uint64_t>(con), static_cast<std::uint64_t>(i)));
      for (std::size_t ci = 0; ci < p.components.size(); ++ci) {
        // governed attributes only: a derived position grid is a random
        // mask assignment with no rule to execute
        for (const auto& [attr, rule] : p.components[ci].rules) {
          const rpm::Grid& grid = p.components[ci].attrs.at(attr);
          EncodedGrid eg;
          eg.dims = enc.dims();
          for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c)
              eg.panel[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] =
                  enc.encode(attr, grid[r][c], p.components[ci].kind);
          const BlockVector& truth = eg.panel[2][2];
          model::ContextView ctx = model::build_context(eg, 3);
          double best = 0.0;
          for (int r = 0; r < rs.R; ++r) {
            BlockVector pred = model::execute_rule(
                model::compute_terms(rs.rule_logits(r), rs.T, ctx));
            best = std::max(best, static_cast<double>(vsa::cosine(pred, truth)));
          }
          REQUIRE(best > 1.0 - 1e-6);
          ++checked;
        }
      }
    }
  }
  REQUIRE(checked > 300);
}

TEST_CASE("predict_answer: programmed rules solve easy puzzles; ties go low") {
  model::Encoder enc(kDims, 42);
  RuleSet rs = model::program_rules(model::default_programs(false));
  rs.dims = kDims;
  rs.codebook_seeds = enc.seeds();
  rpm::GenConfig cfg;
  cfg.constellation = rpm::Constellation::Center;
  int correct = 0;
  const int n = 100;
  for (int i = 0; i < n; ++i) {
    rpm::Puzzle p = rpm::sample_puzzle(cfg, derive_seed(808, static_cast<std::uint64_t>(i)));
    if (model::predict_answer(p, rs, enc) == p.answer_index) ++correct;
  }
  REQUIRE(correct >= 90);

  // duplicated winning candidates: the lowest index wins
  rpm::Puzzle p = rpm::sample_puzzle(cfg, 909);
  rpm::Candidate truth = p.candidates[static_cast<std::size_t>(p.answer_index)];
  p.candidates[3] = truth;
  p.candidates[5] = truth;
  if (p.answer_index > 3) {
    int got = model::predict_answer(p, rs, enc);
    REQUIRE(got == 3);
  }
}

TEST_CASE("numeric fast path matches the public slow path") {
  model::Encoder enc(kDims, 43);
  RuleSet rs = model::init_ruleset(5, 12, 777);
  rs.dims = kDims;
  rs.codebook_seeds = enc.seeds();
  rpm::GenConfig cfg;
  cfg.constellation = rpm::Constellation::Center;
  for (int i = 0; i < 5; ++i) {
    rpm::Puzzle p = rpm::sample_puzzle(cfg, derive_seed(1010, static_cast<std::uint64_t>(i)));
    double slow = 0.0;
    for (const auto& [attr, grid] : p.components[0].attrs)
      slow += model::attribute_loss(enc.encode_grid(p.components[0], attr), rs, 1.0);
    double fast = model::puzzle_loss(p, rs, enc, 1.0, false, nullptr);
    REQUIRE(fast == Catch::Approx(slow).margin(1e-9));

    grad::Tape tape;
    double taped = model::puzzle_loss(p, rs, enc, 1.0, false, &tape);
    REQUIRE(taped == Catch::Approx(slow).margin(1e-9));
  }
}

TEST_CASE("full loss gradient matches finite differences (reduced dims)") {
  vsa::Dims dims{64, 4};
  model::Encoder enc(dims, 44);
  rpm::GenConfig cfg;
  cfg.constellation = rpm::Constellation::Center;
  cfg.color_range.hi = 7;  // stay inside the small codebook's index range
  for (int trial = 0; trial < 3; ++trial) {
    rpm::Puzzle p = rpm::sample_puzzle(cfg, derive_seed(1111, static_cast<std::uint64_t>(trial)));
    RuleSet rs = model::init_ruleset(5, 12, derive_seed(1212, static_cast<std::uint64_t>(trial)));
    rs.dims = dims;
    rs.codebook_seeds = enc.seeds();
    std::vector<grad::ParamBlock*> params;
    for (auto& pb : rs.logits) params.push_back(&pb);
    grad::Tape tape;
    double err = grad::finite_diff_check(
        [&](bool with_grad) {
          return model::puzzle_loss(p, rs, enc, 1.0, false,
                                    with_grad ? &tape : nullptr);
        },
        params, 1e-5);
    REQUIRE(err < 1e-4);
  }
}

TEST_CASE("inspect_rules: compiled expressions and entropies") {
  RuleSet rs = model::program_rules(model::default_programs(false));
  std::string report = model::inspect_rules(rs);
  REQUIRE(report.find("(x1 ⊛ x2)") != std::string::npos);
  REQUIRE(report.find("(x2 ⊛ x2) ⊘ (x1)") != std::string::npos);

  RuleSet uniform;
  uniform.R = 1;
  uniform.T = 12;
  uniform.logits.emplace_back("r", 12 * model::kBasis);
  uniform.frozen.push_back(0);
  std::string ur = model::inspect_rules(uniform);
  // every term's assignment entropy is log 8
  std::size_t pos = 0;
  int hits = 0;
  while ((pos = ur.find("H=", pos)) != std::string::npos) {
    double h = std::stod(ur.substr(pos + 2));
    REQUIRE(h == Catch::Approx(std::log(8.0)).margin(1e-4));  // print precision
    ++hits;
    ++pos;
  }
  REQUIRE(hits == 12);
}

TEST_CASE("checkpoints: bit-exact round trip and shape errors") {
  auto path = std::filesystem::temp_directory_path() / "arlc_ckpt_test.json";
  model::Encoder enc(kDims, 45);
  RuleSet rs = model::init_ruleset(5, 12, 4545);
  rs.dims = kDims;
  rs.codebook_seeds = enc.seeds();
  rs.frozen[2] = 1;
  model::save_checkpoint(rs, path.string());
  RuleSet back = model::load_checkpoint(path.string());
  REQUIRE(back.R == rs.R);
  REQUIRE(back.T == rs.T);
  REQUIRE(back.K == rs.K);
  REQUIRE(back.frozen == rs.frozen);
  REQUIRE(back.codebook_seeds == rs.codebook_seeds);
  REQUIRE(back.dims == rs.dims);
  for (int r = 0; r < rs.R; ++r)
    REQUIRE(back.logits[static_cast<std::size_t>(r)].values ==
            rs.logits[static_cast<std::size_t>(r)].values);  // bitwise

  // a T=6 checkpoint loads as T=6
  RuleSet rs6 = model::init_ruleset(5, 6, 4546);
  rs6.dims = kDims;
  rs6.codebook_seeds = enc.seeds();
  model::save_checkpoint(rs6, path.string());
  RuleSet back6 = model::load_checkpoint(path.string());
  REQUIRE(back6.T == 6);

  // corrupting the shape produces a load error naming the field
  {
    std::ifstream in(path);
    nlohmann::ordered_json j;
    in >> j;
    j["T"] = 12;  // now inconsistent with the stored logits
    std::ofstream out(path);
    out << j.dump();
  }
  try {
    model::load_checkpoint(path.string());
    FAIL("expected a load error");
  } catch (const LoadError& e) {
    REQUIRE(std::string(e.what()).find("logits") != std::string::npos);
  }
  std::filesystem::remove(path);
}
