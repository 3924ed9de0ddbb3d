// The abductive rule learner: row contexts (current pair x1,x2 plus five
// context panels o1..o5), a 12-term bind/unbind rule template over soft
// convex term assignments, confidence scoring by cosine against known
// panels, soft selection across rules, programming, and checkpoints.
//
// Two evaluation paths exist on purpose. The public operations work on
// BlockVectors with exact direct convolutions; the numeric/tape engines work
// on packed half-spectra where binding is a pointwise complex product. Both
// are tested against each other.
#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "arlc/autodiff.hpp"
#include "arlc/common.hpp"
#include "arlc/fft.hpp"
#include "arlc/rpm.hpp"
#include "arlc/vsa.hpp"

namespace arlc::model {

constexpr int kBasis = 8;  // [x1, x2, o1, o2, o3, o4, o5, e]
constexpr double kProgramLogit = 20.0;
// Softmax weights below this are truncated (and the term renormalized), so
// saturated programmed terms act as exact one-hot assignments.
constexpr double kWeightSnap = 1e-12;

inline const std::array<std::string, kBasis>& basis_names() {
  static const std::array<std::string, kBasis> n = {"x1", "x2", "o1", "o2",
                                                    "o3", "o4", "o5", "e"};
  return n;
}

enum BasisSlot : int { X1 = 0, X2, O1, O2, O3, O4, O5, E };

// ---- context construction -------------------------------------------------

struct PanelRef {
  int row = 0;  // 0-based
  int col = 0;
};

// Panel coordinates feeding [x1, x2, o1..o5] when predicting target_row
// (1-based). o1..o3 are the full other row (row 2 when predicting row 1,
// row 1 otherwise); o4, o5 are the first two panels of the remaining row.
// {x1, o1, o4} is always exactly the first column, and panel (3,3) is never
// referenced.
inline std::array<PanelRef, 7> context_panels(int target_row) {
  if (target_row < 1 || target_row > 3)
    throw ContractError("context: target row must be 1, 2 or 3");
  int r = target_row - 1;
  int full = r == 0 ? 1 : 0;
  int rest = 3 - r - full;
  return {PanelRef{r, 0},    PanelRef{r, 1},    PanelRef{full, 0},
          PanelRef{full, 1}, PanelRef{full, 2}, PanelRef{rest, 0},
          PanelRef{rest, 1}};
}

struct EncodedGrid {
  vsa::Dims dims;
  std::array<std::array<vsa::BlockVector, 3>, 3> panel;
  bool has_answer = true;  // whether panel (3,3) holds ground truth
};

struct ContextView {
  std::array<const vsa::BlockVector*, 2> x{};
  std::array<const vsa::BlockVector*, 5> o{};
  vsa::BlockVector e;

  const vsa::BlockVector& basis(int slot) const {
    if (slot < O1) return *x[static_cast<std::size_t>(slot)];
    if (slot < E) return *o[static_cast<std::size_t>(slot - O1)];
    return e;
  }
};

inline ContextView build_context(const EncodedGrid& grid, int target_row) {
  auto refs = context_panels(target_row);
  ContextView ctx;
  ctx.e = vsa::identity_vector(grid.dims);
  for (int i = 0; i < 7; ++i) {
    const PanelRef& pr = refs[static_cast<std::size_t>(i)];
    const vsa::BlockVector* p =
        &grid.panel[static_cast<std::size_t>(pr.row)][static_cast<std::size_t>(pr.col)];
    if (p->data.empty())
      throw ContractError("context: required panel (" + std::to_string(pr.row + 1) +
                          "," + std::to_string(pr.col + 1) + ") missing");
    if (i < 2)
      ctx.x[static_cast<std::size_t>(i)] = p;
    else
      ctx.o[static_cast<std::size_t>(i - 2)] = p;
  }
  return ctx;
}

// ---- rule set ---------------------------------------------------------------

// R rules x T terms x K basis slots of unconstrained logits; softmax over
// the K slots yields the convex term assignment. One set is shared across
// all rows and attributes.
struct RuleSet {
  int R = 5;
  int T = 12;
  int K = kBasis;
  std::vector<grad::ParamBlock> logits;  // one block per rule, T*K each
  std::vector<char> frozen;
  // Metadata carried into checkpoints so evaluation can rebuild encoders.
  vsa::Dims dims;
  std::map<std::string, std::uint64_t> codebook_seeds;

  std::span<const double> rule_logits(int r) const {
    return {logits[static_cast<std::size_t>(r)].values.data(),
            static_cast<std::size_t>(T * K)};
  }

  int trainable_parameters() const {
    int n = 0;
    for (int r = 0; r < R; ++r)
      if (!frozen[static_cast<std::size_t>(r)]) n += T * K;
    return n;
  }
};

inline RuleSet init_ruleset(int R, int T, std::uint64_t seed,
                            double init_std = 0.1) {
  if (T % 2 != 0) throw ConfigError("ruleset: T must be even");
  RuleSet rs;
  rs.R = R;
  rs.T = T;
  Rng rng(seed);
  for (int r = 0; r < R; ++r) {
    grad::ParamBlock pb("rule" + std::to_string(r),
                        static_cast<std::size_t>(T * rs.K));
    for (double& v : pb.values) v = rng.normal(0.0, init_std);
    rs.logits.push_back(std::move(pb));
    rs.frozen.push_back(0);
  }
  return rs;
}

// ---- term computation and execution ----------------------------------------

inline void softmax_inplace(double* w, int k) {
  double m = w[0];
  for (int i = 1; i < k; ++i) m = std::max(m, w[i]);
  double z = 0.0;
  for (int i = 0; i < k; ++i) z += (w[i] = std::exp(w[i] - m));
  for (int i = 0; i < k; ++i) w[i] /= z;
}

inline void snap_weights(double* w, int k) {
  double z = 0.0;
  for (int i = 0; i < k; ++i) {
    if (w[i] < kWeightSnap) w[i] = 0.0;
    z += w[i];
  }
  for (int i = 0; i < k; ++i) w[i] /= z;
}

// Term weights after softmax + snap; row-major T x K.
inline std::vector<double> term_weights(std::span<const double> rule_logits,
                                        int T, int K) {
  std::vector<double> w(rule_logits.begin(), rule_logits.end());
  for (int t = 0; t < T; ++t) {
    softmax_inplace(w.data() + t * K, K);
    snap_weights(w.data() + t * K, K);
  }
  return w;
}

// c_k = sum_i softmax(logits[k])_i * basis_i over [x1, x2, o1..o5, e].
inline std::vector<vsa::BlockVector> compute_terms(
    std::span<const double> rule_logits, int T, const ContextView& ctx) {
  for (double v : rule_logits)
    if (!std::isfinite(v)) throw NumericError("compute_terms: non-finite logit");
  std::vector<double> w = term_weights(rule_logits, T, kBasis);
  std::vector<vsa::BlockVector> terms;
  terms.reserve(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    vsa::BlockVector c(ctx.e.dims);
    for (int i = 0; i < kBasis; ++i) {
      double wi = w[static_cast<std::size_t>(t * kBasis + i)];
      if (wi == 0.0) continue;
      const vsa::BlockVector& b = ctx.basis(i);
      for (int d = 0; d < c.dims.D; ++d)
        c.data[static_cast<std::size_t>(d)] += wi * b.data[static_cast<std::size_t>(d)];
    }
    terms.push_back(std::move(c));
  }
  return terms;
}

// r = (c1 (*) ... (*) c_{T/2}) (x) (c_{T/2+1} (*) ... (*) c_T).
inline vsa::BlockVector execute_rule(std::span<const vsa::BlockVector> terms) {
  if (terms.empty() || terms.size() % 2 != 0)
    throw ShapeError("execute_rule: need an even, nonzero number of terms");
  std::size_t half = terms.size() / 2;
  vsa::BlockVector plus = terms[0];
  for (std::size_t k = 1; k < half; ++k) plus = vsa::bind(plus, terms[k]);
  vsa::BlockVector minus = terms[half];
  for (std::size_t k = half + 1; k < terms.size(); ++k)
    minus = vsa::bind(minus, terms[k]);
  return vsa::unbind(plus, minus);
}

enum class Mode { Train, Infer };

// s_r = sum_i cos(v(i,3), prediction_r(i,3)); rows 1..3 in train mode,
// rows 1..2 in infer mode.
inline double rule_confidence(std::span<const double> rule_logits, int T,
                              const EncodedGrid& grid, Mode mode) {
  int rows = mode == Mode::Train ? 3 : 2;
  if (mode == Mode::Train && !grid.has_answer)
    throw ContractError("rule_confidence: train mode requires panel (3,3)");
  double s = 0.0;
  for (int i = 1; i <= rows; ++i) {
    ContextView ctx = build_context(grid, i);
    auto terms = compute_terms(rule_logits, T, ctx);
    vsa::BlockVector pred = execute_rule(terms);
    s += vsa::cosine(grid.panel[static_cast<std::size_t>(i - 1)][2], pred);
  }
  return s;
}

// softmax(scores / temperature) . predictions
inline vsa::BlockVector soft_select(std::span<const double> scores,
                                    std::span<const vsa::BlockVector> predictions,
                                    double temperature) {
  if (temperature <= 0.0)
    throw ValidationError("soft_select: temperature must be positive");
  if (scores.empty() || scores.size() != predictions.size())
    throw ShapeError("soft_select: score/prediction count mismatch");
  std::vector<double> w(scores.begin(), scores.end());
  for (double& v : w) v /= temperature;
  softmax_inplace(w.data(), static_cast<int>(w.size()));
  vsa::BlockVector out(predictions[0].dims);
  for (std::size_t r = 0; r < predictions.size(); ++r)
    for (int d = 0; d < out.dims.D; ++d)
      out.data[static_cast<std::size_t>(d)] +=
          w[r] * predictions[r].data[static_cast<std::size_t>(d)];
  return out;
}

// L = 1 - sum_i cos(v(i,3), soft-selected prediction for row i), with
// train-mode confidences shared across the three rows.
inline double attribute_loss(const EncodedGrid& grid, const RuleSet& rs,
                             double temperature) {
  if (!grid.has_answer)
    throw ContractError("loss: training loss requires the full grid");
  std::vector<double> scores;
  std::vector<std::array<vsa::BlockVector, 3>> preds(
      static_cast<std::size_t>(rs.R));
  for (int r = 0; r < rs.R; ++r) {
    double s = 0.0;
    for (int i = 1; i <= 3; ++i) {
      ContextView ctx = build_context(grid, i);
      auto terms = compute_terms(rs.rule_logits(r), rs.T, ctx);
      preds[static_cast<std::size_t>(r)][static_cast<std::size_t>(i - 1)] =
          execute_rule(terms);
      s += vsa::cosine(grid.panel[static_cast<std::size_t>(i - 1)][2],
                       preds[static_cast<std::size_t>(r)][static_cast<std::size_t>(i - 1)]);
    }
    scores.push_back(s);
  }
  double loss = 1.0;
  for (int i = 0; i < 3; ++i) {
    std::vector<vsa::BlockVector> row_preds;
    for (int r = 0; r < rs.R; ++r)
      row_preds.push_back(preds[static_cast<std::size_t>(r)][static_cast<std::size_t>(i)]);
    vsa::BlockVector sel = soft_select(scores, row_preds, temperature);
    loss -= vsa::cosine(grid.panel[static_cast<std::size_t>(i)][2], sel);
  }
  return loss;
}

// ---- programming -------------------------------------------------------------

// A rule written as plus/minus multisets over {x1, x2, o1..o5}; each side is
// padded with the identity up to T/2 terms and compiled to saturated logits.
struct RuleProgram {
  std::string name;
  std::vector<int> plus;   // BasisSlot values
  std::vector<int> minus;
};

inline std::vector<RuleProgram> default_programs(bool d3_validation = false) {
  std::vector<RuleProgram> p;
  p.push_back({"arithmetic_plus", {X1, X2}, {}});
  p.push_back({"arithmetic_minus", {X1}, {X2}});
  p.push_back({"progression", {X2, X2}, {X1}});
  if (d3_validation)
    p.push_back({"distribute_three_validated",
                 {O1, O2, O3, O1, O2, O3},
                 {X1, X2, O1, O4, X1}});
  else
    p.push_back({"distribute_three", {O1, O2, O3}, {X1, X2}});
  return p;
}

inline RuleSet program_rules(const std::vector<RuleProgram>& programs,
                             int T = 12, bool frozen = true) {
  RuleSet rs;
  rs.R = static_cast<int>(programs.size());
  rs.T = T;
  for (const RuleProgram& prog : programs) {
    if (static_cast<int>(prog.plus.size()) > T / 2 ||
        static_cast<int>(prog.minus.size()) > T / 2)
      throw ContractError("program_rules: '" + prog.name + "' exceeds " +
                          std::to_string(T / 2) + " terms per side");
    grad::ParamBlock pb(prog.name, static_cast<std::size_t>(T * kBasis));
    auto set_term = [&](int t, int slot) {
      for (int i = 0; i < kBasis; ++i)
        pb.values[static_cast<std::size_t>(t * kBasis + i)] =
            i == slot ? kProgramLogit : -kProgramLogit;
    };
    for (int t = 0; t < T / 2; ++t)
      set_term(t, t < static_cast<int>(prog.plus.size())
                      ? prog.plus[static_cast<std::size_t>(t)]
                      : E);
    for (int t = 0; t < T / 2; ++t)
      set_term(T / 2 + t, t < static_cast<int>(prog.minus.size())
                              ? prog.minus[static_cast<std::size_t>(t)]
                              : E);
    rs.logits.push_back(std::move(pb));
    rs.frozen.push_back(frozen ? 1 : 0);
  }
  return rs;
}

// Embeds a T-term rule set into a wider template; the extra plus/minus terms
// are pinned to the identity, which reproduces the narrow template's
// predictions bit-exactly.
inline RuleSet widen_ruleset(const RuleSet& rs, int T_new) {
  if (T_new % 2 != 0 || T_new < rs.T)
    throw ConfigError("widen_ruleset: target template is narrower");
  RuleSet out = rs;
  out.T = T_new;
  out.logits.clear();
  for (int r = 0; r < rs.R; ++r) {
    grad::ParamBlock pb(rs.logits[static_cast<std::size_t>(r)].name,
                        static_cast<std::size_t>(T_new * rs.K));
    auto copy_side = [&](int src_begin, int dst_begin, int count) {
      for (int t = 0; t < count; ++t)
        for (int i = 0; i < rs.K; ++i)
          pb.values[static_cast<std::size_t>((dst_begin + t) * rs.K + i)] =
              rs.logits[static_cast<std::size_t>(r)]
                  .values[static_cast<std::size_t>((src_begin + t) * rs.K + i)];
    };
    auto pin_identity = [&](int dst_begin, int count) {
      for (int t = 0; t < count; ++t)
        for (int i = 0; i < rs.K; ++i)
          pb.values[static_cast<std::size_t>((dst_begin + t) * rs.K + i)] =
              i == E ? kProgramLogit : -kProgramLogit;
    };
    copy_side(0, 0, rs.T / 2);
    pin_identity(rs.T / 2, (T_new - rs.T) / 2);
    copy_side(rs.T / 2, T_new / 2, rs.T / 2);
    pin_identity(T_new / 2 + rs.T / 2, (T_new - rs.T) / 2);
    out.logits.push_back(std::move(pb));
  }
  return out;
}

// ---- attribute encoders -------------------------------------------------------

// Value attributes use FPE codebooks (binding is integer addition there);
// position uses categorical codebooks over mask ids, one per slot count.
// Codeword half-spectra are precomputed so evaluation never transforms.
class Encoder {
 public:
  Encoder(vsa::Dims dims, std::uint64_t base_seed)
      : Encoder(dims, default_seeds(base_seed)) {}

  Encoder(vsa::Dims dims, std::map<std::string, std::uint64_t> seeds)
      : dims_(dims), seeds_(std::move(seeds)) {
    const int L = dims_.L();
    for (const char* key : {"type", "size", "color", "number"})
      books_.emplace(key, vsa::new_codebook(seeds_.at(key), L,
                                            vsa::CodebookKind::Fpe, dims_));
    books_.emplace("position4", vsa::new_codebook(seeds_.at("position4"), 16,
                                                  vsa::CodebookKind::Categorical, dims_));
    books_.emplace("position9", vsa::new_codebook(seeds_.at("position9"), 512,
                                                  vsa::CodebookKind::Categorical, dims_));
    if (spectral::is_pow2(L)) {
      for (auto& [key, cb] : books_) {
        auto& spec = spectra_[key];
        spec.resize(cb.vectors.size());
        for (std::size_t i = 0; i < cb.vectors.size(); ++i) {
          spec[i].resize(static_cast<std::size_t>(spectral::packed_len(dims_.D, dims_.B)));
          spectral::rfft_packed(cb.vectors[i].data.data(), dims_.D, dims_.B,
                                spec[i].data());
        }
      }
      identity_spec_.resize(static_cast<std::size_t>(spectral::packed_len(dims_.D, dims_.B)));
      vsa::BlockVector e = vsa::identity_vector(dims_);
      spectral::rfft_packed(e.data.data(), dims_.D, dims_.B, identity_spec_.data());
    }
  }

  static std::map<std::string, std::uint64_t> default_seeds(std::uint64_t base) {
    return {{"type", base + 1},      {"size", base + 2},
            {"color", base + 3},     {"number", base + 4},
            {"position4", base + 5}, {"position9", base + 6}};
  }

  vsa::Dims dims() const { return dims_; }
  const std::map<std::string, std::uint64_t>& seeds() const { return seeds_; }

  static std::string book_key(rpm::Attr a, rpm::ComponentKind kind) {
    if (a == rpm::Attr::Position)
      return kind == rpm::ComponentKind::Grid9 ? "position9" : "position4";
    return rpm::to_string(a);
  }

  const vsa::Codebook& book(rpm::Attr a, rpm::ComponentKind kind) const {
    return books_.at(book_key(a, kind));
  }

  const vsa::BlockVector& encode(rpm::Attr a, int value,
                                 rpm::ComponentKind kind) const {
    return book(a, kind).at(value);
  }

  const double* spectrum(rpm::Attr a, int value, rpm::ComponentKind kind) const {
    const vsa::Codebook& cb = book(a, kind);
    return spectra_.at(book_key(a, kind))[static_cast<std::size_t>(value - cb.index_lo)].data();
  }

  const double* identity_spectrum() const { return identity_spec_.data(); }
  int packed_len() const { return spectral::packed_len(dims_.D, dims_.B); }

  EncodedGrid encode_grid(const rpm::Component& comp, rpm::Attr a) const {
    EncodedGrid g;
    g.dims = dims_;
    const rpm::Grid& grid = comp.attrs.at(a);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        g.panel[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
            encode(a, grid[i][j], comp.kind);
    return g;
  }

 private:
  vsa::Dims dims_;
  std::map<std::string, std::uint64_t> seeds_;
  std::map<std::string, vsa::Codebook> books_;
  std::map<std::string, std::vector<std::vector<double>>> spectra_;
  std::vector<double> identity_spec_;
};

// ---- spectral numeric engine ---------------------------------------------------

namespace detail {

// Per-attribute view: codeword spectra of the nine grid panels.
struct SpecGrid {
  std::array<const double*, 9> panel{};  // row-major, (3,3) may be null
  const double* identity = nullptr;
  vsa::Dims dims;
  int plen = 0;
};

inline SpecGrid spec_grid(const Encoder& enc, const rpm::Component& comp,
                          rpm::Attr a) {
  SpecGrid g;
  g.dims = enc.dims();
  g.plen = enc.packed_len();
  g.identity = enc.identity_spectrum();
  const rpm::Grid& grid = comp.attrs.at(a);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      g.panel[static_cast<std::size_t>(3 * i + j)] = enc.spectrum(a, grid[i][j], comp.kind);
  return g;
}

inline std::array<const double*, kBasis> basis_spectra(const SpecGrid& g,
                                                       int target_row) {
  auto refs = context_panels(target_row);
  std::array<const double*, kBasis> b{};
  for (int i = 0; i < 7; ++i)
    b[static_cast<std::size_t>(i)] =
        g.panel[static_cast<std::size_t>(3 * refs[static_cast<std::size_t>(i)].row +
                                         refs[static_cast<std::size_t>(i)].col)];
  b[E] = g.identity;
  return b;
}

// One rule executed on one target row, entirely in the spectral domain.
// Snapped one-hot terms skip the mix (identity terms skip the fold too), so
// a wide template with identity-pinned extras is bit-identical to the
// narrow one.
inline void execute_spectral(const std::vector<double>& weights, int T,
                             const std::array<const double*, kBasis>& basis,
                             int plen, std::vector<double>& scratch,
                             std::vector<double>& out) {
  const int nc = plen / 2;
  std::vector<double>& term = scratch;
  term.resize(static_cast<std::size_t>(plen));
  out.assign(static_cast<std::size_t>(plen), 0.0);
  // plus and minus sides both start as the identity's flat spectrum
  std::vector<double> plus(static_cast<std::size_t>(plen));
  std::vector<double> minus(static_cast<std::size_t>(plen));
  for (int i = 0; i < nc; ++i) {
    plus[static_cast<std::size_t>(2 * i)] = 1.0;
    plus[static_cast<std::size_t>(2 * i + 1)] = 0.0;
  }
  minus = plus;
  for (int t = 0; t < T; ++t) {
    const double* w = weights.data() + t * kBasis;
    int hot = -1;
    int nz = 0;
    for (int i = 0; i < kBasis; ++i)
      if (w[i] != 0.0) {
        ++nz;
        hot = i;
      }
    const double* tspec;
    if (nz == 1 && w[hot] == 1.0) {
      if (hot == E) continue;  // exact identity term: no-op in the fold
      tspec = basis[static_cast<std::size_t>(hot)];
    } else {
      spectral::mix(basis.data(), w, kBasis, term.data(), plen);
      tspec = term.data();
    }
    std::vector<double>& side = t < T / 2 ? plus : minus;
    spectral::cmul(side.data(), tspec, out.data(), nc);
    std::swap(side, out);
  }
  spectral::cmul_conj(plus.data(), minus.data(), out.data(), nc);
}

inline double spec_cosine(const double* a, const double* b, vsa::Dims d) {
  double daa = spectral::pdot(a, a, d.D, d.B);
  double dbb = spectral::pdot(b, b, d.D, d.B);
  double dab = spectral::pdot(a, b, d.D, d.B);
  return dab / std::sqrt(daa * dbb);
}

// Infer-mode soft-selected prediction for the missing panel of one
// attribute grid.
inline std::vector<double> predict_attr_spectrum(const SpecGrid& g,
                                                 const RuleSet& rs,
                                                 double temperature) {
  std::vector<double> scores(static_cast<std::size_t>(rs.R), 0.0);
  std::vector<std::vector<double>> row3(static_cast<std::size_t>(rs.R));
  std::vector<double> scratch, pred;
  for (int r = 0; r < rs.R; ++r) {
    std::vector<double> w = term_weights(rs.rule_logits(r), rs.T, rs.K);
    for (int row = 1; row <= 3; ++row) {
      auto basis = basis_spectra(g, row);
      execute_spectral(w, rs.T, basis, g.plen, scratch, pred);
      if (row == 3) {
        row3[static_cast<std::size_t>(r)] = pred;
      } else {
        const double* truth = g.panel[static_cast<std::size_t>(3 * (row - 1) + 2)];
        scores[static_cast<std::size_t>(r)] += spec_cosine(pred.data(), truth, g.dims);
      }
    }
  }
  std::vector<double> sel = scores;
  for (double& s : sel) s /= temperature;
  softmax_inplace(sel.data(), rs.R);
  std::vector<double> out(static_cast<std::size_t>(g.plen), 0.0);
  for (int r = 0; r < rs.R; ++r)
    spectral::axpy(sel[static_cast<std::size_t>(r)],
                   row3[static_cast<std::size_t>(r)].data(), out.data(), g.plen);
  return out;
}

inline std::vector<std::pair<std::size_t, rpm::Attr>> puzzle_attrs(
    const rpm::Puzzle& p) {
  std::vector<std::pair<std::size_t, rpm::Attr>> v;
  for (std::size_t ci = 0; ci < p.components.size(); ++ci)
    for (const auto& [attr, grid] : p.components[ci].attrs) v.push_back({ci, attr});
  return v;
}

}  // namespace detail

// ---- answer prediction ----------------------------------------------------------

struct Prediction {
  int index = 0;
  std::array<double, 8> scores{};
  // Soft-selected row-3 spectra per (component, attribute), in
  // detail::puzzle_attrs order.
  std::vector<std::vector<double>> attr_predictions;
};

// Scores each candidate by the summed cosine between the soft-selected
// prediction and the candidate's encoded value, over every attribute of
// every component. Ties break to the lowest index.
inline Prediction predict_answer_detailed(const rpm::Puzzle& puzzle,
                                          const RuleSet& rs, const Encoder& enc,
                                          double temperature = 1.0) {
  if (puzzle.candidates.size() != 8)
    throw ContractError("predict_answer: puzzle must carry 8 candidates");
  Prediction out;
  out.scores.fill(0.0);
  for (const auto& [ci, attr] : detail::puzzle_attrs(puzzle)) {
    const rpm::Component& comp = puzzle.components[ci];
    detail::SpecGrid g = detail::spec_grid(enc, comp, attr);
    std::vector<double> pred = detail::predict_attr_spectrum(g, rs, temperature);
    for (int c = 0; c < 8; ++c) {
      int value = puzzle.candidates[static_cast<std::size_t>(c)][ci].at(attr);
      const double* cand = enc.spectrum(attr, value, comp.kind);
      out.scores[static_cast<std::size_t>(c)] +=
          detail::spec_cosine(pred.data(), cand, enc.dims());
    }
    out.attr_predictions.push_back(std::move(pred));
  }
  out.index = 0;
  for (int c = 1; c < 8; ++c)
    if (out.scores[static_cast<std::size_t>(c)] > out.scores[static_cast<std::size_t>(out.index)])
      out.index = c;
  return out;
}

inline int predict_answer(const rpm::Puzzle& puzzle, const RuleSet& rs,
                          const Encoder& enc, double temperature = 1.0) {
  return predict_answer_detailed(puzzle, rs, enc, temperature).index;
}

// ---- training graph ----------------------------------------------------------------

// Records the full differentiable loss for one attribute grid on the tape:
// term softmaxes (shared across rows), the 12-term fold per (rule, row),
// train-mode confidences, soft selection, and 1 - sum of row cosines.
inline grad::NodeId build_attribute_loss(grad::Tape& tape, RuleSet& rs,
                                         const detail::SpecGrid& g,
                                         double temperature) {
  const vsa::Dims dims = g.dims;
  std::array<grad::NodeId, 9> panels{};
  for (int i = 0; i < 9; ++i)
    panels[static_cast<std::size_t>(i)] = tape.leaf_spectrum(
        {g.panel[static_cast<std::size_t>(i)], static_cast<std::size_t>(g.plen)}, dims);
  grad::NodeId identity =
      tape.leaf_spectrum({g.identity, static_cast<std::size_t>(g.plen)}, dims);

  auto basis_nodes = [&](int row) {
    auto refs = context_panels(row);
    std::vector<grad::NodeId> b;
    for (int i = 0; i < 7; ++i)
      b.push_back(panels[static_cast<std::size_t>(
          3 * refs[static_cast<std::size_t>(i)].row + refs[static_cast<std::size_t>(i)].col)]);
    b.push_back(identity);
    return b;
  };
  std::array<std::vector<grad::NodeId>, 3> basis = {basis_nodes(1), basis_nodes(2),
                                                    basis_nodes(3)};

  std::vector<grad::NodeId> scores;
  std::vector<std::array<grad::NodeId, 3>> preds(static_cast<std::size_t>(rs.R));
  for (int r = 0; r < rs.R; ++r) {
    std::vector<grad::NodeId> term_w;
    for (int t = 0; t < rs.T; ++t) {
      grad::NodeId slice = tape.leaf_param(rs.logits[static_cast<std::size_t>(r)],
                                           t * rs.K, rs.K);
      term_w.push_back(tape.record_softmax(slice));
    }
    std::vector<grad::NodeId> cosines;
    for (int row = 1; row <= 3; ++row) {
      std::vector<grad::NodeId> terms;
      for (int t = 0; t < rs.T; ++t)
        terms.push_back(tape.record_weighted_sum(
            term_w[static_cast<std::size_t>(t)], basis[static_cast<std::size_t>(row - 1)]));
      grad::NodeId plus = terms[0];
      for (int t = 1; t < rs.T / 2; ++t)
        plus = tape.record_bind(plus, terms[static_cast<std::size_t>(t)]);
      grad::NodeId minus = terms[static_cast<std::size_t>(rs.T / 2)];
      for (int t = rs.T / 2 + 1; t < rs.T; ++t)
        minus = tape.record_bind(minus, terms[static_cast<std::size_t>(t)]);
      grad::NodeId pred = tape.record_unbind(plus, minus);
      preds[static_cast<std::size_t>(r)][static_cast<std::size_t>(row - 1)] = pred;
      cosines.push_back(tape.record_cosine(
          panels[static_cast<std::size_t>(3 * (row - 1) + 2)], pred));
    }
    std::vector<double> ones(cosines.size(), 1.0 / temperature);
    scores.push_back(tape.record_affine(0.0, cosines, ones));
  }
  grad::NodeId stacked = tape.record_stack(scores);
  grad::NodeId sel = tape.record_softmax(stacked);

  std::vector<grad::NodeId> row_cos;
  for (int row = 0; row < 3; ++row) {
    std::vector<grad::NodeId> row_preds;
    for (int r = 0; r < rs.R; ++r)
      row_preds.push_back(preds[static_cast<std::size_t>(r)][static_cast<std::size_t>(row)]);
    grad::NodeId mixed = tape.record_weighted_sum(sel, row_preds);
    row_cos.push_back(
        tape.record_cosine(panels[static_cast<std::size_t>(3 * row + 2)], mixed));
  }
  std::vector<double> neg(row_cos.size(), -1.0);
  return tape.record_affine(1.0, row_cos, neg);
}

// Summed (or averaged) loss over every attribute of every component.
// When a tape is supplied the graph is recorded and backward() is run per
// attribute, accumulating gradients into the rule set's parameter blocks.
inline double puzzle_loss(const rpm::Puzzle& puzzle, RuleSet& rs,
                          const Encoder& enc, double temperature,
                          bool mean_over_attrs = false,
                          grad::Tape* tape = nullptr) {
  auto attrs = detail::puzzle_attrs(puzzle);
  double total = 0.0;
  double scale = mean_over_attrs ? 1.0 / static_cast<double>(attrs.size()) : 1.0;
  for (const auto& [ci, attr] : attrs) {
    detail::SpecGrid g = detail::spec_grid(enc, puzzle.components[ci], attr);
    if (tape) {
      tape->reset();
      grad::NodeId loss = build_attribute_loss(*tape, rs, g, temperature);
      grad::NodeId scaled = loss;
      if (scale != 1.0) {
        std::array<grad::NodeId, 1> ls = {loss};
        std::array<double, 1> cs = {scale};
        scaled = tape->record_affine(0.0, ls, cs);
      }
      tape->backward(scaled);
      total += tape->scalar_value(scaled);
    } else {
      std::vector<double> scratch, pred;
      std::vector<double> scores(static_cast<std::size_t>(rs.R), 0.0);
      std::vector<std::array<std::vector<double>, 3>> preds(
          static_cast<std::size_t>(rs.R));
      for (int r = 0; r < rs.R; ++r) {
        std::vector<double> w = term_weights(rs.rule_logits(r), rs.T, rs.K);
        for (int row = 1; row <= 3; ++row) {
          auto basis = detail::basis_spectra(g, row);
          detail::execute_spectral(w, rs.T, basis, g.plen, scratch, pred);
          scores[static_cast<std::size_t>(r)] += detail::spec_cosine(
              pred.data(), g.panel[static_cast<std::size_t>(3 * (row - 1) + 2)], g.dims);
          preds[static_cast<std::size_t>(r)][static_cast<std::size_t>(row - 1)] =
              pred;
        }
      }
      std::vector<double> sel = scores;
      for (double& s : sel) s /= temperature;
      softmax_inplace(sel.data(), rs.R);
      double attr_loss = 1.0;
      std::vector<double> mixed(static_cast<std::size_t>(g.plen));
      for (int row = 0; row < 3; ++row) {
        std::fill(mixed.begin(), mixed.end(), 0.0);
        for (int r = 0; r < rs.R; ++r)
          spectral::axpy(sel[static_cast<std::size_t>(r)],
                         preds[static_cast<std::size_t>(r)][static_cast<std::size_t>(row)].data(),
                         mixed.data(), g.plen);
        attr_loss -= detail::spec_cosine(
            mixed.data(), g.panel[static_cast<std::size_t>(3 * row + 2)], g.dims);
      }
      total += scale * attr_loss;
    }
  }
  return total;
}

// ---- inspection -----------------------------------------------------------------

// Per rule: the compiled symbolic expression (raw, and with symbols common
// to both sides cancelled when training padded the template with
// self-cancelling terms) plus per-term argmax symbol, weight, and
// assignment entropy.
inline std::string inspect_rules(const RuleSet& rs) {
  std::ostringstream out;
  for (int r = 0; r < rs.R; ++r) {
    std::vector<double> w(rs.rule_logits(r).begin(), rs.rule_logits(r).end());
    for (int t = 0; t < rs.T; ++t) softmax_inplace(w.data() + t * rs.K, rs.K);
    auto side_counts = [&](int begin, int end) {
      std::array<int, kBasis> counts{};
      for (int t = begin; t < end; ++t) {
        int arg = 0;
        for (int i = 1; i < rs.K; ++i)
          if (w[static_cast<std::size_t>(t * rs.K + i)] >
              w[static_cast<std::size_t>(t * rs.K + arg)])
            arg = i;
        if (arg != E) ++counts[static_cast<std::size_t>(arg)];
      }
      return counts;
    };
    auto render = [&](const std::array<int, kBasis>& counts) {
      std::string s;
      for (int i = 0; i < kBasis; ++i)
        for (int c = 0; c < counts[static_cast<std::size_t>(i)]; ++c) {
          if (!s.empty()) s += " ⊛ ";  // circled asterisk
          s += basis_names()[static_cast<std::size_t>(i)];
        }
      return s.empty() ? std::string("e") : s;
    };
    auto expr = [&](std::array<int, kBasis> plus, std::array<int, kBasis> minus) {
      std::string s = "(" + render(plus) + ")";
      if (render(minus) != "e") s += " ⊘ (" + render(minus) + ")";
      return s;
    };
    std::array<int, kBasis> plus = side_counts(0, rs.T / 2);
    std::array<int, kBasis> minus = side_counts(rs.T / 2, rs.T);
    std::array<int, kBasis> net_plus = plus, net_minus = minus;
    for (int i = 0; i < kBasis; ++i) {
      int common = std::min(net_plus[static_cast<std::size_t>(i)],
                            net_minus[static_cast<std::size_t>(i)]);
      net_plus[static_cast<std::size_t>(i)] -= common;
      net_minus[static_cast<std::size_t>(i)] -= common;
    }
    out << "rule " << r << (rs.frozen[static_cast<std::size_t>(r)] ? " [frozen]" : "")
        << ": " << expr(plus, minus);
    if (net_plus != plus) out << "  ~ " << expr(net_plus, net_minus);
    out << "\n";
    for (int t = 0; t < rs.T; ++t) {
      int arg = 0;
      double entropy = 0.0;
      for (int i = 0; i < rs.K; ++i) {
        double wi = w[static_cast<std::size_t>(t * rs.K + i)];
        if (wi > w[static_cast<std::size_t>(t * rs.K + arg)]) arg = i;
        if (wi > 0.0) entropy -= wi * std::log(wi);
      }
      out << "  term " << (t + 1) << ": " << basis_names()[static_cast<std::size_t>(arg)]
          << " w=" << w[static_cast<std::size_t>(t * rs.K + arg)] << " H=" << entropy
          << "\n";
    }
  }
  return out.str();
}

// ---- checkpoints ----------------------------------------------------------------

inline void save_checkpoint(const RuleSet& rs, const std::string& path) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["R"] = rs.R;
  j["T"] = rs.T;
  j["K"] = rs.K;
  j["basis"] = basis_names();
  nlohmann::ordered_json logits = nlohmann::ordered_json::array();
  for (int r = 0; r < rs.R; ++r) {
    nlohmann::ordered_json rule = nlohmann::ordered_json::array();
    for (int t = 0; t < rs.T; ++t) {
      nlohmann::ordered_json term = nlohmann::ordered_json::array();
      for (int i = 0; i < rs.K; ++i)
        term.push_back(rs.logits[static_cast<std::size_t>(r)]
                           .values[static_cast<std::size_t>(t * rs.K + i)]);
      rule.push_back(term);
    }
    logits.push_back(rule);
  }
  j["logits"] = logits;
  nlohmann::ordered_json frozen = nlohmann::ordered_json::array();
  for (char f : rs.frozen) frozen.push_back(static_cast<bool>(f));
  j["frozen"] = frozen;
  nlohmann::ordered_json seeds;
  for (const auto& [k, v] : rs.codebook_seeds) seeds[k] = v;
  j["codebook_seeds"] = seeds;
  j["dims"] = {{"D", rs.dims.D}, {"B", rs.dims.B}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
}

inline RuleSet load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint '" + path + "'");
  nlohmann::ordered_json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw LoadError("checkpoint parse failure: " + std::string(e.what()));
  }
  auto require = [&](const char* field) -> const nlohmann::ordered_json& {
    if (!j.contains(field))
      throw LoadError("checkpoint missing field '" + std::string(field) + "'");
    return j.at(field);
  };
  if (require("version").get<int>() != 1)
    throw LoadError("checkpoint field 'version': unsupported value");
  RuleSet rs;
  rs.R = require("R").get<int>();
  rs.T = require("T").get<int>();
  rs.K = require("K").get<int>();
  if (rs.K != kBasis) throw LoadError("checkpoint field 'K': expected 8");
  const auto& basis = require("basis");
  if (basis.size() != static_cast<std::size_t>(rs.K))
    throw LoadError("checkpoint field 'basis': wrong length");
  const auto& logits = require("logits");
  if (logits.size() != static_cast<std::size_t>(rs.R))
    throw LoadError("checkpoint field 'logits': expected R=" + std::to_string(rs.R) +
                    " rules");
  for (int r = 0; r < rs.R; ++r) {
    const auto& rule = logits.at(static_cast<std::size_t>(r));
    if (rule.size() != static_cast<std::size_t>(rs.T))
      throw LoadError("checkpoint field 'logits': rule " + std::to_string(r) +
                      " has " + std::to_string(rule.size()) + " terms, expected T=" +
                      std::to_string(rs.T));
    grad::ParamBlock pb("rule" + std::to_string(r),
                        static_cast<std::size_t>(rs.T * rs.K));
    for (int t = 0; t < rs.T; ++t) {
      const auto& term = rule.at(static_cast<std::size_t>(t));
      if (term.size() != static_cast<std::size_t>(rs.K))
        throw LoadError("checkpoint field 'logits': term width mismatch");
      for (int i = 0; i < rs.K; ++i)
        pb.values[static_cast<std::size_t>(t * rs.K + i)] =
            term.at(static_cast<std::size_t>(i)).get<double>();
    }
    rs.logits.push_back(std::move(pb));
  }
  const auto& frozen = require("frozen");
  if (frozen.size() != static_cast<std::size_t>(rs.R))
    throw LoadError("checkpoint field 'frozen': wrong length");
  for (const auto& f : frozen) rs.frozen.push_back(f.get<bool>() ? 1 : 0);
  for (const auto& [k, v] : require("codebook_seeds").items())
    rs.codebook_seeds[k] = v.get<std::uint64_t>();
  if (j.contains("dims")) {
    rs.dims.D = j["dims"].at("D").get<int>();
    rs.dims.B = j["dims"].at("B").get<int>();
  }
  return rs;
}

}  // namespace arlc::model
