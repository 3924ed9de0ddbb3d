// Reverse-mode differentiation over exactly the operation set the reasoner
// uses: weighted sums of block vectors, bind/unbind chains, cosine, softmax
// and scalar affine arithmetic. Vector-valued nodes are carried as packed
// half-spectra; binding is a pointwise complex product there and every
// adjoint rule stays closed in that representation, so the tape never
// transforms back to the time domain during training.
#pragma once

#include <cstring>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "arlc/common.hpp"
#include "arlc/fft.hpp"
#include "arlc/vsa.hpp"

namespace arlc::grad {

// A learnable flat array plus its gradient accumulator. Gradients are
// accumulated in double precision and zeroed at optimizer-step start.
struct ParamBlock {
  std::string name;
  std::vector<double> values;
  std::vector<double> grad;

  ParamBlock() = default;
  ParamBlock(std::string n, std::size_t size)
      : name(std::move(n)), values(size, 0.0), grad(size, 0.0) {}

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

struct NodeId {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

class Tape {
  enum class Op : std::uint8_t {
    LeafSpec,     // constant spectral vector
    LeafParam,    // slice of a ParamBlock (real vector)
    Softmax,      // real vector -> real vector
    WeightedSum,  // real-vector weights x spectral inputs -> spectral
    Bind,         // spectral x spectral -> spectral (complex product)
    Unbind,       // spectral x spectral -> spectral (product with conj)
    Cosine,       // spectral x spectral -> scalar
    Stack,        // scalars -> real vector
    Affine,       // c0 + sum c_i * scalar_i -> scalar
  };

  struct Node {
    Op op;
    int off = 0;       // into values_/adjoints_
    int len = 0;       // doubles
    int in_off = 0;    // into inputs_
    int in_count = 0;
    int aux_off = 0;   // into aux_
    int aux_count = 0;
    ParamBlock* param = nullptr;
    int param_off = 0;
    vsa::Dims dims{0, 0};  // nonzero on spectral nodes only
  };

 public:
  void reset() {
    nodes_.clear();
    values_.clear();
    adjoints_.clear();
    inputs_.clear();
    aux_.clear();
  }

  bool empty() const { return nodes_.empty(); }
  std::size_t size() const { return nodes_.size(); }

  // ---- leaves ----

  NodeId leaf(const vsa::BlockVector& v) {
    if (!spectral::is_pow2(v.dims.L()))
      throw ConfigError("tape: block length must be a power of two");
    NodeId id = alloc(Op::LeafSpec, spectral::packed_len(v.dims.D, v.dims.B));
    node(id).dims = v.dims;
    spectral::rfft_packed(v.data.data(), v.dims.D, v.dims.B, val(id));
    return id;
  }

  NodeId leaf_spectrum(std::span<const double> spec, vsa::Dims dims) {
    NodeId id = alloc(Op::LeafSpec, static_cast<int>(spec.size()));
    node(id).dims = dims;
    std::memcpy(val(id), spec.data(), spec.size() * sizeof(double));
    return id;
  }

  // Copies a slice of a ParamBlock onto the tape; backward adds the slice
  // adjoint into pb.grad at the same offset.
  NodeId leaf_param(ParamBlock& pb, int offset, int len) {
    if (offset < 0 || offset + len > static_cast<int>(pb.values.size()))
      throw ShapeError("leaf_param: slice [" + std::to_string(offset) + ", " +
                       std::to_string(offset + len) + ") outside '" + pb.name +
                       "' of size " + std::to_string(pb.values.size()));
    NodeId id = alloc(Op::LeafParam, len);
    node(id).param = &pb;
    node(id).param_off = offset;
    std::memcpy(val(id), pb.values.data() + offset,
                static_cast<std::size_t>(len) * sizeof(double));
    return id;
  }

  // ---- recorded operations ----

  NodeId record_softmax(NodeId logits) {
    require_real(node(logits), "softmax");
    const int len = node(logits).len;  // copy before alloc invalidates refs
    NodeId id = alloc(Op::Softmax, len, {logits});
    const double* in = val(logits);
    double* out = val(id);
    double m = in[0];
    for (int i = 1; i < len; ++i) m = std::max(m, in[i]);
    double z = 0.0;
    for (int i = 0; i < len; ++i) z += (out[i] = std::exp(in[i] - m));
    for (int i = 0; i < len; ++i) out[i] /= z;
    return id;
  }

  // weights: real vector of length k; inputs: k spectral nodes.
  NodeId record_weighted_sum(NodeId weights, std::span<const NodeId> inputs) {
    const Node& w = node(weights);
    require_real(w, "weighted_sum");
    if (w.len != static_cast<int>(inputs.size()))
      throw ShapeError("weighted_sum: " + std::to_string(w.len) +
                       " weights vs " + std::to_string(inputs.size()) +
                       " inputs");
    if (inputs.empty()) throw ShapeError("weighted_sum: no inputs");
    vsa::Dims dims = node(inputs[0]).dims;
    std::vector<NodeId> all;
    all.reserve(inputs.size() + 1);
    all.push_back(weights);
    for (NodeId in : inputs) {
      require_spec(node(in), dims, "weighted_sum");
      all.push_back(in);
    }
    const int len = node(inputs[0]).len;
    NodeId id = alloc(Op::WeightedSum, len, all);
    node(id).dims = dims;
    double* out = val(id);
    std::memset(out, 0, static_cast<std::size_t>(len) * sizeof(double));
    const double* wv = val(weights);
    for (std::size_t i = 0; i < inputs.size(); ++i)
      spectral::axpy(wv[i], val(inputs[i]), out, len);
    return id;
  }

  NodeId record_bind(NodeId a, NodeId b) { return binary_spec(Op::Bind, a, b); }
  NodeId record_unbind(NodeId a, NodeId b) { return binary_spec(Op::Unbind, a, b); }

  NodeId record_cosine(NodeId a, NodeId b) {
    require_spec(node(a), node(b).dims, "cosine");
    const vsa::Dims d = node(a).dims;  // copy before alloc invalidates refs
    NodeId id = alloc(Op::Cosine, 1, {a, b});
    double daa = spectral::pdot(val(a), val(a), d.D, d.B);
    double dbb = spectral::pdot(val(b), val(b), d.D, d.B);
    double dab = spectral::pdot(val(a), val(b), d.D, d.B);
    if (daa <= 0.0 || dbb <= 0.0)
      throw DegenerateInputError("cosine: zero vector operand");
    double c = dab / std::sqrt(daa * dbb);
    *val(id) = c;
    push_aux(id, {daa, dbb, c});
    return id;
  }

  NodeId record_stack(std::span<const NodeId> scalars) {
    for (NodeId s : scalars) require_scalar(node(s), "stack");
    NodeId id = alloc(Op::Stack, static_cast<int>(scalars.size()),
                      std::vector<NodeId>(scalars.begin(), scalars.end()));
    for (std::size_t i = 0; i < scalars.size(); ++i) val(id)[i] = *val(scalars[i]);
    return id;
  }

  // out = c0 + sum coeffs[i] * scalars[i].
  NodeId record_affine(double c0, std::span<const NodeId> scalars,
                       std::span<const double> coeffs) {
    if (scalars.size() != coeffs.size())
      throw ShapeError("affine: coefficient count mismatch");
    for (NodeId s : scalars) require_scalar(node(s), "affine");
    NodeId id = alloc(Op::Affine, 1,
                      std::vector<NodeId>(scalars.begin(), scalars.end()));
    double acc = c0;
    for (std::size_t i = 0; i < scalars.size(); ++i)
      acc += coeffs[i] * *val(scalars[i]);
    *val(id) = acc;
    std::vector<double> aux;
    aux.push_back(c0);
    aux.insert(aux.end(), coeffs.begin(), coeffs.end());
    push_aux(id, aux);
    return id;
  }

  // ---- readback ----

  double scalar_value(NodeId id) const {
    require_scalar(node(id), "scalar_value");
    return *val(id);
  }

  std::span<const double> vector_value(NodeId id) const {
    return {val(id), static_cast<std::size_t>(node(id).len)};
  }

  vsa::BlockVector block_value(NodeId id) const {
    const Node& n = node(id);
    if (n.dims.D == 0) throw ShapeError("block_value: node is not spectral");
    vsa::BlockVector out(n.dims);
    spectral::irfft_packed(val(id), n.dims.D, n.dims.B, out.data.data());
    return out;
  }

  // ---- backward ----

  // Seeds d(loss)/d(loss) = 1 and walks the tape in reverse topological
  // order (construction order is topological by design). Repeated calls
  // keep accumulating into ParamBlock gradients; internal adjoints reset
  // on every call.
  void backward(NodeId loss) {
    if (nodes_.empty()) return;
    require_scalar_contract(node(loss));
    adjoints_.assign(values_.size(), 0.0);
    *adj(loss) = 1.0;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i)
      backward_node(NodeId{i});
  }

 private:
  NodeId alloc(Op op, int len, std::vector<NodeId> ins = {}) {
    Node n;
    n.op = op;
    n.len = len;
    n.off = static_cast<int>(values_.size());
    n.in_off = static_cast<int>(inputs_.size());
    n.in_count = static_cast<int>(ins.size());
    values_.resize(values_.size() + static_cast<std::size_t>(len), 0.0);
    for (NodeId in : ins) {
      if (!in.valid() || in.idx >= static_cast<int>(nodes_.size()))
        throw ContractError("tape: input node not on tape");
      inputs_.push_back(in.idx);
    }
    nodes_.push_back(n);
    return NodeId{static_cast<int>(nodes_.size()) - 1};
  }

  NodeId binary_spec(Op op, NodeId a, NodeId b) {
    require_spec(node(a), node(b).dims, op == Op::Bind ? "bind" : "unbind");
    const int len = node(a).len;  // copy before alloc invalidates refs
    const vsa::Dims dims = node(a).dims;
    NodeId id = alloc(op, len, {a, b});
    node(id).dims = dims;
    int nc = len / 2;
    if (op == Op::Bind)
      spectral::cmul(val(a), val(b), val(id), nc);
    else
      spectral::cmul_conj(val(a), val(b), val(id), nc);
    return id;
  }

  void push_aux(NodeId id, std::span<const double> aux) {
    node(id).aux_off = static_cast<int>(aux_.size());
    node(id).aux_count = static_cast<int>(aux.size());
    aux_.insert(aux_.end(), aux.begin(), aux.end());
  }
  void push_aux(NodeId id, std::initializer_list<double> aux) {
    push_aux(id, std::span<const double>(aux.begin(), aux.size()));
  }

  Node& node(NodeId id) { return nodes_[static_cast<std::size_t>(id.idx)]; }
  const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id.idx)]; }
  double* val(NodeId id) { return values_.data() + node(id).off; }
  const double* val(NodeId id) const { return values_.data() + node(id).off; }
  double* adj(NodeId id) { return adjoints_.data() + node(id).off; }

  int input(const Node& n, int i) const { return inputs_[static_cast<std::size_t>(n.in_off + i)]; }
  const double* aux(const Node& n) const { return aux_.data() + n.aux_off; }

  static void require_real(const Node& n, const char* op) {
    if (n.dims.D != 0 || n.len < 1)
      throw ShapeError(std::string(op) + ": expected a real vector node");
  }
  static void require_scalar(const Node& n, const char* op) {
    if (n.len != 1 || n.dims.D != 0)
      throw ShapeError(std::string(op) + ": expected a scalar node");
  }
  static void require_scalar_contract(const Node& n) {
    if (n.len != 1 || n.dims.D != 0)
      throw ContractError("backward: loss node is not scalar");
  }
  static void require_spec(const Node& n, vsa::Dims dims, const char* op) {
    if (n.dims.D == 0)
      throw ShapeError(std::string(op) + ": expected a spectral vector node");
    if (!(n.dims == dims))
      throw ShapeError(std::string(op) + ": operand dimensions differ");
  }

  void backward_node(NodeId id) {
    Node& n = node(id);
    const double* g = adj(id);
    switch (n.op) {
      case Op::LeafSpec:
        break;
      case Op::LeafParam:
        if (n.param)
          for (int i = 0; i < n.len; ++i) n.param->grad[static_cast<std::size_t>(n.param_off + i)] += g[i];
        break;
      case Op::Softmax: {
        const double* y = val(id);
        double dot = 0.0;
        for (int i = 0; i < n.len; ++i) dot += g[i] * y[i];
        double* gx = adj(NodeId{input(n, 0)});
        for (int i = 0; i < n.len; ++i) gx[i] += y[i] * (g[i] - dot);
        break;
      }
      case Op::WeightedSum: {
        NodeId wid{input(n, 0)};
        const double* w = val(wid);
        double* gw = adj(wid);
        const vsa::Dims d = n.dims;
        for (int i = 1; i < n.in_count; ++i) {
          NodeId vid{input(n, i)};
          // d/dw_i = <g, v_i> in the time domain, via Parseval.
          gw[i - 1] += spectral::pdot(g, val(vid), d.D, d.B);
          spectral::axpy(w[i - 1], g, adj(vid), n.len);
        }
        break;
      }
      case Op::Bind: {
        // c = a (*) b  =>  dL/da = g (x) b, dL/db = g (x) a  (correlation).
        NodeId a{input(n, 0)}, b{input(n, 1)};
        int nc = n.len / 2;
        scratch_.resize(static_cast<std::size_t>(n.len));
        spectral::cmul_conj(g, val(b), scratch_.data(), nc);
        spectral::axpy(1.0, scratch_.data(), adj(a), n.len);
        spectral::cmul_conj(g, val(a), scratch_.data(), nc);
        spectral::axpy(1.0, scratch_.data(), adj(b), n.len);
        break;
      }
      case Op::Unbind: {
        // c = a (x) b  =>  dL/da = g (*) b, dL/db = a (x) g.
        NodeId a{input(n, 0)}, b{input(n, 1)};
        int nc = n.len / 2;
        scratch_.resize(static_cast<std::size_t>(n.len));
        spectral::cmul(g, val(b), scratch_.data(), nc);
        spectral::axpy(1.0, scratch_.data(), adj(a), n.len);
        spectral::cmul_conj(val(a), g, scratch_.data(), nc);
        spectral::axpy(1.0, scratch_.data(), adj(b), n.len);
        break;
      }
      case Op::Cosine: {
        // d cos/da = b/(|a||b|) - cos * a/|a|^2, symmetrically for b.
        NodeId a{input(n, 0)}, b{input(n, 1)};
        double daa = aux(n)[0], dbb = aux(n)[1], c = aux(n)[2];
        double gs = g[0];
        double inv = 1.0 / std::sqrt(daa * dbb);
        int len = node(a).len;
        spectral::axpy(gs * inv, val(b), adj(a), len);
        spectral::axpy(-gs * c / daa, val(a), adj(a), len);
        spectral::axpy(gs * inv, val(a), adj(b), len);
        spectral::axpy(-gs * c / dbb, val(b), adj(b), len);
        break;
      }
      case Op::Stack:
        for (int i = 0; i < n.in_count; ++i) *adj(NodeId{input(n, i)}) += g[i];
        break;
      case Op::Affine: {
        const double* coeffs = aux(n) + 1;
        for (int i = 0; i < n.in_count; ++i)
          *adj(NodeId{input(n, i)}) += coeffs[i] * g[0];
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<double> values_;
  std::vector<double> adjoints_;
  std::vector<int> inputs_;
  std::vector<double> aux_;
  std::vector<double> scratch_;
};

// ---- finite differences -------------------------------------------------

// f(true) must return the objective and accumulate analytic gradients into
// the given ParamBlocks; f(false) must return the objective only. Returns
// max over coordinates of |analytic - central| / max(1, |central|).
inline double finite_diff_check(const std::function<double(bool)>& f,
                                std::span<ParamBlock* const> params,
                                double eps = 1e-5) {
  if (eps < 1e-7 || eps > 1e-3)
    throw ValidationError("finite_diff_check: eps outside [1e-7, 1e-3]");
  for (ParamBlock* p : params) p->zero_grad();
  double base = f(true);
  if (!std::isfinite(base))
    throw NumericError("finite_diff_check: non-finite objective value");
  std::vector<std::vector<double>> analytic;
  for (ParamBlock* p : params) analytic.push_back(p->grad);

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    ParamBlock& p = *params[pi];
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      double saved = p.values[i];
      p.values[i] = saved + eps;
      double hi = f(false);
      p.values[i] = saved - eps;
      double lo = f(false);
      p.values[i] = saved;
      double numeric = (hi - lo) / (2.0 * eps);
      double a = analytic[pi][i];
      if (!std::isfinite(numeric) || !std::isfinite(a))
        throw NumericError("finite_diff_check: non-finite derivative at '" +
                           p.name + "'[" + std::to_string(i) + "]");
      double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace arlc::grad
