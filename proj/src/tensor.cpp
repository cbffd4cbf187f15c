#include "ragcap/tensor.hpp"

#include <memory>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <sstream>

namespace ragcap {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t) { return ConstMap(t.data(), t.rows(), t.cols()); }
MutMap as_matrix(Tensor& t) { return MutMap(t.data(), t.rows(), t.cols()); }

constexpr double kMaskedLogit = -1e9;

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + ": expected a matrix, got shape " + to_string(t.shape()));
  }
}

struct AttentionForward {
  Tensor output;
  std::vector<Tensor> weights;  // one Tq x Tk matrix per head
};

AttentionForward attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                                   const AttentionMask* mask) {
  require_rank2(q, "attention queries");
  require_rank2(k, "attention keys");
  require_rank2(v, "attention values");
  const std::size_t tq = q.rows();
  const std::size_t tk = k.rows();
  const std::size_t d = q.cols();
  if (d == 0 || heads == 0) throw ShapeError("attention: width and head count must be positive");
  if (k.cols() != d) throw ShapeError("attention: query/key width mismatch");
  if (v.rows() != tk) throw ShapeError("attention: key/value length mismatch");
  if (d % heads != 0 || v.cols() % heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (tk == 0) throw ShapeError("attention: no keys");
  if (mask != nullptr) {
    if (mask->queries() != tq || mask->keys() != tk) throw ShapeError("attention: mask shape mismatch");
    for (std::size_t i = 0; i < tq; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < tk && !any; ++j) any = mask->allowed(i, j);
      if (!any) throw std::invalid_argument("attention: fully masked query row " + std::to_string(i));
    }
  }

  const std::size_t dq = d / heads;
  const std::size_t dv = v.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dq));
  AttentionForward out;
  out.output = Tensor::matrix(tq, v.cols());
  out.weights.reserve(heads);
  auto qm = as_matrix(q);
  auto km = as_matrix(k);
  auto vm = as_matrix(v);
  auto om = as_matrix(out.output);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor p = Tensor::matrix(tq, tk);
    auto pm = as_matrix(p);
    pm.noalias() = qm.middleCols(h * dq, dq) * km.middleCols(h * dq, dq).transpose();
    pm *= inv_sqrt;
    for (std::size_t i = 0; i < tq; ++i) {
      double* row = p.data() + i * tk;
      if (mask != nullptr) {
        for (std::size_t j = 0; j < tk; ++j) {
          if (!mask->allowed(i, j)) row[j] += kMaskedLogit;
        }
      }
      const double mx = *std::max_element(row, row + tk);
      double total = 0.0;
      for (std::size_t j = 0; j < tk; ++j) {
        row[j] = std::exp(row[j] - mx);
        total += row[j];
      }
      for (std::size_t j = 0; j < tk; ++j) row[j] /= total;
      if (mask != nullptr) {
        for (std::size_t j = 0; j < tk; ++j) {
          if (!mask->allowed(i, j)) row[j] = 0.0;
        }
      }
    }
    om.middleCols(h * dv, dv).noalias() = pm * vm.middleCols(h * dv, dv);
    out.weights.push_back(std::move(p));
  }
  return out;
}

struct LayerNormForward {
  Tensor output;
  Tensor normalized;
  std::vector<double> inv_std;
};

LayerNormForward layer_norm_forward(const Tensor& x, const Tensor& gain, const Tensor& bias, double epsilon) {
  require_rank2(x, "layer_norm input");
  const std::size_t t = x.rows();
  const std::size_t d = x.cols();
  if (d < 2) throw ShapeError("layer_norm: feature width must be at least 2");
  if (gain.size() != d || bias.size() != d) throw ShapeError("layer_norm: gain/bias width mismatch");
  LayerNormForward f;
  f.output = Tensor::matrix(t, d);
  f.normalized = Tensor::matrix(t, d);
  f.inv_std.resize(t);
  for (std::size_t r = 0; r < t; ++r) {
    auto in = x.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + epsilon);
    f.inv_std[r] = inv;
    auto xh = f.normalized.row(r);
    auto out = f.output.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      xh[c] = (in[c] - mean) * inv;
      out[c] = xh[c] * gain[c] + bias[c];
    }
  }
  return f;
}

// Row-wise log-softmax plus negative log-likelihood of the targets.
struct NllForward {
  Tensor log_probs;
  std::vector<double> nll;
};

NllForward nll_forward(const Tensor& logits, std::span<const int> targets, int ignore_index) {
  require_rank2(logits, "cross entropy logits");
  const std::size_t t = logits.rows();
  const std::size_t vocab = logits.cols();
  if (targets.size() != t) throw ShapeError("cross entropy: target count does not match logit rows");
  NllForward f;
  f.log_probs = Tensor::matrix(t, vocab);
  f.nll.assign(t, 0.0);
  for (std::size_t r = 0; r < t; ++r) {
    const auto lp = log_softmax(logits.row(r));
    std::copy(lp.begin(), lp.end(), f.log_probs.row(r).begin());
    const int y = targets[r];
    if (y == ignore_index) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= vocab) {
      throw std::out_of_range("cross entropy: target id " + std::to_string(y) + " outside vocabulary");
    }
    f.nll[r] = -lp[static_cast<std::size_t>(y)];
  }
  return f;
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  std::size_t n = 1;
  for (auto s : shape_) n *= s;
  values_.assign(n, fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
  std::size_t n = 1;
  for (auto s : shape_) n *= s;
  if (n != values_.size()) {
    throw ShapeError("tensor: shape " + to_string(shape_) + " does not match " + std::to_string(values_.size()) +
                     " values");
  }
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() == 2) return shape_[0];
  throw ShapeError("tensor: matrix view of rank-" + std::to_string(shape_.size()) + " tensor");
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() == 2) return shape_[1];
  throw ShapeError("tensor: matrix view of rank-" + std::to_string(shape_.size()) + " tensor");
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

bool operator==(const Tensor& a, const Tensor& b) {
  if (a.shape_ != b.shape_) return false;
  return std::equal(a.values_.begin(), a.values_.end(), b.values_.begin(),
                    [](double x, double y) { return std::memcmp(&x, &y, sizeof(double)) == 0; });
}

// ---------------------------------------------------------------------------
// ParameterSet

std::string to_string(ParamGroup group) { return group == ParamGroup::encoder ? "encoder" : "decoder"; }

Parameter& ParameterSet::add(const std::string& name, Tensor init, ParamGroup group) {
  if (params_.count(name)) throw std::invalid_argument("parameter already registered: " + name);
  Parameter p;
  p.grad = Tensor(init.shape(), 0.0);
  p.value = std::move(init);
  p.group = group;
  return params_.emplace(name, std::move(p)).first->second;
}

Parameter& ParameterSet::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const Parameter& ParameterSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

void ParameterSet::set_trainable(ParamGroup group, bool trainable) {
  (group == ParamGroup::encoder ? encoder_trainable_ : decoder_trainable_) = trainable;
}

bool ParameterSet::trainable(ParamGroup group) const {
  return group == ParamGroup::encoder ? encoder_trainable_ : decoder_trainable_;
}

void ParameterSet::zero_grad() {
  for (auto& [_, p] : params_) {
    if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape(), 0.0);
    p.grad.fill(0.0);
  }
}

// ---------------------------------------------------------------------------
// AttentionMask

AttentionMask::AttentionMask(std::size_t queries, std::size_t keys, bool allowed)
    : queries_(queries), keys_(keys), bits_(queries * keys, allowed ? 1 : 0) {}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m(n, n, false);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
  }
  return m;
}

AttentionMask AttentionMask::key_padding(std::size_t queries, const std::vector<bool>& padded) {
  AttentionMask m(queries, padded.size(), true);
  for (std::size_t i = 0; i < queries; ++i) {
    for (std::size_t j = 0; j < padded.size(); ++j) m.set(i, j, !padded[j]);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Plain kernels

AttentionResult scaled_dot_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                                     const AttentionMask* mask) {
  auto f = attention_forward(queries, keys, values, 1, mask);
  return {std::move(f.output), std::move(f.weights.front())};
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double epsilon) {
  return layer_norm_forward(x, gain, bias, epsilon).output;
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index) {
  auto f = nll_forward(logits, targets, ignore_index);
  long double total = 0.0L;
  std::size_t count = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] == ignore_index) continue;
    total += f.nll[r];
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross entropy: every position is ignored");
  return static_cast<double>(total / static_cast<long double>(count));
}

std::vector<double> log_softmax(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("log_softmax: empty row");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double v : logits) total += std::exp(v - mx);
  const double lse = mx + std::log(total);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

// ---------------------------------------------------------------------------
// Graph

const Tensor& Var::value() const { return graph->value(*this); }

Var Graph::constant(Tensor value) { return record(std::move(value), false, nullptr); }

Var Graph::param(Parameter& parameter, bool trainable) {
  Node n;
  n.parameter = &parameter;
  n.requires_grad = trainable;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

const Tensor& Graph::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.parameter != nullptr ? n.parameter->value : n.value;
}

Tensor& Graph::grad(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty() && !value(v).empty()) n.grad = Tensor(value(v).shape(), 0.0);
  return n.grad;
}

Var Graph::record(Tensor value, bool requires_grad, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

void Graph::backward(Var output) {
  if (value(output).size() != 1) throw ShapeError("backward: output must hold a single value");
  if (!nodes_[output.id].requires_grad) return;
  grad(output).fill(1.0);
  for (std::size_t i = output.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this);
    ++backward_steps_run_;
  }
  for (auto& n : nodes_) {
    if (n.parameter == nullptr || !n.requires_grad || n.grad.empty()) continue;
    Tensor& dst = n.parameter->grad;
    if (dst.shape() != n.parameter->value.shape()) dst = Tensor(n.parameter->value.shape(), 0.0);
    add_into(dst, n.grad);
  }
}

// ---------------------------------------------------------------------------
// ops

namespace ops {

namespace {

bool any_requires(std::initializer_list<Var> vars) {
  for (const auto& v : vars) {
    if (v.graph->requires_grad(v)) return true;
  }
  return false;
}

Graph& graph_of(Var a, Var b) {
  if (a.graph != b.graph) throw std::invalid_argument("ops: operands belong to different graphs");
  return *a.graph;
}

}  // namespace

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  require_rank2(av, "matmul lhs");
  require_rank2(bv, "matmul rhs");
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: " + to_string(av.shape()) + " x " + to_string(bv.shape()));
  }
  Tensor out = Tensor::matrix(av.rows(), bv.cols());
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  const std::size_t oid = g.size();
  return g.record(std::move(out), any_requires({a, b}), [a, b, oid](Graph& gr) {
    const Tensor& dout = gr.grad(Var{&gr, oid});
    if (gr.requires_grad(a)) as_matrix(gr.grad(a)).noalias() += as_matrix(dout) * as_matrix(gr.value(b)).transpose();
    if (gr.requires_grad(b)) as_matrix(gr.grad(b)).noalias() += as_matrix(gr.value(a)).transpose() * as_matrix(dout);
  });
}

Var linear(Var x, Var weight, std::optional<Var> bias) {
  Graph& g = graph_of(x, weight);
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(weight);
  require_rank2(xv, "linear input");
  require_rank2(wv, "linear weight");
  if (xv.cols() != wv.rows()) {
    throw ShapeError("linear: input " + to_string(xv.shape()) + " vs weight " + to_string(wv.shape()));
  }
  Tensor out = Tensor::matrix(xv.rows(), wv.cols());
  as_matrix(out).noalias() = as_matrix(xv) * as_matrix(wv);
  bool req = any_requires({x, weight});
  if (bias) {
    const Tensor& bv = g.value(*bias);
    if (bv.size() != wv.cols()) throw ShapeError("linear: bias width mismatch");
    for (std::size_t r = 0; r < out.rows(); ++r) {
      auto row = out.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
    }
    req = req || g.requires_grad(*bias);
  }
  const std::size_t oid = g.size();
  return g.record(std::move(out), req, [x, weight, bias, oid](Graph& gr) {
    const Tensor& dout = gr.grad(Var{&gr, oid});
    auto dm = as_matrix(dout);
    if (gr.requires_grad(x)) as_matrix(gr.grad(x)).noalias() += dm * as_matrix(gr.value(weight)).transpose();
    if (gr.requires_grad(weight)) as_matrix(gr.grad(weight)).noalias() += as_matrix(gr.value(x)).transpose() * dm;
    if (bias && gr.requires_grad(*bias)) {
      Tensor& db = gr.grad(*bias);
      for (std::size_t r = 0; r < dout.rows(); ++r) {
        auto row = dout.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) db[c] += row[c];
      }
    }
  });
}

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (av.shape() != bv.shape()) throw ShapeError("add: " + to_string(av.shape()) + " vs " + to_string(bv.shape()));
  Tensor out = av;
  add_into(out, bv);
  const std::size_t oid = g.size();
  return g.record(std::move(out), any_requires({a, b}), [a, b, oid](Graph& gr) {
    const Tensor& dout = gr.grad(Var{&gr, oid});
    if (gr.requires_grad(a)) add_into(gr.grad(a), dout);
    if (gr.requires_grad(b)) add_into(gr.grad(b), dout);
  });
}

Var scale(Var a, double factor) {
  Graph& g = *a.graph;
  Tensor out = g.value(a);
  for (auto& v : out.values()) v *= factor;
  const std::size_t oid = g.size();
  return g.record(std::move(out), g.requires_grad(a), [a, factor, oid](Graph& gr) {
    const Tensor& dout = gr.grad(Var{&gr, oid});
    Tensor& da = gr.grad(a);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += factor * dout[i];
  });
}

Var gelu(Var a) {
  Graph& g = *a.graph;
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  const Tensor& av = g.value(a);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double x = av[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
  }
  const std::size_t oid = g.size();
  return g.record(std::move(out), g.requires_grad(a), [a, oid](Graph& gr) {
    const Tensor& dout = gr.grad(Var{&gr, oid});
    const Tensor& xv = gr.value(a);
    Tensor& da = gr.grad(a);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double x = xv[i];
      const double inner = c * (x + 0.044715 * x * x * x);
      const double th = std::tanh(inner);
      const double dinner = c * (1.0 + 3.0 * 0.044715 * x * x);
      const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner;
      da[i] += d * dout[i];
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double epsilon) {
  Graph& g = graph_of(x, gain);
  auto f = layer_norm_forward(g.value(x), g.value(gain), g.value(bias), epsilon);
  const bool req = any_requires({x, gain, bias});
  const std::size_t oid = g.size();
  auto saved = std::make_shared<LayerNormForward>();
  saved->normalized = std::move(f.normalized);
  saved->inv_std = std::move(f.inv_std);
  return g.record(std::move(f.output), req, [x, gain, bias, oid, saved](Graph& gr) {
    const Tensor& dout = gr.grad(Var{&gr, oid});
    const Tensor& xh = saved->normalized;
    const Tensor& gv = gr.value(gain);
    const std::size_t t = xh.rows();
    const std::size_t d = xh.cols();
    if (gr.requires_grad(gain)) {
      Tensor& dg = gr.grad(gain);
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t c = 0; c < d; ++c) dg[c] += dout(r, c) * xh(r, c);
    }
    if (gr.requires_grad(bias)) {
      Tensor& db = gr.grad(bias);
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t c = 0; c < d; ++c) db[c] += dout(r, c);
    }
    if (gr.requires_grad(x)) {
      Tensor& dx = gr.grad(x);
      std::vector<double> dxh(d);
      for (std::size_t r = 0; r < t; ++r) {
        double mean_dxh = 0.0;
        double mean_dxh_xh = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          dxh[c] = dout(r, c) * gv[c];
          mean_dxh += dxh[c];
          mean_dxh_xh += dxh[c] * xh(r, c);
        }
        mean_dxh /= static_cast<double>(d);
        mean_dxh_xh /= static_cast<double>(d);
        const double inv = saved->inv_std[r];
        for (std::size_t c = 0; c < d; ++c) {
          dx(r, c) += inv * (dxh[c] - mean_dxh - xh(r, c) * mean_dxh_xh);
        }
      }
    }
  });
}

Var attention(Var q, Var k, Var v, std::size_t heads, const AttentionMask* mask, std::vector<Tensor>* weights_out) {
  Graph& g = graph_of(q, k);
  auto f = attention_forward(g.value(q), g.value(k), g.value(v), heads, mask);
  if (weights_out != nullptr) *weights_out = f.weights;
  const bool req = any_requires({q, k, v});
  const std::size_t oid = g.size();
  auto probs = std::make_shared<std::vector<Tensor>>(std::move(f.weights));
  return g.record(std::move(f.output), req, [q, k, v, heads, oid, probs](Graph& gr) {
    const Tensor& dout = gr.grad(Var{&gr, oid});
    const Tensor& qv = gr.value(q);
    const Tensor& kv = gr.value(k);
    const Tensor& vv = gr.value(v);
    const std::size_t dq = qv.cols() / heads;
    const std::size_t dv = vv.cols() / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dq));
    const bool gq = gr.requires_grad(q);
    const bool gk = gr.requires_grad(k);
    const bool gv = gr.requires_grad(v);
    for (std::size_t h = 0; h < heads; ++h) {
      auto pm = as_matrix((*probs)[h]);
      auto doh = as_matrix(dout).middleCols(h * dv, dv);
      if (gv) as_matrix(gr.grad(v)).middleCols(h * dv, dv).noalias() += pm.transpose() * doh;
      if (!gq && !gk) continue;
      RowMat dp = doh * as_matrix(vv).middleCols(h * dv, dv).transpose();
      RowMat ds = pm.cwiseProduct(dp);
      Eigen::VectorXd rowdot = ds.rowwise().sum();
      ds -= pm.cwiseProduct(rowdot.replicate(1, pm.cols()));
      ds *= inv_sqrt;
      if (gq) as_matrix(gr.grad(q)).middleCols(h * dq, dq).noalias() += ds * as_matrix(kv).middleCols(h * dq, dq);
      if (gk) as_matrix(gr.grad(k)).middleCols(h * dq, dq).noalias() += ds.transpose() * as_matrix(qv).middleCols(h * dq, dq);
    }
  });
}

Var embedding(Var table, std::span<const int> ids) {
  Graph& g = *table.graph;
  const Tensor& tv = g.value(table);
  require_rank2(tv, "embedding table");
  const std::size_t d = tv.cols();
  Tensor out = Tensor::matrix(ids.size(), d);
  std::vector<int> idx(ids.begin(), ids.end());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= tv.rows()) {
      throw std::out_of_range("embedding: id " + std::to_string(idx[r]) + " outside table of " +
                              std::to_string(tv.rows()) + " rows");
    }
    auto src = tv.row(static_cast<std::size_t>(idx[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  const std::size_t oid = g.size();
  return g.record(std::move(out), g.requires_grad(table), [table, idx = std::move(idx), oid](Graph& gr) {
    const Tensor& dout = gr.grad(Var{&gr, oid});
    Tensor& dt = gr.grad(table);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto src = dout.row(r);
      auto dst = dt.row(static_cast<std::size_t>(idx[r]));
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

Var concat_rows(Var top, Var bottom) {
  Graph& g = graph_of(top, bottom);
  const Tensor& a = g.value(top);
  const Tensor& b = g.value(bottom);
  require_rank2(a, "concat_rows top");
  require_rank2(b, "concat_rows bottom");
  if (a.cols() != b.cols()) throw ShapeError("concat_rows: width mismatch");
  const std::size_t ra = a.rows();
  Tensor out = Tensor::matrix(ra + b.rows(), a.cols());
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(a.size()));
  const std::size_t oid = g.size();
  return g.record(std::move(out), any_requires({top, bottom}), [top, bottom, ra, oid](Graph& gr) {
    const Tensor& dout = gr.grad(Var{&gr, oid});
    const std::size_t cols = dout.cols();
    if (gr.requires_grad(top)) {
      Tensor& dt = gr.grad(top);
      for (std::size_t i = 0; i < dt.size(); ++i) dt[i] += dout[i];
    }
    if (gr.requires_grad(bottom)) {
      Tensor& db = gr.grad(bottom);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += dout[ra * cols + i];
    }
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  Graph& g = *x.graph;
  const Tensor& xv = g.value(x);
  require_rank2(xv, "slice_rows input");
  if (begin > end || end > xv.rows()) throw ShapeError("slice_rows: range out of bounds");
  const std::size_t cols = xv.cols();
  Tensor out = Tensor::matrix(end - begin, cols);
  std::copy(xv.values().begin() + static_cast<std::ptrdiff_t>(begin * cols),
            xv.values().begin() + static_cast<std::ptrdiff_t>(end * cols), out.values().begin());
  const std::size_t oid = g.size();
  return g.record(std::move(out), g.requires_grad(x), [x, begin, cols, oid](Graph& gr) {
    const Tensor& dout = gr.grad(Var{&gr, oid});
    Tensor& dx = gr.grad(x);
    for (std::size_t i = 0; i < dout.size(); ++i) dx[begin * cols + i] += dout[i];
  });
}

Var sum(Var x) {
  Graph& g = *x.graph;
  double total = 0.0;
  for (double v : g.value(x).values()) total += v;
  const std::size_t oid = g.size();
  return g.record(Tensor::scalar(total), g.requires_grad(x), [x, oid](Graph& gr) {
    const double d = gr.grad(Var{&gr, oid})[0];
    Tensor& dx = gr.grad(x);
    for (auto& v : dx.values()) v += d;
  });
}

Var weighted_sum(Var x, const Tensor& coefficients) {
  Graph& g = *x.graph;
  const Tensor& xv = g.value(x);
  if (xv.size() != coefficients.size()) throw ShapeError("weighted_sum: coefficient count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) total += xv[i] * coefficients[i];
  const std::size_t oid = g.size();
  return g.record(Tensor::scalar(total), g.requires_grad(x), [x, coefficients, oid](Graph& gr) {
    const double d = gr.grad(Var{&gr, oid})[0];
    Tensor& dx = gr.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d * coefficients[i];
  });
}

namespace {

Var weighted_nll(Var logits, std::span<const int> targets, std::vector<double> weights, int ignore_index) {
  Graph& g = *logits.graph;
  auto f = nll_forward(g.value(logits), targets, ignore_index);
  long double total = 0.0L;
  for (std::size_t r = 0; r < weights.size(); ++r) {
    if (weights[r] != 0.0) total += static_cast<long double>(weights[r]) * f.nll[r];
  }
  std::vector<int> ys(targets.begin(), targets.end());
  auto log_probs = std::make_shared<Tensor>(std::move(f.log_probs));
  const std::size_t oid = g.size();
  return g.record(Tensor::scalar(static_cast<double>(total)), g.requires_grad(logits),
                  [logits, ys = std::move(ys), weights = std::move(weights), log_probs, oid](Graph& gr) {
                    const double d = gr.grad(Var{&gr, oid})[0];
                    Tensor& dl = gr.grad(logits);
                    const std::size_t vocab = dl.cols();
                    for (std::size_t r = 0; r < ys.size(); ++r) {
                      if (weights[r] == 0.0) continue;
                      const double w = d * weights[r];
                      auto lp = log_probs->row(r);
                      auto row = dl.row(r);
                      for (std::size_t c = 0; c < vocab; ++c) row[c] += w * std::exp(lp[c]);
                      row[static_cast<std::size_t>(ys[r])] -= w;
                    }
                  });
}

}  // namespace

Var softmax_cross_entropy(Var logits, std::span<const int> targets, int ignore_index) {
  std::size_t count = 0;
  for (int y : targets) count += (y != ignore_index);
  if (count == 0) throw std::invalid_argument("cross entropy: every position is ignored");
  std::vector<double> weights(targets.size(), 0.0);
  const double w = 1.0 / static_cast<double>(count);
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] != ignore_index) weights[r] = w;
  }
  // Mean of identical terms must come back bit-exact, so the forward value is
  // taken from the long-double plain kernel rather than the weighted sum.
  Var out = weighted_nll(logits, targets, std::move(weights), ignore_index);
  Graph& g = *logits.graph;
  const double exact = ragcap::softmax_cross_entropy(g.value(logits), targets, ignore_index);
  const std::size_t oid = g.size();
  return g.record(Tensor::scalar(exact), g.requires_grad(out), [out, oid](Graph& gr) {
    gr.grad(out)[0] += gr.grad(Var{&gr, oid})[0];
  });
}

Var token_nll(Var logits, std::span<const int> targets, std::span<const double> weights) {
  if (weights.size() != targets.size()) throw ShapeError("token_nll: weight count mismatch");
  return weighted_nll(logits, targets, std::vector<double>(weights.begin(), weights.end()), -1);
}

}  // namespace ops

// ---------------------------------------------------------------------------
// gradient_check

double gradient_check(const LossBuilder& fn, ParameterSet& params, const GradientCheckOptions& options) {
  if (!(options.step > 0.0)) throw std::invalid_argument("gradient_check: step must be positive");
  auto evaluate = [&]() {
    Graph g;
    const double v = fn(g, params).value()[0];
    if (!std::isfinite(v)) throw NumericError("gradient_check: function value is not finite");
    return v;
  };

  params.zero_grad();
  double floor = 1e-8;
  {
    Graph g;
    Var out = fn(g, params);
    if (out.value().size() != 1) throw ShapeError("gradient_check: function must return a scalar");
    if (!std::isfinite(out.value()[0])) throw NumericError("gradient_check: function value is not finite");
    floor = std::max(floor, options.resolution * std::max(1.0, std::abs(out.value()[0])));
    g.backward(out);
  }

  std::mt19937_64 rng(options.seed);
  double worst = 0.0;
  for (auto& [name, p] : params.items()) {
    if (!params.trainable(p.group)) continue;
    const std::size_t n = p.value.size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > options.max_coordinates_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coordinates_per_tensor);
    }
    for (std::size_t i : coords) {
      const double original = p.value[i];
      p.value[i] = original + options.step;
      const double plus = evaluate();
      p.value[i] = original - options.step;
      const double minus = evaluate();
      p.value[i] = original;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double analytic = p.grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace ragcap
