#pragma once

// Dense 64-bit tensors, a reverse-mode computation record and the handful of
// transformer primitives the captioning model is built from.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ragcap {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }
  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  // Matrix view: rank-1 tensors are a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols(), cols()}; }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  bool all_finite() const;
  void fill(double v);

  // Bit-identical comparison (shape and every value).
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Shape shape_;
  std::vector<double> values_;
};

// ---------------------------------------------------------------------------
// Parameters

enum class ParamGroup : std::uint8_t { encoder, decoder };

std::string to_string(ParamGroup group);

struct Parameter {
  Tensor value;
  Tensor grad;
  ParamGroup group = ParamGroup::decoder;
};

class ParameterSet {
 public:
  Parameter& add(const std::string& name, Tensor init, ParamGroup group);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  void set_trainable(ParamGroup group, bool trainable);
  bool trainable(ParamGroup group) const;

  void zero_grad();

  // Ordered by name.
  std::map<std::string, Parameter>& items() { return params_; }
  const std::map<std::string, Parameter>& items() const { return params_; }

 private:
  std::map<std::string, Parameter> params_;
  bool encoder_trainable_ = true;
  bool decoder_trainable_ = true;
};

// ---------------------------------------------------------------------------
// Attention masks. allowed(i, j) is true when query i may attend to key j.

class AttentionMask {
 public:
  AttentionMask(std::size_t queries, std::size_t keys, bool allowed = true);
  static AttentionMask causal(std::size_t n);
  // Keys flagged true in `padded` are hidden from every query.
  static AttentionMask key_padding(std::size_t queries, const std::vector<bool>& padded);

  std::size_t queries() const { return queries_; }
  std::size_t keys() const { return keys_; }
  bool allowed(std::size_t q, std::size_t k) const { return bits_[q * keys_ + k] != 0; }
  void set(std::size_t q, std::size_t k, bool allowed) { bits_[q * keys_ + k] = allowed ? 1 : 0; }

 private:
  std::size_t queries_;
  std::size_t keys_;
  std::vector<std::uint8_t> bits_;
};

// ---------------------------------------------------------------------------
// Plain (non-recording) kernels.

struct AttentionResult {
  Tensor output;   // Tq x d
  Tensor weights;  // Tq x Tk
};

AttentionResult scaled_dot_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                                     const AttentionMask* mask = nullptr);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double epsilon = 1e-5);

// Mean negative log-likelihood over positions whose target differs from ignore_index.
double softmax_cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index = -1);

// Numerically stable log-softmax of one row.
std::vector<double> log_softmax(std::span<const double> logits);

// ---------------------------------------------------------------------------
// Computation record

class Graph;

struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // Frozen parameters (trainable=false) never receive gradient.
  Var param(Parameter& parameter, bool trainable = true);

  const Tensor& value(Var v) const;
  // Gradient buffer of a node, allocated on first use.
  Tensor& grad(Var v);
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Seeds d(output)=1 for a single-element output, runs every recorded backward
  // step once in reverse order and adds parameter gradients into their
  // Parameter::grad (trainable groups only).
  void backward(Var output);

  std::size_t size() const { return nodes_.size(); }
  std::size_t backward_steps_run() const { return backward_steps_run_; }

  // Low-level node creation used by the ops.
  using BackwardFn = std::function<void(Graph&)>;
  Var record(Tensor value, bool requires_grad, BackwardFn backward);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Parameter* parameter = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::size_t backward_steps_run_ = 0;
};

namespace ops {

// a[m x k] * b[k x n]
Var matmul(Var a, Var b);
// x[T x in] * weight[in x out] + bias[out]; bias may be omitted.
Var linear(Var x, Var weight, std::optional<Var> bias = std::nullopt);
Var add(Var a, Var b);
Var scale(Var a, double factor);
Var gelu(Var a);
Var layer_norm(Var x, Var gain, Var bias, double epsilon = 1e-5);

// Multi-head scaled dot-product attention over pre-projected q/k/v (width d,
// split into `heads` contiguous column blocks). When `weights_out` is given it
// receives one Tq x Tk weight matrix per head.
Var attention(Var q, Var k, Var v, std::size_t heads, const AttentionMask* mask = nullptr,
              std::vector<Tensor>* weights_out = nullptr);

// Rows of table[V x d] selected by ids.
Var embedding(Var table, std::span<const int> ids);
Var concat_rows(Var top, Var bottom);
Var slice_rows(Var x, std::size_t begin, std::size_t end);

Var sum(Var x);
// sum(x * coefficients) for a constant coefficient tensor of x's shape.
Var weighted_sum(Var x, const Tensor& coefficients);

Var softmax_cross_entropy(Var logits, std::span<const int> targets, int ignore_index = -1);
// sum_t weights[t] * -log softmax(logits[t])[targets[t]]
Var token_nll(Var logits, std::span<const int> targets, std::span<const double> weights);

}  // namespace ops

// ---------------------------------------------------------------------------
// Finite-difference verification

using LossBuilder = std::function<Var(Graph&, ParameterSet&)>;

struct GradientCheckOptions {
  double step = 1e-5;
  std::size_t max_coordinates_per_tensor = 64;
  std::uint64_t seed = 0;
  // Gradients smaller than this fraction of max(1, |f|) sit near the round-off
  // level of the difference quotient and are compared against it instead.
  double resolution = 1e-6;
};

// Maximum relative error between the recorded gradient and central differences
// over sampled coordinates of every trainable parameter.
double gradient_check(const LossBuilder& fn, ParameterSet& params, const GradientCheckOptions& options = {});

}  // namespace ragcap
