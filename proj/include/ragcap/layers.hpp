#pragma once

// Parameter layout and graph application of the transformer sublayers shared
// by the encoder and decoder.

#include "ragcap/tensor.hpp"

#include <random>
#include <string>
#include <vector>

namespace ragcap::layers {

// Registers new parameters when constructed with an RNG, otherwise looks up
// existing ones (and checks their shapes).
class Builder {
 public:
  Builder(ParameterSet& params, ParamGroup group, std::mt19937_64* rng) : params_(params), group_(group), rng_(rng) {}

  Parameter* xavier(const std::string& name, std::size_t fan_in, std::size_t fan_out);
  Parameter* normal(const std::string& name, std::size_t rows, std::size_t cols, double stddev);
  Parameter* constant(const std::string& name, Shape shape, double value);

 private:
  Parameter* lookup(const std::string& name, const Shape& shape);

  ParameterSet& params_;
  ParamGroup group_;
  std::mt19937_64* rng_;
};

// Graph plus the trainability switches of the parameter set it reads.
struct Scope {
  Graph& graph;
  const ParameterSet& params;
  bool inference = false;  // no parameter gradients at all

  Var use(Parameter* p) const { return graph.param(*p, !inference && params.trainable(p->group)); }
};

struct Linear {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;  // optional

  static Linear make(Builder& b, const std::string& name, std::size_t in, std::size_t out, bool with_bias = true);
  Var operator()(const Scope& s, Var x) const;
};

struct LayerNorm {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;
  double epsilon = 1e-5;

  static LayerNorm make(Builder& b, const std::string& name, std::size_t width, double epsilon);
  Var operator()(const Scope& s, Var x) const;
};

struct MultiHeadAttention {
  Linear query;
  Linear key;  // no bias: a key bias only shifts every logit of a row equally
  Linear value;
  Linear output;
  std::size_t heads = 1;

  static MultiHeadAttention make(Builder& b, const std::string& name, std::size_t width, std::size_t source_width,
                                 std::size_t heads);
  Var operator()(const Scope& s, Var queries, Var source, const AttentionMask* mask = nullptr,
                 std::vector<Tensor>* weights_out = nullptr) const;
};

struct FeedForward {
  Linear up;
  Linear down;

  static FeedForward make(Builder& b, const std::string& name, std::size_t width, std::size_t hidden);
  Var operator()(const Scope& s, Var x) const;
};

}  // namespace ragcap::layers
