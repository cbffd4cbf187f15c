#include "ragcap/layers.hpp"

#include <cmath>

namespace ragcap::layers {

Parameter* Builder::lookup(const std::string& name, const Shape& shape) {
  Parameter& p = params_.at(name);
  if (p.value.shape() != shape) {
    throw ShapeError("parameter " + name + " has shape " + to_string(p.value.shape()) + ", expected " +
                     to_string(shape));
  }
  return &p;
}

Parameter* Builder::xavier(const std::string& name, std::size_t fan_in, std::size_t fan_out) {
  if (rng_ == nullptr) return lookup(name, {fan_in, fan_out});
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t = Tensor::matrix(fan_in, fan_out);
  for (auto& v : t.values()) v = dist(*rng_);
  return &params_.add(name, std::move(t), group_);
}

Parameter* Builder::normal(const std::string& name, std::size_t rows, std::size_t cols, double stddev) {
  if (rng_ == nullptr) return lookup(name, {rows, cols});
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t = Tensor::matrix(rows, cols);
  for (auto& v : t.values()) v = dist(*rng_);
  return &params_.add(name, std::move(t), group_);
}

Parameter* Builder::constant(const std::string& name, Shape shape, double value) {
  if (rng_ == nullptr) return lookup(name, shape);
  return &params_.add(name, Tensor(std::move(shape), value), group_);
}

Linear Linear::make(Builder& b, const std::string& name, std::size_t in, std::size_t out, bool with_bias) {
  Linear l;
  l.weight = b.xavier(name + ".weight", in, out);
  if (with_bias) l.bias = b.constant(name + ".bias", {out}, 0.0);
  return l;
}

Var Linear::operator()(const Scope& s, Var x) const {
  if (bias == nullptr) return ops::linear(x, s.use(weight));
  return ops::linear(x, s.use(weight), s.use(bias));
}

LayerNorm LayerNorm::make(Builder& b, const std::string& name, std::size_t width, double epsilon) {
  LayerNorm ln;
  ln.gain = b.constant(name + ".gain", {width}, 1.0);
  ln.bias = b.constant(name + ".bias", {width}, 0.0);
  ln.epsilon = epsilon;
  return ln;
}

Var LayerNorm::operator()(const Scope& s, Var x) const {
  return ops::layer_norm(x, s.use(gain), s.use(bias), epsilon);
}

MultiHeadAttention MultiHeadAttention::make(Builder& b, const std::string& name, std::size_t width,
                                            std::size_t source_width, std::size_t heads) {
  MultiHeadAttention a;
  a.query = Linear::make(b, name + ".query", width, width);
  a.key = Linear::make(b, name + ".key", source_width, width, false);
  a.value = Linear::make(b, name + ".value", source_width, width);
  a.output = Linear::make(b, name + ".output", width, width);
  a.heads = heads;
  return a;
}

Var MultiHeadAttention::operator()(const Scope& s, Var queries, Var source, const AttentionMask* mask,
                                   std::vector<Tensor>* weights_out) const {
  Var q = query(s, queries);
  Var k = key(s, source);
  Var v = value(s, source);
  return output(s, ops::attention(q, k, v, heads, mask, weights_out));
}

FeedForward FeedForward::make(Builder& b, const std::string& name, std::size_t width, std::size_t hidden) {
  FeedForward f;
  f.up = Linear::make(b, name + ".up", width, hidden);
  f.down = Linear::make(b, name + ".down", hidden, width);
  return f;
}

Var FeedForward::operator()(const Scope& s, Var x) const { return down(s, ops::gelu(up(s, x))); }

}  // namespace ragcap::layers
