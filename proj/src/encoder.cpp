#include "ragcap/encoder.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace ragcap {

RegionFeatures RegionFeatures::blacked() const {
  RegionFeatures out;
  out.features = Tensor(features.shape(), 0.0);
  if (boxes) out.boxes = Tensor(boxes->shape(), 0.0);
  out.blacked_out = true;
  return out;
}

std::size_t EncoderOutput::valid_text_length() const {
  return static_cast<std::size_t>(std::count(text_padding.begin(), text_padding.end(), false));
}

std::vector<std::string> validate_config(const EncoderConfig& c) {
  std::vector<std::string> findings;
  auto positive = [&](std::size_t v, const char* name) {
    if (v == 0) findings.push_back(std::string(name) + " must be positive");
  };
  positive(c.d_model, "d_model");
  positive(c.heads, "heads");
  positive(c.text_layers, "text_layers");
  positive(c.visual_layers, "visual_layers");
  positive(c.cross_layers, "cross_layers");
  positive(c.ffn_dim, "ffn_dim");
  positive(c.region_dim, "region_dim");
  positive(c.max_segments, "max_segments");
  if (c.heads != 0 && c.d_model % c.heads != 0) {
    findings.push_back("d_model " + std::to_string(c.d_model) + " is not divisible by heads " +
                       std::to_string(c.heads));
  }
  if (c.d_model == 1) findings.push_back("d_model must be at least 2 for layer normalization");
  if (c.vocab_size < static_cast<std::size_t>(kReservedCount)) {
    findings.push_back("vocab_size must cover the reserved tokens");
  }
  if (c.max_positions < 2) findings.push_back("max_positions must be at least 2");
  if (!(c.layer_norm_eps > 0.0)) findings.push_back("layer_norm_eps must be positive");
  return findings;
}

Var Encoder::SelfLayer::operator()(const layers::Scope& s, Var x) const {
  Var h = attention_norm(s, ops::add(x, attention(s, x, x)));
  return ffn_norm(s, ops::add(h, ffn(s, h)));
}

Encoder::Encoder(const EncoderConfig& config, ParameterSet& params) : Encoder(config, params, nullptr) {}

void Encoder::init_parameters(const EncoderConfig& config, ParameterSet& params, std::mt19937_64& rng) {
  [[maybe_unused]] Encoder bound(config, params, &rng);
}

Encoder::Encoder(const EncoderConfig& config, ParameterSet& params, std::mt19937_64* rng) : config_(config) {
  if (auto findings = validate_config(config); !findings.empty()) {
    std::ostringstream os;
    os << "invalid encoder configuration:";
    for (const auto& f : findings) os << ' ' << f << ';';
    throw std::invalid_argument(os.str());
  }
  layers::Builder b(params, ParamGroup::encoder, rng);
  const std::size_t d = config.d_model;
  const double eps = config.layer_norm_eps;

  region_proj_ = layers::Linear::make(b, "enc.visual.proj", config.region_dim, d);
  region_norm_ = layers::LayerNorm::make(b, "enc.visual.norm", d, eps);
  if (config.use_boxes) {
    box_proj_ = layers::Linear::make(b, "enc.visual.box_proj", 4, d);
    box_norm_ = layers::LayerNorm::make(b, "enc.visual.box_norm", d, eps);
  }
  token_embedding_ = b.normal("enc.text.token_embedding", config.vocab_size, d, 0.02);
  position_embedding_ = b.normal("enc.text.position_embedding", config.max_positions, d, 0.02);
  segment_embedding_ = b.normal("enc.text.segment_embedding", config.max_segments, d, 0.02);
  text_norm_ = layers::LayerNorm::make(b, "enc.text.norm", d, eps);

  auto make_self = [&](const std::string& name) {
    SelfLayer l;
    l.attention = layers::MultiHeadAttention::make(b, name + ".attention", d, d, config.heads);
    l.attention_norm = layers::LayerNorm::make(b, name + ".attention_norm", d, eps);
    l.ffn = layers::FeedForward::make(b, name + ".ffn", d, config.ffn_dim);
    l.ffn_norm = layers::LayerNorm::make(b, name + ".ffn_norm", d, eps);
    return l;
  };
  for (std::size_t i = 0; i < config.text_layers; ++i) text_layers_.push_back(make_self("enc.text.layer" + std::to_string(i)));
  for (std::size_t i = 0; i < config.visual_layers; ++i) {
    visual_layers_.push_back(make_self("enc.visual.layer" + std::to_string(i)));
  }
  for (std::size_t i = 0; i < config.cross_layers; ++i) {
    const std::string name = "enc.cross.layer" + std::to_string(i);
    CrossLayer l;
    for (auto [branch, tag] : {std::pair{&l.text, ".text"}, std::pair{&l.visual, ".visual"}}) {
      branch->cross = layers::MultiHeadAttention::make(b, name + tag + ".cross", d, d, config.heads);
      branch->cross_norm = layers::LayerNorm::make(b, name + tag + ".cross_norm", d, eps);
      branch->self = make_self(name + tag + ".self");
    }
    cross_layers_.push_back(std::move(l));
  }
}

EncodedVars Encoder::encode(const layers::Scope& s, const RegionFeatures& regions, const TokenContext& context) const {
  const Tensor& feats = regions.features;
  if (feats.rank() != 2 || feats.rows() == 0) throw ShapeError("encoder: region features must be a non-empty matrix");
  if (feats.cols() != config_.region_dim) {
    throw ShapeError("encoder: region dimension " + std::to_string(feats.cols()) + ", expected " +
                     std::to_string(config_.region_dim));
  }
  const std::size_t valid = context.valid_length();
  if (valid == 0 || context.ids.empty() || context.ids.front() != kCls) {
    throw ShapeError("encoder: context must start with CLS and contain a SEP");
  }
  if (valid > config_.max_positions) {
    throw ShapeError("encoder: context of " + std::to_string(valid) + " tokens exceeds " +
                     std::to_string(config_.max_positions) + " positions");
  }

  Graph& g = s.graph;
  Var visual = region_norm_(s, region_proj_(s, g.constant(feats)));
  if (config_.use_boxes) {
    if (!regions.boxes || regions.boxes->rows() != feats.rows() || regions.boxes->cols() != 4) {
      throw ShapeError("encoder: box geometry enabled but boxes are missing or not N x 4");
    }
    Var boxes = box_norm_(s, box_proj_(s, g.constant(*regions.boxes)));
    visual = ops::scale(ops::add(visual, boxes), 0.5);
  }

  std::vector<int> ids(context.ids.begin(), context.ids.begin() + static_cast<std::ptrdiff_t>(valid));
  std::vector<int> positions(valid);
  std::vector<int> segments = context.segment_ids();
  segments.resize(valid);
  for (std::size_t i = 0; i < valid; ++i) {
    positions[i] = static_cast<int>(i);
    segments[i] = std::min(segments[i], static_cast<int>(config_.max_segments) - 1);
  }
  Var text = ops::add(ops::add(ops::embedding(s.use(token_embedding_), ids),
                               ops::embedding(s.use(position_embedding_), positions)),
                      ops::embedding(s.use(segment_embedding_), segments));
  text = text_norm_(s, text);

  for (const auto& layer : text_layers_) text = layer(s, text);
  for (const auto& layer : visual_layers_) visual = layer(s, visual);
  for (const auto& layer : cross_layers_) {
    Var t = layer.text.cross_norm(s, ops::add(text, layer.text.cross(s, text, visual)));
    Var v = layer.visual.cross_norm(s, ops::add(visual, layer.visual.cross(s, visual, text)));
    text = layer.text.self(s, t);
    visual = layer.visual.self(s, v);
  }
  return {visual, text, context.ids.size()};
}

EncoderOutput Encoder::encode(const ParameterSet& params, const RegionFeatures& regions,
                              const TokenContext& context) const {
  Graph g;
  layers::Scope s{g, params, true};
  EncodedVars vars = encode(s, regions, context);
  EncoderOutput out;
  out.visual = vars.visual.value();
  const Tensor& text = vars.text.value();
  out.textual = Tensor::matrix(vars.padded_length, text.cols());
  std::copy(text.values().begin(), text.values().end(), out.textual.values().begin());
  out.text_padding = context.padding_mask();
  return out;
}

}  // namespace ragcap
