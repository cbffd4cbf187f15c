#include "ragcap/decoder.hpp"

#include "ragcap/text.hpp"

#include <json.hpp>

#include <istream>
#include <memory>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace ragcap {

std::vector<std::string> validate_config(const DecoderConfig& c) {
  std::vector<std::string> findings;
  auto positive = [&](std::size_t v, const char* name) {
    if (v == 0) findings.push_back(std::string(name) + " must be positive");
  };
  positive(c.d_model, "d_model");
  positive(c.heads, "heads");
  positive(c.layers, "layers");
  positive(c.ffn_dim, "ffn_dim");
  positive(c.memory_dim, "memory_dim");
  positive(c.max_length, "max_length");
  if (c.heads != 0 && c.d_model % c.heads != 0) {
    findings.push_back("d_model " + std::to_string(c.d_model) + " is not divisible by heads " +
                       std::to_string(c.heads));
  }
  if (c.d_model == 1) findings.push_back("d_model must be at least 2 for layer normalization");
  if (c.vocab_size < static_cast<std::size_t>(kReservedCount)) {
    findings.push_back("vocab_size must cover the reserved tokens");
  }
  if (!(c.layer_norm_eps > 0.0)) findings.push_back("layer_norm_eps must be positive");
  return findings;
}

// ---------------------------------------------------------------------------

void write_attention_records(std::ostream& out, const std::vector<AttentionRecord>& records) {
  for (const auto& r : records) {
    nlohmann::json j;
    j["image_id"] = r.image_id;
    j["visual_length"] = r.visual_length;
    j["text_length"] = r.text_length;
    j["weights"] = r.weights;
    out << j.dump() << '\n';
  }
}

std::vector<AttentionRecord> read_attention_records(std::istream& in) {
  std::vector<AttentionRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      AttentionRecord r;
      r.image_id = j.at("image_id").get<std::string>();
      r.visual_length = j.at("visual_length").get<std::size_t>();
      r.text_length = j.at("text_length").get<std::size_t>();
      r.weights = j.at("weights").get<decltype(r.weights)>();
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("attention records: line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

// ---------------------------------------------------------------------------

DecoderMemory DecoderMemory::from(const EncoderOutput& out) {
  if (out.text_padding.size() != out.text_length()) {
    throw ShapeError("decoder memory: padding mask length differs from the textual block");
  }
  if (out.visual.rows() == 0) throw ShapeError("decoder memory: empty visual block");
  if (out.text_length() > 0 && out.textual.cols() != out.visual.cols()) {
    throw ShapeError("decoder memory: visual and textual widths differ");
  }
  DecoderMemory m;
  m.visual_length = out.visual.rows();
  m.text_padding = out.text_padding;
  const std::size_t d = out.visual.cols();
  m.rows = Tensor::matrix(m.visual_length + out.valid_text_length(), d);
  auto& dst = m.rows.values();
  std::copy(out.visual.values().begin(), out.visual.values().end(), dst.begin());
  std::size_t r = m.visual_length;
  for (std::size_t i = 0; i < out.text_length(); ++i) {
    if (out.text_padding[i]) continue;
    const auto src = out.textual.row(i);
    std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(r * d));
    ++r;
  }
  return m;
}

std::vector<double> DecoderMemory::expand(std::span<const double> weights) const {
  if (weights.size() != rows.rows()) {
    throw ShapeError("decoder memory: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(rows.rows()) + " memory rows");
  }
  std::vector<double> out(visual_length + text_padding.size(), 0.0);
  std::copy(weights.begin(), weights.begin() + static_cast<std::ptrdiff_t>(visual_length), out.begin());
  std::size_t next = visual_length;
  for (std::size_t i = 0; i < text_padding.size(); ++i) {
    if (!text_padding[i]) out[visual_length + i] = weights[next++];
  }
  return out;
}

// ---------------------------------------------------------------------------

Decoder::Decoder(const DecoderConfig& config, ParameterSet& params) : Decoder(config, params, nullptr) {}

void Decoder::init_parameters(const DecoderConfig& config, ParameterSet& params, std::mt19937_64& rng) {
  [[maybe_unused]] Decoder bound(config, params, &rng);
}

Decoder::Decoder(const DecoderConfig& config, ParameterSet& params, std::mt19937_64* rng) : config_(config) {
  if (auto findings = validate_config(config); !findings.empty()) {
    std::ostringstream os;
    os << "invalid decoder configuration:";
    for (const auto& f : findings) os << ' ' << f << ';';
    throw std::invalid_argument(os.str());
  }
  layers::Builder b(params, ParamGroup::decoder, rng);
  const std::size_t d = config.d_model;
  const double eps = config.layer_norm_eps;
  token_embedding_ = b.normal("dec.token_embedding", config.vocab_size, d, 0.02);
  // BOS plus max_length generated tokens; the last one is never an input.
  position_embedding_ = b.normal("dec.position_embedding", config.max_length + 1, d, 0.02);
  for (std::size_t i = 0; i < config.layers; ++i) {
    const std::string name = "dec.layer" + std::to_string(i);
    Block blk;
    blk.self_norm = layers::LayerNorm::make(b, name + ".self_norm", d, eps);
    blk.self_attention = layers::MultiHeadAttention::make(b, name + ".self", d, d, config.heads);
    blk.cross_norm = layers::LayerNorm::make(b, name + ".cross_norm", d, eps);
    blk.cross_attention = layers::MultiHeadAttention::make(b, name + ".cross", d, config.memory_dim, config.heads);
    blk.ffn_norm = layers::LayerNorm::make(b, name + ".ffn_norm", d, eps);
    blk.ffn = layers::FeedForward::make(b, name + ".ffn", d, config.ffn_dim);
    blocks_.push_back(blk);
  }
  final_norm_ = layers::LayerNorm::make(b, "dec.final_norm", d, eps);
  head_ = layers::Linear::make(b, "dec.head", d, config.vocab_size);
}

GenerationLimits Decoder::limits() const { return {kBos, kEos, config_.max_length}; }

Var Decoder::forward(const layers::Scope& s, Var memory, const std::vector<int>& inputs,
                     std::vector<std::vector<Tensor>>* cross_weights) const {
  if (inputs.empty()) throw std::invalid_argument("decoder: empty input sequence");
  if (inputs.size() > config_.max_length) {
    throw std::invalid_argument("decoder: " + std::to_string(inputs.size()) + " input tokens exceed max length " +
                                std::to_string(config_.max_length));
  }
  if (memory.value().cols() != config_.memory_dim) {
    throw ShapeError("decoder: memory width " + std::to_string(memory.value().cols()) + ", expected " +
                     std::to_string(config_.memory_dim));
  }
  for (int id : inputs) {
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
      throw std::out_of_range("decoder: token id " + std::to_string(id) + " outside the vocabulary");
    }
  }
  const std::size_t t = inputs.size();
  std::vector<int> positions(t);
  for (std::size_t i = 0; i < t; ++i) positions[i] = static_cast<int>(i);
  Var x = ops::add(ops::embedding(s.use(token_embedding_), inputs),
                   ops::embedding(s.use(position_embedding_), positions));

  const AttentionMask causal = AttentionMask::causal(t);
  if (cross_weights) cross_weights->assign(blocks_.size(), {});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& blk = blocks_[l];
    Var h = blk.self_norm(s, x);
    x = ops::add(x, blk.self_attention(s, h, h, &causal));
    h = blk.cross_norm(s, x);
    x = ops::add(x, blk.cross_attention(s, h, memory, nullptr, cross_weights ? &(*cross_weights)[l] : nullptr));
    x = ops::add(x, blk.ffn(s, blk.ffn_norm(s, x)));
  }
  return head_(s, final_norm_(s, x));
}

namespace {

void check_target(const std::vector<int>& target, std::size_t max_length) {
  if (target.empty()) throw std::invalid_argument("teacher_forced_loss: empty target");
  if (target.size() < 2 || target.front() != kBos || target.back() != kEos) {
    throw std::invalid_argument("teacher_forced_loss: target must start with BOS and end with EOS");
  }
  if (target.size() - 1 > max_length) {
    throw std::invalid_argument("teacher_forced_loss: target longer than the decoder max length");
  }
}

}  // namespace

Var Decoder::teacher_forced_loss(const layers::Scope& s, Var memory, const std::vector<int>& target) const {
  check_target(target, config_.max_length);
  const std::vector<int> inputs(target.begin(), target.end() - 1);
  const std::vector<int> next(target.begin() + 1, target.end());
  return ops::softmax_cross_entropy(forward(s, memory, inputs), next);
}

double Decoder::teacher_forced_loss(const ParameterSet& params, const EncoderOutput& encoded,
                                    const std::vector<int>& target) const {
  const DecoderMemory memory = DecoderMemory::from(encoded);
  Graph g;
  layers::Scope s{g, params, true};
  return teacher_forced_loss(s, g.constant(memory.rows), target).value()[0];
}

StepOutput Decoder::decode_step(const ParameterSet& params, const DecoderMemory& memory,
                                const std::vector<int>& prefix, bool record_attention) const {
  if (prefix.empty() || prefix.front() != kBos) throw std::invalid_argument("decode_step: prefix must start with BOS");
  if (prefix.size() > config_.max_length) {
    throw std::invalid_argument("decode_step: prefix of " + std::to_string(prefix.size()) +
                                " tokens exceeds max length " + std::to_string(config_.max_length));
  }
  Graph g;
  layers::Scope s{g, params, true};
  std::vector<std::vector<Tensor>> weights;
  const Tensor& logits = forward(s, g.constant(memory.rows), prefix, record_attention ? &weights : nullptr).value();
  StepOutput out;
  const auto last = logits.row(logits.rows() - 1);
  out.logits.assign(last.begin(), last.end());
  if (record_attention) {
    out.attention.emplace();
    for (const auto& layer : weights) {
      auto& heads = out.attention->emplace_back();
      for (const auto& w : layer) heads.push_back(memory.expand(w.row(w.rows() - 1)));
    }
  }
  return out;
}

StepScorer Decoder::scorer(const ParameterSet& params, const EncoderOutput& encoded) const {
  auto memory = std::make_shared<const DecoderMemory>(DecoderMemory::from(encoded));
  return [this, &params, memory](const std::vector<int>& prefix) {
    return decode_step(params, *memory, prefix).logits;
  };
}

AttentionRecord Decoder::record_attention(const ParameterSet& params, const EncoderOutput& encoded,
                                          const std::vector<int>& caption) const {
  if (caption.size() < 2 || caption.front() != kBos) {
    throw std::invalid_argument("record_attention: caption must be BOS plus at least one generated token");
  }
  const DecoderMemory memory = DecoderMemory::from(encoded);
  Graph g;
  layers::Scope s{g, params, true};
  std::vector<std::vector<Tensor>> weights;
  // Causality makes row t of a full pass equal to the weights of step t.
  const std::vector<int> inputs(caption.begin(), caption.end() - 1);
  forward(s, g.constant(memory.rows), inputs, &weights);

  AttentionRecord rec;
  rec.visual_length = encoded.visual_length();
  rec.text_length = encoded.text_length();
  for (const auto& layer : weights) {
    auto& heads = rec.weights.emplace_back();
    for (const auto& w : layer) {
      auto& steps = heads.emplace_back();
      for (std::size_t t = 0; t < w.rows(); ++t) steps.push_back(memory.expand(w.row(t)));
    }
  }
  return rec;
}

}  // namespace ragcap
