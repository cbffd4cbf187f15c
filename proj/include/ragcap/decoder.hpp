#pragma once

// Autoregressive caption decoder: masked self-attention, then cross-attention
// over the joint [visual ; textual] encoder outputs under a single softmax,
// then a feed-forward sublayer (pre-norm residual blocks).

#include "ragcap/encoder.hpp"
#include "ragcap/generation.hpp"
#include "ragcap/layers.hpp"
#include "ragcap/tensor.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace ragcap {

struct DecoderConfig {
  std::size_t vocab_size = 0;
  std::size_t memory_dim = 64;  // encoder width
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t layers = 4;
  std::size_t ffn_dim = 256;
  std::size_t max_length = 20;  // generated tokens, BOS excluded
  double layer_norm_eps = 1e-5;
};

std::vector<std::string> validate_config(const DecoderConfig& config);

// Cross-attention weights of one generated caption:
// weights[layer][head][step] has one entry per encoder position
// (visual_length + text_length, padded text positions carry exactly 0).
struct AttentionRecord {
  std::string image_id;
  std::size_t visual_length = 0;
  std::size_t text_length = 0;
  std::vector<std::vector<std::vector<std::vector<double>>>> weights;

  std::size_t layers() const { return weights.size(); }
  std::size_t steps() const { return weights.empty() || weights[0].empty() ? 0 : weights[0][0].size(); }
};

// One JSON object per line.
void write_attention_records(std::ostream& out, const std::vector<AttentionRecord>& records);
std::vector<AttentionRecord> read_attention_records(std::istream& in);

struct StepOutput {
  std::vector<double> logits;
  // Per layer, per head: weights of the newest position.
  std::optional<std::vector<std::vector<std::vector<double>>>> attention;
};

// Decoder-side view of an encoder output: the concatenated memory rows that
// cross-attention reads plus the bookkeeping to map weights back onto padded
// positions.
struct DecoderMemory {
  Tensor rows;  // (N + valid text) x memory_dim
  std::size_t visual_length = 0;
  std::vector<bool> text_padding;

  static DecoderMemory from(const EncoderOutput& out);
  // Expands weights over memory rows to all N + |L| encoder positions.
  std::vector<double> expand(std::span<const double> weights) const;
};

class Decoder {
 public:
  Decoder(const DecoderConfig& config, ParameterSet& params);

  static void init_parameters(const DecoderConfig& config, ParameterSet& params, std::mt19937_64& rng);

  // Logits (T x V) for every input position. `cross_weights`, when given,
  // receives weights[layer][head] as T x memory-rows matrices.
  Var forward(const layers::Scope& scope, Var memory, const std::vector<int>& inputs,
              std::vector<std::vector<Tensor>>* cross_weights = nullptr) const;

  // Mean over steps of -log P(target_i | target_<i, memory). The target must
  // start with BOS and end with EOS.
  Var teacher_forced_loss(const layers::Scope& scope, Var memory, const std::vector<int>& target) const;
  double teacher_forced_loss(const ParameterSet& params, const EncoderOutput& encoded,
                             const std::vector<int>& target) const;

  StepOutput decode_step(const ParameterSet& params, const DecoderMemory& memory, const std::vector<int>& prefix,
                         bool record_attention = false) const;

  StepScorer scorer(const ParameterSet& params, const EncoderOutput& encoded) const;

  // Re-runs a finished caption to collect the cross-attention used at each of
  // its generation steps.
  AttentionRecord record_attention(const ParameterSet& params, const EncoderOutput& encoded,
                                   const std::vector<int>& caption) const;

  GenerationLimits limits() const;
  const DecoderConfig& config() const { return config_; }

 private:
  struct Block {
    layers::LayerNorm self_norm;
    layers::MultiHeadAttention self_attention;
    layers::LayerNorm cross_norm;
    layers::MultiHeadAttention cross_attention;
    layers::LayerNorm ffn_norm;
    layers::FeedForward ffn;
  };

  Decoder(const DecoderConfig& config, ParameterSet& params, std::mt19937_64* rng);

  DecoderConfig config_;
  Parameter* token_embedding_ = nullptr;
  Parameter* position_embedding_ = nullptr;
  std::vector<Block> blocks_;
  layers::LayerNorm final_norm_;
  layers::Linear head_;
};

}  // namespace ragcap
