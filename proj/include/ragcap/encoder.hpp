#pragma once

// Cross-modal transformer encoder: region features and the concatenated
// retrieved-caption context are encoded by single-modality self-attention
// stacks, then by cross-modal layers in which each modality attends to the
// other.

#include "ragcap/layers.hpp"
#include "ragcap/tensor.hpp"
#include "ragcap/text.hpp"

#include <optional>
#include <random>
#include <string>
#include <vector>

namespace ragcap {

struct RegionFeatures {
  Tensor features;              // N x d_v
  std::optional<Tensor> boxes;  // N x 4, normalized geometry
  bool blacked_out = false;

  std::size_t count() const { return features.rows(); }
  // Same shape, every value exactly zero.
  RegionFeatures blacked() const;
};

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t region_dim = 32;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t text_layers = 2;
  std::size_t visual_layers = 2;
  std::size_t cross_layers = 2;
  std::size_t ffn_dim = 256;
  std::size_t max_positions = kDefaultContextLength;
  std::size_t max_segments = 16;
  bool use_boxes = false;
  double layer_norm_eps = 1e-5;
};

// Every violated invariant, empty when the configuration is usable.
std::vector<std::string> validate_config(const EncoderConfig& config);

struct EncoderOutput {
  Tensor visual;                  // N x d
  Tensor textual;                 // |L| x d, rows at padded positions are zero
  std::vector<bool> text_padding;  // true at padded positions

  std::size_t visual_length() const { return visual.rows(); }
  std::size_t text_length() const { return textual.rows(); }
  std::size_t valid_text_length() const;
};

// Encoder output inside a computation record. Only the unpadded text rows are
// computed; padded rows never reach the decoder.
struct EncodedVars {
  Var visual;
  Var text;  // valid_length x d
  std::size_t padded_length = 0;
};

class Encoder {
 public:
  // Binds to parameters already in `params`.
  Encoder(const EncoderConfig& config, ParameterSet& params);

  static void init_parameters(const EncoderConfig& config, ParameterSet& params, std::mt19937_64& rng);

  EncodedVars encode(const layers::Scope& scope, const RegionFeatures& regions, const TokenContext& context) const;
  EncoderOutput encode(const ParameterSet& params, const RegionFeatures& regions, const TokenContext& context) const;

  const EncoderConfig& config() const { return config_; }

 private:
  struct SelfLayer {
    layers::MultiHeadAttention attention;
    layers::LayerNorm attention_norm;
    layers::FeedForward ffn;
    layers::LayerNorm ffn_norm;

    Var operator()(const layers::Scope& s, Var x) const;
  };
  struct CrossBranch {
    layers::MultiHeadAttention cross;
    layers::LayerNorm cross_norm;
    SelfLayer self;
  };
  struct CrossLayer {
    CrossBranch text;
    CrossBranch visual;
  };

  Encoder(const EncoderConfig& config, ParameterSet& params, std::mt19937_64* rng);

  EncoderConfig config_;
  layers::Linear region_proj_;
  layers::LayerNorm region_norm_;
  layers::Linear box_proj_;
  layers::LayerNorm box_norm_;
  Parameter* token_embedding_ = nullptr;
  Parameter* position_embedding_ = nullptr;
  Parameter* segment_embedding_ = nullptr;
  layers::LayerNorm text_norm_;
  std::vector<SelfLayer> text_layers_;
  std::vector<SelfLayer> visual_layers_;
  std::vector<CrossLayer> cross_layers_;
};

}  // namespace ragcap
