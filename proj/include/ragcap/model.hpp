#pragma once

// The full captioner: vocabulary, encoder and decoder over one parameter set,
// plus checkpoint persistence.

#include "ragcap/decoder.hpp"
#include "ragcap/encoder.hpp"
#include "ragcap/generation.hpp"
#include "ragcap/tensor.hpp"
#include "ragcap/text.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace ragcap {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  std::size_t context_length = kDefaultContextLength;

  // Small dimensions that train in seconds on the synthetic data.
  static ModelConfig toy();
};

// vocab_size / memory_dim / max_positions are filled in from the vocabulary
// and the encoder width, so callers only pick sizes.
ModelConfig resolve(ModelConfig config, const Vocabulary& vocab);

std::string model_config_to_json(const ModelConfig& config);
// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig model_config_from_json(std::string_view text);

struct CheckpointInfo {
  std::size_t epoch = 0;
  double best_bleu4 = 0.0;
  std::string stage;  // "xe", "scst", ...
};

class CaptionModel {
 public:
  CaptionModel(const ModelConfig& config, Vocabulary vocab, std::uint64_t seed);

  CaptionModel(CaptionModel&&) noexcept;
  CaptionModel& operator=(CaptionModel&&) noexcept;
  ~CaptionModel();

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  ParameterSet& params() { return *params_; }
  const ParameterSet& params() const { return *params_; }
  const Encoder& encoder() const { return *encoder_; }
  const Decoder& decoder() const { return *decoder_; }

  TokenContext context(const std::vector<std::string>& captions) const;
  // BOS, caption words (truncated to fit), EOS.
  std::vector<int> target(const std::string& caption) const;

  EncoderOutput encode(const RegionFeatures& regions, const TokenContext& context) const;
  // beam_width 1 is greedy decoding.
  CaptionHypothesis generate(const EncoderOutput& encoded, std::size_t beam_width) const;
  std::string text(const CaptionHypothesis& hypothesis) const;

  // Binary layout: "XTCK", u32 version, u64 header length, JSON header
  // (configs, vocabulary and its hash, checkpoint info), u32 tensor count, then
  // per tensor: u32 name length, name, u8 group, u32 rank, u64 dims, f64 values.
  void save(const std::filesystem::path& path, const CheckpointInfo& info = {}) const;
  static CaptionModel load(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

  // Copy of every parameter value, for best-epoch snapshots.
  std::vector<Tensor> snapshot() const;
  void restore(const std::vector<Tensor>& values);

 private:
  CaptionModel(const ModelConfig& config, Vocabulary vocab, std::unique_ptr<ParameterSet> params);

  ModelConfig config_;
  Vocabulary vocab_;
  std::unique_ptr<ParameterSet> params_;
  std::unique_ptr<Encoder> encoder_;
  std::unique_ptr<Decoder> decoder_;
};

// FNV-1a over a file's bytes, hex encoded; identifies checkpoints in reports.
std::string file_hash(const std::filesystem::path& path);

}  // namespace ragcap
