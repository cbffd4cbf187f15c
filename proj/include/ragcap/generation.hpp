#pragma once

// Search strategies over any autoregressive next-token scorer.

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

namespace ragcap {

// Next-token logits given the prefix generated so far (which starts with BOS).
using StepScorer = std::function<std::vector<double>(const std::vector<int>& prefix)>;

struct CaptionHypothesis {
  std::vector<int> tokens;  // BOS ... (EOS)
  double log_prob = 0.0;    // summed log-probabilities of the generated tokens
  bool finished = false;
};

struct GenerationLimits {
  int bos = 4;
  int eos = 5;
  std::size_t max_length = 20;  // generated tokens, BOS excluded
};

// Ties go to the smaller token id.
CaptionHypothesis greedy_decode(const StepScorer& scorer, const GenerationLimits& limits);

// Summed log-probability, no length normalization. Candidates are ordered by
// score, then by the lexicographically smaller token sequence.
CaptionHypothesis beam_search(const StepScorer& scorer, std::size_t beam_width, const GenerationLimits& limits);

// Multinomial sampling from the softmax at every step.
CaptionHypothesis sample_sequence(const StepScorer& scorer, std::mt19937_64& rng, const GenerationLimits& limits);
CaptionHypothesis sample_sequence(const StepScorer& scorer, std::uint64_t seed, const GenerationLimits& limits);

}  // namespace ragcap
