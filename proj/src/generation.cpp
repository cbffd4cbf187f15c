#include "ragcap/generation.hpp"

#include "ragcap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ragcap {

namespace {

bool finished(const std::vector<int>& tokens, const GenerationLimits& limits) {
  return tokens.back() == limits.eos || tokens.size() - 1 >= limits.max_length;
}

bool ranks_before(const CaptionHypothesis& a, const CaptionHypothesis& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.tokens < b.tokens;
}

}  // namespace

CaptionHypothesis greedy_decode(const StepScorer& scorer, const GenerationLimits& limits) {
  CaptionHypothesis h;
  h.tokens = {limits.bos};
  if (limits.max_length == 0) {
    h.finished = true;
    return h;
  }
  while (!h.finished) {
    const auto lp = log_softmax(scorer(h.tokens));
    const auto best = static_cast<std::size_t>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    h.tokens.push_back(static_cast<int>(best));
    h.log_prob += lp[best];
    h.finished = finished(h.tokens, limits);
  }
  return h;
}

CaptionHypothesis beam_search(const StepScorer& scorer, std::size_t beam_width, const GenerationLimits& limits) {
  if (beam_width < 1) throw std::invalid_argument("beam_search: beam width must be at least 1");
  CaptionHypothesis start;
  start.tokens = {limits.bos};
  if (limits.max_length == 0) {
    start.finished = true;
    return start;
  }
  std::vector<CaptionHypothesis> alive{start};
  std::vector<CaptionHypothesis> pool;

  while (!alive.empty()) {
    std::vector<CaptionHypothesis> candidates;
    for (const auto& h : alive) {
      const auto lp = log_softmax(scorer(h.tokens));
      for (std::size_t v = 0; v < lp.size(); ++v) {
        CaptionHypothesis c;
        c.tokens = h.tokens;
        c.tokens.push_back(static_cast<int>(v));
        c.log_prob = h.log_prob + lp[v];
        candidates.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(beam_width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      ranks_before);
    candidates.resize(keep);

    alive.clear();
    for (auto& c : candidates) {
      c.finished = finished(c.tokens, limits);
      (c.finished ? pool : alive).push_back(std::move(c));
    }
    // Log-probabilities only decrease, so nothing alive can overtake the best
    // retired hypothesis once it scores strictly better.
    if (!pool.empty() && !alive.empty()) {
      const auto best_pool = std::min_element(pool.begin(), pool.end(), ranks_before);
      const auto best_alive = std::min_element(alive.begin(), alive.end(), ranks_before);
      if (best_pool->log_prob > best_alive->log_prob) break;
    }
  }
  return *std::min_element(pool.begin(), pool.end(), ranks_before);
}

CaptionHypothesis sample_sequence(const StepScorer& scorer, std::mt19937_64& rng, const GenerationLimits& limits) {
  CaptionHypothesis h;
  h.tokens = {limits.bos};
  h.finished = limits.max_length == 0;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  while (!h.finished) {
    const auto lp = log_softmax(scorer(h.tokens));
    const double u = unit(rng);
    double cumulative = 0.0;
    std::size_t pick = lp.size() - 1;
    for (std::size_t v = 0; v < lp.size(); ++v) {
      cumulative += std::exp(lp[v]);
      if (u < cumulative) {
        pick = v;
        break;
      }
    }
    // Rounding in the cumulative sum must not select a zero-probability token.
    while (pick > 0 && std::exp(lp[pick]) == 0.0) --pick;
    h.tokens.push_back(static_cast<int>(pick));
    h.log_prob += lp[pick];
    h.finished = finished(h.tokens, limits);
  }
  return h;
}

CaptionHypothesis sample_sequence(const StepScorer& scorer, std::uint64_t seed, const GenerationLimits& limits) {
  std::mt19937_64 rng(seed);
  return sample_sequence(scorer, rng, limits);
}

}  // namespace ragcap
