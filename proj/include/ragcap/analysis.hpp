#pragma once

// How much decoder cross-attention lands on the visual block versus the
// retrieved-caption block, and how good the single nearest retrieved caption
// is on its own.

#include "ragcap/decoder.hpp"
#include "ragcap/metrics.hpp"
#include "ragcap/retrieval.hpp"

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace ragcap {

struct AttentionSummary {
  std::vector<double> visual;   // A_V per decoder layer
  std::vector<double> textual;  // A_L = 1 - A_V
  // Directly summed mass on the textual positions, averaged the same way;
  // agrees with `textual` up to rounding because of the joint softmax.
  std::vector<double> textual_direct;
  std::size_t captions = 0;
};

// Per layer: mean over heads of (mean over steps of the mass on the first N
// positions), then the mean over captions.
AttentionSummary attention_mass(const std::vector<AttentionRecord>& records, std::size_t visual_length,
                                std::size_t text_length);

void write_attention_summary(const std::filesystem::path& json_path, const std::filesystem::path& csv_path,
                             const AttentionSummary& summary);

struct HistogramReport {
  static constexpr std::size_t kBuckets = 20;
  static constexpr double kMaxScore = 10.0;

  std::string mode;                          // image_text / image_image
  std::array<double, kBuckets + 1> edges{};  // uniform over [0, 10]
  std::array<std::size_t, kBuckets> counts{};  // scores > 0
  std::size_t zero_count = 0;                // scores exactly 0
  std::size_t total = 0;
  std::vector<double> scores;  // per query, in input order

  double zero_fraction() const { return total == 0 ? 0.0 : static_cast<double>(zero_count) / static_cast<double>(total); }
  // Bucket of a positive score; 10 lands in the last bucket.
  static std::size_t bucket(double score);
};

struct HistogramQuery {
  RetrievalQuery query;
  std::vector<std::string> references;
};

// Retrieves the single nearest caption for each query (k forced to 1) and
// scores it with CIDEr-D against the query's references.
HistogramReport retrieval_quality_histogram(const std::vector<HistogramQuery>& queries, const RetrievalStores& stores,
                                            RetrievalConfig config, const CiderScorer& scorer);

void write_histogram(const std::filesystem::path& json_path, const std::filesystem::path& csv_path,
                     const HistogramReport& report);

}  // namespace ragcap
