#pragma once

#include "ragcap/datastore.hpp"
#include "ragcap/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace ragcap {

enum class RetrievalMode : std::uint8_t { image_text, image_image };

std::string to_string(RetrievalMode mode);
RetrievalMode parse_retrieval_mode(std::string_view name);

struct RetrievalConfig {
  RetrievalMode mode = RetrievalMode::image_text;
  std::size_t k = 5;
  // Cosine for image-text, Euclidean for image-image.
  Metric metric = Metric::cosine;
  bool exclude_self = true;
  std::uint64_t seed = 0;

  static RetrievalConfig defaults_for(RetrievalMode mode);
};

enum class ContextKind : std::uint8_t { retrieved, empty, random, oracle_mixed };

std::string to_string(ContextKind kind);

struct RetrievedContext {
  std::vector<std::string> captions;         // rank order, best first
  std::vector<std::int64_t> source_entry_ids;  // -1 for injected references
  std::vector<double> scores;                // retrieval scores, NaN when not retrieved
  ContextKind kind = ContextKind::retrieved;
  bool store_was_empty = false;
};

struct RetrievalQuery {
  std::string image_id;
  std::vector<double> embedding;  // shared image/text space, image-text mode
  Tensor regions;                 // N x d_v, image-image mode
};

struct RetrievalStores {
  const VectorIndex* captions = nullptr;  // image-text mode
  const VectorIndex* images = nullptr;    // image-image mode
  // Reference captions per store image, image-image mode.
  const std::map<std::string, std::vector<std::string>>* image_captions = nullptr;
};

// Column means of the region matrix.
std::vector<double> pool_regions(const Tensor& regions);

RetrievedContext retrieve_context(const RetrievalQuery& query, const RetrievalStores& stores,
                                  const RetrievalConfig& config);

enum class ContextVariant : std::uint8_t { empty, random, oracle };

struct VariantRequest {
  ContextVariant variant = ContextVariant::empty;
  std::vector<std::string> references;  // oracle: the image's own captions
  std::size_t replace_count = 0;        // oracle
  std::size_t k = 5;                    // random: how many captions to draw
  std::uint64_t seed = 0;               // random
  const VectorIndex* pool = nullptr;    // random: caption store to draw from
};

// empty: no captions. random: k distinct captions drawn uniformly from the
// pool. oracle: the last replace_count captions of base become the first
// replace_count references.
RetrievedContext make_variant_context(const RetrievedContext& base, const VariantRequest& request);

}  // namespace ragcap
