#include "ragcap/retrieval.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

namespace ragcap {

std::string to_string(RetrievalMode mode) { return mode == RetrievalMode::image_text ? "image_text" : "image_image"; }

RetrievalMode parse_retrieval_mode(std::string_view name) {
  if (name == "image_text") return RetrievalMode::image_text;
  if (name == "image_image") return RetrievalMode::image_image;
  throw std::invalid_argument("unknown retrieval mode '" + std::string(name) + "'");
}

RetrievalConfig RetrievalConfig::defaults_for(RetrievalMode mode) {
  RetrievalConfig c;
  c.mode = mode;
  c.metric = mode == RetrievalMode::image_text ? Metric::cosine : Metric::euclidean;
  return c;
}

std::string to_string(ContextKind kind) {
  switch (kind) {
    case ContextKind::retrieved: return "retrieved";
    case ContextKind::empty: return "empty";
    case ContextKind::random: return "random";
    case ContextKind::oracle_mixed: return "oracle_mixed";
  }
  return "unknown";
}

std::vector<double> pool_regions(const Tensor& regions) {
  if (regions.rank() != 2 || regions.rows() == 0) throw std::invalid_argument("pool_regions: empty region set");
  const std::size_t n = regions.rows();
  std::vector<double> out(regions.cols(), 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = regions.row(r);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += row[c];
  }
  for (auto& v : out) v /= static_cast<double>(n);
  return out;
}

RetrievedContext retrieve_context(const RetrievalQuery& query, const RetrievalStores& stores,
                                  const RetrievalConfig& config) {
  RetrievedContext ctx;
  ctx.kind = ContextKind::retrieved;
  if (config.k == 0) return ctx;
  std::optional<std::string_view> exclude;
  if (config.exclude_self) exclude = query.image_id;

  if (config.mode == RetrievalMode::image_text) {
    if (stores.captions == nullptr) throw std::invalid_argument("retrieval: image_text mode needs a caption store");
    if (stores.captions->empty()) {
      ctx.store_was_empty = true;
      return ctx;
    }
    if (stores.captions->metric() != config.metric) {
      throw std::invalid_argument("retrieval: caption store metric is " + to_string(stores.captions->metric()));
    }
    for (auto& hit : stores.captions->search(query.embedding, config.k, exclude)) {
      ctx.captions.push_back(hit.entry.caption_text);
      ctx.source_entry_ids.push_back(hit.entry.entry_id);
      ctx.scores.push_back(hit.score);
    }
    return ctx;
  }

  if (stores.images == nullptr || stores.image_captions == nullptr) {
    throw std::invalid_argument("retrieval: image_image mode needs an image store and its captions");
  }
  if (stores.images->empty()) {
    ctx.store_was_empty = true;
    return ctx;
  }
  if (stores.images->metric() != config.metric) {
    throw std::invalid_argument("retrieval: image store metric is " + to_string(stores.images->metric()));
  }
  const auto pooled = pool_regions(query.regions);
  std::set<std::string> used;
  for (auto& hit : stores.images->search(pooled, stores.images->size(), exclude)) {
    if (ctx.captions.size() == config.k) break;
    if (!used.insert(hit.entry.image_id).second) continue;
    auto it = stores.image_captions->find(hit.entry.image_id);
    if (it == stores.image_captions->end() || it->second.empty()) continue;
    ctx.captions.push_back(it->second.front());
    ctx.source_entry_ids.push_back(hit.entry.entry_id);
    ctx.scores.push_back(hit.score);
  }
  return ctx;
}

RetrievedContext make_variant_context(const RetrievedContext& base, const VariantRequest& request) {
  RetrievedContext out;
  switch (request.variant) {
    case ContextVariant::empty:
      out.kind = ContextKind::empty;
      return out;
    case ContextVariant::random: {
      if (request.pool == nullptr) throw std::invalid_argument("random context: no caption pool");
      out.kind = ContextKind::random;
      const std::size_t n = request.pool->size();
      const std::size_t take = std::min(request.k, n);
      std::vector<std::size_t> rows(n);
      std::iota(rows.begin(), rows.end(), std::size_t{0});
      std::mt19937_64 rng(request.seed);
      for (std::size_t i = 0; i < take; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(rows[i], rows[pick(rng)]);
        const auto& e = request.pool->entry(rows[i]);
        out.captions.push_back(e.caption_text);
        out.source_entry_ids.push_back(e.entry_id);
        out.scores.push_back(std::numeric_limits<double>::quiet_NaN());
      }
      return out;
    }
    case ContextVariant::oracle: {
      const std::size_t k = base.captions.size();
      if (request.replace_count > k) {
        throw std::invalid_argument("oracle context: replace_count " + std::to_string(request.replace_count) +
                                    " exceeds " + std::to_string(k) + " retrieved captions");
      }
      if (request.references.size() < request.replace_count) {
        throw std::invalid_argument("oracle context: only " + std::to_string(request.references.size()) +
                                    " references for replace_count " + std::to_string(request.replace_count));
      }
      out = base;
      out.kind = request.replace_count > 0 ? ContextKind::oracle_mixed : base.kind;
      const std::size_t first = k - request.replace_count;
      for (std::size_t i = 0; i < request.replace_count; ++i) {
        out.captions[first + i] = request.references[i];
        if (first + i < out.source_entry_ids.size()) out.source_entry_ids[first + i] = -1;
        if (first + i < out.scores.size()) out.scores[first + i] = std::numeric_limits<double>::quiet_NaN();
      }
      return out;
    }
  }
  return out;
}

}  // namespace ragcap
