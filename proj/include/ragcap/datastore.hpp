#pragma once

// Exact (flat, linear-scan) vector datastore of captions or images.
//
// On-disk layout, all integers little-endian:
//   "XTDS" | u32 version=1 | u8 metric | u32 dim | u64 count
//   | count*dim f64 vectors (normalized copies under cosine)
//   | u64 n | n bytes UTF-8 JSON [{entry_id, image_id, caption_text}, ...]

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ragcap {

enum class Metric : std::uint8_t { cosine = 0, euclidean = 1 };

std::string to_string(Metric metric);
Metric parse_metric(std::string_view name);

struct DatastoreEntry {
  std::int64_t entry_id = 0;
  std::string image_id;
  std::string caption_text;  // empty for image stores
  std::vector<double> vector;
};

struct EntryInfo {
  std::int64_t entry_id = 0;
  std::string image_id;
  std::string caption_text;

  friend bool operator==(const EntryInfo&, const EntryInfo&) = default;
};

struct SearchHit {
  EntryInfo entry;
  // Cosine similarity (higher is closer) or Euclidean distance (lower is closer).
  double score = 0.0;
  std::size_t row = 0;  // position inside the index
};

class VectorIndex {
 public:
  // Empty index; useful as a merge identity.
  VectorIndex(Metric metric, std::size_t dim);

  static VectorIndex build(std::span<const DatastoreEntry> entries, Metric metric);

  // min(k, eligible) hits, best first; ties go to the smaller entry_id.
  std::vector<SearchHit> search(std::span<const double> query, std::size_t k,
                                std::optional<std::string_view> exclude_image_id = std::nullopt) const;

  // Entries of `extra` get ids shifted past the largest id of `primary`.
  static VectorIndex merge(const VectorIndex& primary, const VectorIndex& extra);

  void save(const std::filesystem::path& path) const;
  static VectorIndex load(const std::filesystem::path& path);

  Metric metric() const { return metric_; }
  std::size_t dimension() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const EntryInfo& entry(std::size_t row) const { return entries_[row]; }
  std::span<const double> vector(std::size_t row) const { return {matrix_.data() + row * dim_, dim_}; }

  // Similarity/distance between a (prepared) query and a stored row.
  double score(std::span<const double> prepared_query, std::size_t row) const;
  // Normalizes the query under cosine, copies it under Euclidean.
  std::vector<double> prepare_query(std::span<const double> query) const;
  // True when score a ranks ahead of score b.
  bool better(double a, double b) const { return metric_ == Metric::cosine ? a > b : a < b; }

 private:
  Metric metric_;
  std::size_t dim_;
  std::vector<double> matrix_;
  std::vector<EntryInfo> entries_;
};

}  // namespace ragcap
