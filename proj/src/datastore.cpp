#include "ragcap/datastore.hpp"

#include "ragcap/binary_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace ragcap {

namespace {

constexpr std::string_view kMagic = "XTDS";
constexpr std::uint32_t kVersion = 1;

std::vector<double> normalized(std::span<const double> v, const char* what) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double norm = std::sqrt(sq);
  if (!(norm > 0.0)) throw std::invalid_argument(std::string(what) + ": zero vector has no cosine direction");
  std::vector<double> out(v.begin(), v.end());
  for (auto& x : out) x /= norm;
  return out;
}

}  // namespace

std::string to_string(Metric metric) { return metric == Metric::cosine ? "cosine" : "euclidean"; }

Metric parse_metric(std::string_view name) {
  if (name == "cosine") return Metric::cosine;
  if (name == "euclidean") return Metric::euclidean;
  throw std::invalid_argument("unknown metric '" + std::string(name) + "'");
}

VectorIndex::VectorIndex(Metric metric, std::size_t dim) : metric_(metric), dim_(dim) {
  if (dim == 0) throw std::invalid_argument("datastore: dimension must be positive");
}

VectorIndex VectorIndex::build(std::span<const DatastoreEntry> entries, Metric metric) {
  if (entries.empty()) throw std::invalid_argument("datastore: cannot build from zero entries");
  const std::size_t dim = entries.front().vector.size();
  VectorIndex index(metric, dim);
  index.matrix_.reserve(entries.size() * dim);
  index.entries_.reserve(entries.size());
  std::set<std::int64_t> seen;
  for (const auto& e : entries) {
    if (e.vector.size() != dim) {
      throw std::invalid_argument("datastore: entry " + std::to_string(e.entry_id) + " has dimension " +
                                  std::to_string(e.vector.size()) + ", expected " + std::to_string(dim));
    }
    if (!std::all_of(e.vector.begin(), e.vector.end(), [](double x) { return std::isfinite(x); })) {
      throw std::invalid_argument("datastore: entry " + std::to_string(e.entry_id) + " is not finite");
    }
    if (!seen.insert(e.entry_id).second) {
      throw std::invalid_argument("datastore: duplicate entry_id " + std::to_string(e.entry_id));
    }
    if (metric == Metric::cosine) {
      auto unit = normalized(e.vector, "datastore");
      index.matrix_.insert(index.matrix_.end(), unit.begin(), unit.end());
    } else {
      index.matrix_.insert(index.matrix_.end(), e.vector.begin(), e.vector.end());
    }
    index.entries_.push_back({e.entry_id, e.image_id, e.caption_text});
  }
  return index;
}

std::vector<double> VectorIndex::prepare_query(std::span<const double> query) const {
  if (query.size() != dim_) {
    throw std::invalid_argument("datastore: query dimension " + std::to_string(query.size()) + ", expected " +
                                std::to_string(dim_));
  }
  if (metric_ == Metric::cosine) return normalized(query, "datastore query");
  return {query.begin(), query.end()};
}

double VectorIndex::score(std::span<const double> q, std::size_t row) const {
  const double* v = matrix_.data() + row * dim_;
  double acc = 0.0;
  if (metric_ == Metric::cosine) {
    for (std::size_t i = 0; i < dim_; ++i) acc += q[i] * v[i];
    return acc;
  }
  for (std::size_t i = 0; i < dim_; ++i) {
    const double d = q[i] - v[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

std::vector<SearchHit> VectorIndex::search(std::span<const double> query, std::size_t k,
                                           std::optional<std::string_view> exclude_image_id) const {
  if (k < 1) throw std::invalid_argument("datastore: k must be at least 1");
  const auto q = prepare_query(query);
  struct Scored {
    double score;
    std::size_t row;
  };
  std::vector<Scored> scored;
  scored.reserve(entries_.size());
  for (std::size_t r = 0; r < entries_.size(); ++r) {
    if (exclude_image_id && entries_[r].image_id == *exclude_image_id) continue;
    scored.push_back({score(q, r), r});
  }
  const std::size_t take = std::min(k, scored.size());
  auto order = [this](const Scored& a, const Scored& b) {
    if (a.score != b.score) return better(a.score, b.score);
    return entries_[a.row].entry_id < entries_[b.row].entry_id;
  };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(), order);
  std::vector<SearchHit> hits;
  hits.reserve(take);
  for (std::size_t i = 0; i < take; ++i) hits.push_back({entries_[scored[i].row], scored[i].score, scored[i].row});
  return hits;
}

VectorIndex VectorIndex::merge(const VectorIndex& primary, const VectorIndex& extra) {
  if (primary.metric_ != extra.metric_) throw std::invalid_argument("datastore merge: metric mismatch");
  if (primary.dim_ != extra.dim_) throw std::invalid_argument("datastore merge: dimension mismatch");
  std::int64_t max_id = -1;
  for (const auto& e : primary.entries_) max_id = std::max(max_id, e.entry_id);
  const std::int64_t offset = max_id + 1;
  VectorIndex out(primary.metric_, primary.dim_);
  out.matrix_ = primary.matrix_;
  out.matrix_.insert(out.matrix_.end(), extra.matrix_.begin(), extra.matrix_.end());
  out.entries_ = primary.entries_;
  for (auto e : extra.entries_) {
    e.entry_id += offset;
    out.entries_.push_back(std::move(e));
  }
  return out;
}

void VectorIndex::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("datastore: cannot write " + path.string());
  binary::write_bytes(out, kMagic);
  binary::write<std::uint32_t>(out, kVersion);
  binary::write<std::uint8_t>(out, static_cast<std::uint8_t>(metric_));
  binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(dim_));
  binary::write<std::uint64_t>(out, static_cast<std::uint64_t>(entries_.size()));
  binary::write_doubles(out, matrix_);
  nlohmann::json meta = nlohmann::json::array();
  for (const auto& e : entries_) {
    meta.push_back({{"entry_id", e.entry_id}, {"image_id", e.image_id}, {"caption_text", e.caption_text}});
  }
  const std::string text = meta.dump();
  binary::write<std::uint64_t>(out, static_cast<std::uint64_t>(text.size()));
  binary::write_bytes(out, text);
  if (!out) throw std::runtime_error("datastore: write failed for " + path.string());
}

VectorIndex VectorIndex::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("datastore: cannot open " + path.string());
  const std::string what = "datastore " + path.string();
  binary::expect_magic(in, kMagic, what);
  const auto version = binary::read<std::uint32_t>(in, what);
  if (version != kVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto metric_code = binary::read<std::uint8_t>(in, what);
  if (metric_code > 1) throw FormatError(what + ": unknown metric code " + std::to_string(metric_code));
  const auto dim = binary::read<std::uint32_t>(in, what);
  const auto count = binary::read<std::uint64_t>(in, what);
  if (dim == 0) throw FormatError(what + ": zero dimension");
  if (count > binary::remaining(in) / (sizeof(double) * dim)) throw CorruptionError(what + ": truncated file");
  VectorIndex index(static_cast<Metric>(metric_code), dim);
  index.matrix_ = binary::read_doubles(in, count * dim, what);
  const auto meta_size = binary::read<std::uint64_t>(in, what);
  if (meta_size > binary::remaining(in)) throw CorruptionError(what + ": truncated file");
  const std::string text = binary::read_string(in, meta_size, what);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(what + ": metadata is not valid JSON (" + e.what() + ")");
  }
  if (!meta.is_array() || meta.size() != count) throw CorruptionError(what + ": metadata count mismatch");
  index.entries_.reserve(count);
  for (const auto& m : meta) {
    index.entries_.push_back(
        {m.at("entry_id").get<std::int64_t>(), m.at("image_id").get<std::string>(), m.at("caption_text").get<std::string>()});
  }
  return index;
}

}  // namespace ragcap
