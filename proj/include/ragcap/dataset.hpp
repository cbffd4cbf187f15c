#pragma once

// Dataset manifests, the XTFT feature-file format, validated ingestion and the
// synthetic scene generator used for desk-scale experiments.

#include "ragcap/datastore.hpp"
#include "ragcap/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace ragcap {

// "XTFT", u32 version=1, u32 rows, u32 dim, rows*dim little-endian f64.
void write_feature_file(const std::filesystem::path& path, const Tensor& matrix);
Tensor read_feature_file(const std::filesystem::path& path);

struct ManifestRecord {
  std::string image_id;
  std::vector<std::string> captions;
  std::string region_feature_file;      // relative to the manifest directory
  std::string retrieval_embedding_file;  // 1 x d_e
  std::string caption_embedding_file;   // |captions| x d_e, optional
};

struct DatasetManifest {
  std::string name;
  std::size_t regions = 0;  // N, constant over the dataset
  std::map<std::string, std::vector<ManifestRecord>> splits;  // train / val / test

  void save(const std::filesystem::path& path) const;
  static DatasetManifest load(const std::filesystem::path& path);
};

// Every problem found while validating a manifest, one per line.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct ImageRecord {
  std::string image_id;
  std::vector<std::string> captions;
  Tensor regions;                    // N x d_v
  std::vector<double> embedding;     // shared image/text space
  Tensor caption_embeddings;         // |captions| x d_e, empty when absent
};

struct Dataset {
  std::string name;
  std::size_t regions = 0;
  std::size_t region_dim = 0;
  std::size_t embedding_dim = 0;
  std::map<std::string, std::vector<ImageRecord>> splits;

  const std::vector<ImageRecord>& split(const std::string& name) const;
  std::vector<std::string> all_captions(const std::string& split_name) const;
};

// Loads and cross-checks every referenced file; throws ValidationError listing
// all problems (missing files, dimension mismatches, duplicate ids, ...).
Dataset ingest_dataset(const std::filesystem::path& manifest_path);

struct ToyDatasetOptions {
  std::uint64_t seed = 0;
  std::size_t train_images = 80;
  std::size_t val_images = 10;
  std::size_t test_images = 10;
  std::size_t regions = 8;  // N
  std::size_t region_dim = 32;
  std::size_t objects = 6;
  std::size_t attributes = 4;
  std::size_t min_concepts = 2;
  std::size_t max_concepts = 3;
  std::size_t min_captions = 2;
  std::size_t max_captions = 5;
  double feature_noise = 0.1;
  double embedding_noise = 0.05;
  std::string name = "toy";
};

// Writes features, embeddings and manifest.json under out_dir and returns the
// manifest. Deterministic given the options.
DatasetManifest generate_toy_dataset(const ToyDatasetOptions& options, const std::filesystem::path& out_dir);

// Caption words of the toy ontology, for tests that need to reason about
// scene content.
const std::vector<std::string>& toy_object_names();
const std::vector<std::string>& toy_attribute_names();
// "attribute object" pairs mentioned in a caption, in order of appearance.
std::vector<std::string> toy_concepts_in(const std::string& caption);

// Datastores built from one split: one caption entry per caption (cosine over
// caption embeddings), one image entry per image (Euclidean over pooled
// regions) and the caption lists the image store points to.
struct RetrievalResources {
  VectorIndex captions{Metric::cosine, 1};
  VectorIndex images{Metric::euclidean, 1};
  std::map<std::string, std::vector<std::string>> image_captions;
};

RetrievalResources build_retrieval_resources(const std::vector<ImageRecord>& images);
std::vector<DatastoreEntry> caption_entries(const std::vector<ImageRecord>& images, std::int64_t first_id = 0);
std::vector<DatastoreEntry> image_entries(const std::vector<ImageRecord>& images, std::int64_t first_id = 0);

}  // namespace ragcap
