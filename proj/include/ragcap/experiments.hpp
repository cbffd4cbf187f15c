#pragma once

// Glue between datasets, retrieval, training and evaluation: building model
// inputs for a context condition, the ablation experiments and their reports.

#include "ragcap/analysis.hpp"
#include "ragcap/dataset.hpp"
#include "ragcap/model.hpp"
#include "ragcap/retrieval.hpp"
#include "ragcap/training.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace ragcap {

// How the linguistic input of every image is produced.
struct ContextSetup {
  RetrievalConfig retrieval;                // mode, k, metric, self exclusion
  std::optional<ContextVariant> variant;    // none: plain retrieval
  std::size_t replace_count = 0;            // oracle
  bool blacked_image = false;               // zero all region features

  std::string label() const;
};

// One example per image. Random contexts are drawn with a per-image seed
// derived from `seed`. With first_caption_only only the first caption becomes
// a training target (references always keep every caption).
std::vector<TrainingExample> make_examples(const CaptionModel& model, const std::vector<ImageRecord>& images,
                                           const RetrievalResources& stores, const ContextSetup& setup,
                                           std::uint64_t seed, bool first_caption_only = false);

// Settings shared by the CLI and the experiment runner. Loaded from a JSON
// file with optional "model", "train", "scst" and "retrieval" objects.
struct RunConfig {
  ModelConfig model = ModelConfig::toy();
  TrainConfig train;
  ScstConfig scst;
  RetrievalConfig retrieval;
};

RunConfig load_run_config(const std::filesystem::path& path);
RunConfig run_config_from_json(std::string_view text);

enum class ExperimentKind : std::uint8_t {
  k_sweep,
  context_variant,
  blacked_image,
  retrieval_mode,
  oracle,
  datastore_swap,
  attention_analysis,
  histogram,
};

std::string to_string(ExperimentKind kind);
ExperimentKind parse_experiment_kind(std::string_view name);

struct ExperimentSpec {
  std::string id;
  ExperimentKind kind = ExperimentKind::k_sweep;
  std::vector<std::size_t> k_values{1, 3, 5};
  std::vector<ContextVariant> variants{ContextVariant::empty, ContextVariant::random};
  std::vector<std::size_t> replace_counts{0, 1, 5};
  std::filesystem::path extra_store;  // datastore_swap; empty means an empty extra store
  std::vector<std::uint64_t> seeds{0};
  std::string split = "test";
  std::size_t beam_width = 3;
  std::size_t k = 5;
  // Train a fresh model per seed and condition instead of reusing the
  // checkpoint (context_variant, blacked_image, retrieval_mode, oracle).
  bool retrain = false;
};

// Every inconsistency between the kind and its parameters.
std::vector<std::string> validate_spec(const ExperimentSpec& spec);
ExperimentSpec experiment_spec_from_json(std::string_view text);
std::string experiment_spec_to_json(const ExperimentSpec& spec);

struct ReportRow {
  std::string condition;
  std::uint64_t seed = 0;
  std::string checkpoint;  // hash of the checkpoint, or "trained:<condition>:<seed>"
  double bleu4 = 0.0;
  double cider_d = 0.0;
};

struct ExperimentReport {
  ExperimentSpec spec;
  std::vector<ReportRow> rows;
  std::optional<AttentionSummary> attention;
  std::vector<HistogramReport> histograms;

  // Mean CIDEr-D over the rows of one condition.
  double mean_cider(const std::string& condition) const;
  double mean_bleu(const std::string& condition) const;
};

// <dir>/<id>.json and <dir>/<id>.csv, plus attention / histogram side files.
void write_report(const ExperimentReport& report, const std::filesystem::path& dir);

class ExperimentRunner {
 public:
  ExperimentRunner(const Dataset& dataset, RunConfig config, std::ostream* log = nullptr);

  const RetrievalResources& stores() const { return stores_; }
  const Vocabulary& vocab() const { return vocab_; }

  // Trains a model under `setup` (once per setup and seed; later calls reuse it).
  const CaptionModel& trained(const ContextSetup& setup, std::uint64_t seed);

  Evaluation evaluate(const CaptionModel& model, const ContextSetup& setup, const std::string& split,
                      std::uint64_t seed, std::size_t beam_width, const RetrievalResources* stores = nullptr) const;

  // `checkpoint` is used whenever the spec does not ask for retraining.
  ExperimentReport run(const ExperimentSpec& spec, const CaptionModel* checkpoint, const std::string& checkpoint_hash);

 private:
  const Dataset& dataset_;
  RunConfig config_;
  std::ostream* log_;
  Vocabulary vocab_;
  RetrievalResources stores_;
  std::map<std::string, std::unique_ptr<CaptionModel>> cache_;
};

// A copy of the given images' captions under fresh image ids, so that self
// exclusion does not hide them: the constructed exact-match extra store.
VectorIndex exact_match_store(const std::vector<ImageRecord>& images, const std::string& id_prefix = "extra/");

}  // namespace ragcap
