#pragma once

// Corpus BLEU-4 and CIDEr-D computed from scratch over the shared tokenizer.

#include <array>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ragcap {

struct EvalPair {
  std::string image_id;
  std::string candidate;
  std::vector<std::string> references;
};

struct BleuDetail {
  std::array<double, 4> precisions{};  // clipped n-gram precisions
  double brevity_penalty = 0.0;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;  // summed closest reference lengths
  double score = 0.0;
};

// Corpus-level, unsmoothed: 0 whenever any precision is 0.
BleuDetail bleu4_detail(std::span<const EvalPair> pairs);
double bleu4(std::span<const EvalPair> pairs);

// CIDEr-D with document frequencies fixed at construction. A document is the
// set of n-grams over all references of one image.
class CiderScorer {
 public:
  explicit CiderScorer(const std::vector<std::vector<std::string>>& reference_corpus);

  // 10 * mean over n of mean over references of the clipped, length-penalized
  // tf-idf cosine. In [0, 10].
  double score(const std::string& candidate, const std::vector<std::string>& references) const;

  std::size_t corpus_size() const { return corpus_size_; }
  double idf(const std::string& ngram) const;  // ngram as space-joined words

  static constexpr double kSigma = 6.0;

 private:
  std::size_t corpus_size_ = 0;
  std::unordered_map<std::string, double> doc_freq_;
};

struct CiderResult {
  double corpus = 0.0;  // mean of per-image scores
  std::map<std::string, double> per_image;
};

CiderResult cider_d(std::span<const EvalPair> pairs, const std::vector<std::vector<std::string>>& idf_corpus);
// Uses the pairs' own references as the idf corpus.
CiderResult cider_d(std::span<const EvalPair> pairs);

// One JSON object per line: {image_id, candidate, references}.
void write_caption_file(const std::filesystem::path& path, std::span<const EvalPair> pairs);
std::vector<EvalPair> read_caption_file(const std::filesystem::path& path);

struct MetricReport {
  double bleu4 = 0.0;
  double cider_d = 0.0;
  std::map<std::string, double> per_image;  // CIDEr-D
};

// Evaluation entry point: idf over the pairs' references, and a generated
// caption that is empty (the model emitted EOS at once) scores 0 instead of
// raising.
MetricReport score_captions(std::span<const EvalPair> pairs);
// {bleu4, cider_d, per_image: {...}}
void write_metric_report(const std::filesystem::path& path, const MetricReport& report);

}  // namespace ragcap
