#include "ragcap/metrics.hpp"

#include "ragcap/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <stdexcept>

namespace ragcap {

namespace {

using Counts = std::map<std::string, std::size_t>;

std::array<Counts, 4> ngram_counts(const std::vector<std::string>& words) {
  std::array<Counts, 4> out;
  for (std::size_t n = 1; n <= 4; ++n) {
    for (std::size_t i = 0; i + n <= words.size(); ++i) {
      std::string key = words[i];
      for (std::size_t j = 1; j < n; ++j) key += ' ' + words[i + j];
      ++out[n - 1][key];
    }
  }
  return out;
}

std::vector<std::string> nonempty_tokens(const std::string& text, const char* what) {
  auto words = tokenize(text);
  if (words.empty()) throw std::invalid_argument(std::string(what) + " is empty after tokenization");
  return words;
}

}  // namespace

BleuDetail bleu4_detail(std::span<const EvalPair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("bleu4: no candidates");
  std::array<std::size_t, 4> matched{};
  std::array<std::size_t, 4> total{};
  BleuDetail d;
  for (const auto& p : pairs) {
    if (p.references.empty()) throw std::invalid_argument("bleu4: image " + p.image_id + " has no references");
    const auto cand = tokenize(p.candidate);
    const auto cand_counts = ngram_counts(cand);
    std::array<Counts, 4> max_ref;
    std::size_t closest = 0;
    bool first = true;
    for (const auto& r : p.references) {
      const auto ref = tokenize(r);
      // Closest length, the shorter one on ties.
      const auto diff = [&](std::size_t len) { return std::abs(static_cast<long>(len) - static_cast<long>(cand.size())); };
      if (first || diff(ref.size()) < diff(closest) || (diff(ref.size()) == diff(closest) && ref.size() < closest)) {
        closest = ref.size();
        first = false;
      }
      const auto rc = ngram_counts(ref);
      for (std::size_t n = 0; n < 4; ++n) {
        for (const auto& [g, c] : rc[n]) max_ref[n][g] = std::max(max_ref[n][g], c);
      }
    }
    for (std::size_t n = 0; n < 4; ++n) {
      for (const auto& [g, c] : cand_counts[n]) {
        auto it = max_ref[n].find(g);
        matched[n] += it == max_ref[n].end() ? 0 : std::min(c, it->second);
        total[n] += c;
      }
    }
    d.candidate_length += cand.size();
    d.reference_length += closest;
  }
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < 4; ++n) {
    d.precisions[n] = total[n] == 0 ? 0.0 : static_cast<double>(matched[n]) / static_cast<double>(total[n]);
    if (d.precisions[n] == 0.0) zero = true;
    else log_sum += std::log(d.precisions[n]);
  }
  const double c = static_cast<double>(d.candidate_length);
  const double r = static_cast<double>(d.reference_length);
  d.brevity_penalty = d.candidate_length == 0 ? 0.0 : (c > r ? 1.0 : std::exp(1.0 - r / c));
  d.score = zero ? 0.0 : d.brevity_penalty * std::exp(log_sum / 4.0);
  return d;
}

double bleu4(std::span<const EvalPair> pairs) { return bleu4_detail(pairs).score; }

// ---------------------------------------------------------------------------

CiderScorer::CiderScorer(const std::vector<std::vector<std::string>>& reference_corpus)
    : corpus_size_(reference_corpus.size()) {
  if (corpus_size_ < 2) throw std::invalid_argument("cider: idf corpus needs at least 2 images");
  for (const auto& refs : reference_corpus) {
    std::set<std::string> doc;
    for (const auto& r : refs) {
      for (const auto& counts : ngram_counts(tokenize(r))) {
        for (const auto& [g, c] : counts) doc.insert(g);
      }
    }
    for (const auto& g : doc) doc_freq_[g] += 1.0;
  }
}

double CiderScorer::idf(const std::string& ngram) const {
  auto it = doc_freq_.find(ngram);
  const double df = it == doc_freq_.end() ? 0.0 : it->second;
  return std::log(static_cast<double>(corpus_size_)) - std::log(std::max(1.0, df));
}

double CiderScorer::score(const std::string& candidate, const std::vector<std::string>& references) const {
  if (references.empty()) throw std::invalid_argument("cider: no references");
  struct Vec {
    std::array<std::map<std::string, double>, 4> weights;
    std::array<double, 4> norms{};
    std::size_t length = 0;
  };
  auto vectorize = [&](const std::vector<std::string>& words) {
    Vec v;
    v.length = words.size();
    const auto counts = ngram_counts(words);
    for (std::size_t n = 0; n < 4; ++n) {
      double sq = 0.0;
      for (const auto& [g, c] : counts[n]) {
        const double w = static_cast<double>(c) * idf(g);
        v.weights[n][g] = w;
        sq += w * w;
      }
      v.norms[n] = std::sqrt(sq);
    }
    return v;
  };
  const Vec cand = vectorize(nonempty_tokens(candidate, "cider: candidate"));
  std::array<double, 4> sums{};
  for (const auto& r : references) {
    const Vec ref = vectorize(nonempty_tokens(r, "cider: reference"));
    const double delta = static_cast<double>(cand.length) - static_cast<double>(ref.length);
    const double penalty = std::exp(-(delta * delta) / (2.0 * kSigma * kSigma));
    for (std::size_t n = 0; n < 4; ++n) {
      double dot = 0.0;
      for (const auto& [g, w] : cand.weights[n]) {
        auto it = ref.weights[n].find(g);
        if (it != ref.weights[n].end()) dot += std::min(w, it->second) * it->second;
      }
      const double denom = cand.norms[n] * ref.norms[n];
      sums[n] += denom == 0.0 ? 0.0 : dot / denom * penalty;
    }
  }
  double mean = 0.0;
  for (double s : sums) mean += s / static_cast<double>(references.size());
  return 10.0 * mean / 4.0;
}

CiderResult cider_d(std::span<const EvalPair> pairs, const std::vector<std::vector<std::string>>& idf_corpus) {
  if (pairs.empty()) throw std::invalid_argument("cider: no candidates");
  const CiderScorer scorer(idf_corpus);
  CiderResult out;
  double total = 0.0;
  for (const auto& p : pairs) {
    const double s = scorer.score(p.candidate, p.references);
    out.per_image[p.image_id] = s;
    total += s;
  }
  out.corpus = total / static_cast<double>(pairs.size());
  return out;
}

CiderResult cider_d(std::span<const EvalPair> pairs) {
  std::vector<std::vector<std::string>> corpus;
  corpus.reserve(pairs.size());
  for (const auto& p : pairs) corpus.push_back(p.references);
  return cider_d(pairs, corpus);
}

// ---------------------------------------------------------------------------

void write_caption_file(const std::filesystem::path& path, std::span<const EvalPair> pairs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("captions: cannot write " + path.string());
  for (const auto& p : pairs) {
    out << nlohmann::json{{"image_id", p.image_id}, {"candidate", p.candidate}, {"references", p.references}}.dump()
        << '\n';
  }
}

std::vector<EvalPair> read_caption_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("captions: cannot open " + path.string());
  std::vector<EvalPair> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      EvalPair p{j.at("image_id").get<std::string>(), j.at("candidate").get<std::string>(),
                 j.at("references").get<std::vector<std::string>>()};
      if (p.references.empty()) throw std::invalid_argument("no references");
      pairs.push_back(std::move(p));
    } catch (const std::exception& e) {
      throw std::invalid_argument("captions " + path.string() + ": line " + std::to_string(line_no) + ": " +
                                  e.what());
    }
  }
  return pairs;
}

MetricReport score_captions(std::span<const EvalPair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("score_captions: no candidates");
  MetricReport r;
  r.bleu4 = bleu4(pairs);
  std::vector<std::vector<std::string>> corpus;
  for (const auto& p : pairs) corpus.push_back(p.references);
  const CiderScorer scorer(corpus);
  double total = 0.0;
  for (const auto& p : pairs) {
    const double s = tokenize(p.candidate).empty() ? 0.0 : scorer.score(p.candidate, p.references);
    r.per_image[p.image_id] = s;
    total += s;
  }
  r.cider_d = total / static_cast<double>(pairs.size());
  return r;
}

void write_metric_report(const std::filesystem::path& path, const MetricReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("report: cannot write " + path.string());
  out << nlohmann::json{{"bleu4", report.bleu4}, {"cider_d", report.cider_d}, {"per_image", report.per_image}}.dump(2)
      << '\n';
}

}  // namespace ragcap
