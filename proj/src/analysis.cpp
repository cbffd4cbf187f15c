#include "ragcap/analysis.hpp"

#include "ragcap/text.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace ragcap {

AttentionSummary attention_mass(const std::vector<AttentionRecord>& records, std::size_t visual_length,
                                std::size_t text_length) {
  if (records.empty()) throw std::invalid_argument("attention_mass: no records");
  const std::size_t positions = visual_length + text_length;
  const std::size_t layers = records.front().weights.size();
  if (layers == 0) throw std::invalid_argument("attention_mass: records carry no layers");
  AttentionSummary out;
  out.visual.assign(layers, 0.0);
  out.textual_direct.assign(layers, 0.0);
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& rec = records[r];
    if (rec.weights.size() != layers) {
      throw std::invalid_argument("attention_mass: record " + std::to_string(r) + " has " +
                                  std::to_string(rec.weights.size()) + " layers, expected " + std::to_string(layers));
    }
    for (std::size_t l = 0; l < layers; ++l) {
      const auto& heads = rec.weights[l];
      if (heads.empty()) throw std::invalid_argument("attention_mass: layer without heads");
      double visual = 0.0;
      double textual = 0.0;
      for (const auto& steps : heads) {
        if (steps.empty()) throw std::invalid_argument("attention_mass: head without steps");
        double v_steps = 0.0;
        double t_steps = 0.0;
        for (const auto& alpha : steps) {
          if (alpha.size() != positions) {
            throw std::invalid_argument("attention_mass: record " + std::to_string(r) + " has an attention vector of length " +
                                        std::to_string(alpha.size()) + ", expected " + std::to_string(positions));
          }
          for (std::size_t i = 0; i < visual_length; ++i) v_steps += alpha[i];
          for (std::size_t i = visual_length; i < positions; ++i) t_steps += alpha[i];
        }
        visual += v_steps / static_cast<double>(steps.size());
        textual += t_steps / static_cast<double>(steps.size());
      }
      out.visual[l] += visual / static_cast<double>(heads.size());
      out.textual_direct[l] += textual / static_cast<double>(heads.size());
    }
  }
  const double n = static_cast<double>(records.size());
  out.captions = records.size();
  out.textual.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    out.visual[l] /= n;
    out.textual_direct[l] /= n;
    out.textual[l] = 1.0 - out.visual[l];
  }
  return out;
}

void write_attention_summary(const std::filesystem::path& json_path, const std::filesystem::path& csv_path,
                             const AttentionSummary& s) {
  std::ofstream j(json_path, std::ios::trunc);
  if (!j) throw std::runtime_error("cannot write " + json_path.string());
  j << nlohmann::json{{"captions", s.captions},
                      {"visual", s.visual},
                      {"textual", s.textual},
                      {"textual_direct", s.textual_direct}}
           .dump(2)
    << '\n';
  std::ofstream c(csv_path, std::ios::trunc);
  if (!c) throw std::runtime_error("cannot write " + csv_path.string());
  c.precision(17);
  c << "layer,visual,textual\n";
  for (std::size_t l = 0; l < s.visual.size(); ++l) c << l + 1 << ',' << s.visual[l] << ',' << s.textual[l] << '\n';
}

// ---------------------------------------------------------------------------

std::size_t HistogramReport::bucket(double score) {
  if (!(score >= 0.0)) throw std::invalid_argument("histogram: negative score");
  const auto b = static_cast<std::size_t>(std::floor(score / (kMaxScore / kBuckets)));
  return std::min(b, kBuckets - 1);
}

HistogramReport retrieval_quality_histogram(const std::vector<HistogramQuery>& queries, const RetrievalStores& stores,
                                            RetrievalConfig config, const CiderScorer& scorer) {
  config.k = 1;
  HistogramReport out;
  out.mode = to_string(config.mode);
  for (std::size_t i = 0; i <= HistogramReport::kBuckets; ++i) {
    out.edges[i] = HistogramReport::kMaxScore * static_cast<double>(i) / HistogramReport::kBuckets;
  }
  for (const auto& q : queries) {
    const RetrievedContext ctx = retrieve_context(q.query, stores, config);
    if (ctx.store_was_empty) throw std::invalid_argument("histogram: empty datastore");
    if (ctx.captions.empty()) {
      throw std::invalid_argument("histogram: no eligible caption for image " + q.query.image_id);
    }
    const double s = tokenize(ctx.captions.front()).empty() ? 0.0 : scorer.score(ctx.captions.front(), q.references);
    out.scores.push_back(s);
    if (s == 0.0) ++out.zero_count;
    else ++out.counts[HistogramReport::bucket(s)];
    ++out.total;
  }
  return out;
}

void write_histogram(const std::filesystem::path& json_path, const std::filesystem::path& csv_path,
                     const HistogramReport& r) {
  std::ofstream j(json_path, std::ios::trunc);
  if (!j) throw std::runtime_error("cannot write " + json_path.string());
  j << nlohmann::json{{"mode", r.mode},
                      {"edges", r.edges},
                      {"counts", r.counts},
                      {"zero_count", r.zero_count},
                      {"zero_fraction", r.zero_fraction()},
                      {"total", r.total}}
           .dump(2)
    << '\n';
  std::ofstream c(csv_path, std::ios::trunc);
  if (!c) throw std::runtime_error("cannot write " + csv_path.string());
  c << "mode,lower,upper,count\n";
  c << r.mode << ",0,0," << r.zero_count << '\n';
  for (std::size_t b = 0; b < HistogramReport::kBuckets; ++b) {
    c << r.mode << ',' << r.edges[b] << ',' << r.edges[b + 1] << ',' << r.counts[b] << '\n';
  }
}

}  // namespace ragcap
