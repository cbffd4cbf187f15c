#include "ragcap/metrics.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

using namespace ragcap;
namespace fs = std::filesystem;

namespace {

std::vector<EvalPair> toy_corpus() {
  return {
      {"i0", "a red cube on a table", {"a red cube on the table", "a small red cube", "red cube near a wall"}},
      {"i1", "a blue ball", {"a blue ball on the grass", "one blue ball"}},
      {"i2", "two green cones and a cube", {"two green cones", "green cones beside a cube", "a pair of green cones"}},
      {"i3", "a yellow star", {"a yellow star in the sky", "yellow star shape", "the star is yellow"}},
      {"i4", "a red ball under a blue cube", {"a blue cube above a red ball", "red ball and blue cube"}},
  };
}

std::vector<std::vector<std::string>> refs_of(const std::vector<EvalPair>& pairs) {
  std::vector<std::vector<std::string>> out;
  for (const auto& p : pairs) out.push_back(p.references);
  return out;
}

std::vector<oracle::Pair> oracle_pairs(const std::vector<EvalPair>& pairs) {
  std::vector<oracle::Pair> out;
  for (const auto& p : pairs) out.push_back({p.candidate, p.references});
  return out;
}

std::string random_caption(std::mt19937_64& rng, std::size_t len) {
  static const std::vector<std::string> words{"a", "red", "blue", "cube", "ball", "on", "the", "table", "green", "cone"};
  std::string s;
  for (std::size_t i = 0; i < len; ++i) s += (i ? " " : "") + words[rng() % words.size()];
  return s;
}

}  // namespace

TEST_CASE("BLEU-4 hand-worked example") {
  const std::vector<EvalPair> pairs{{"x", "the cat sat on the mat", {"the cat sat on a mat"}}};
  const auto d = bleu4_detail(pairs);
  CHECK(d.precisions[0] == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  CHECK(d.precisions[1] == doctest::Approx(3.0 / 5.0).epsilon(1e-15));
  CHECK(d.precisions[2] == doctest::Approx(2.0 / 4.0).epsilon(1e-15));
  CHECK(d.precisions[3] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(d.brevity_penalty == 1.0);
  // The four precisions multiply to 1/12.
  CHECK(std::abs(d.score - std::pow(1.0 / 12.0, 0.25)) < 1e-12);
  CHECK(std::abs(d.score - oracle::bleu4(oracle_pairs(pairs))) < 1e-12);
}

TEST_CASE("BLEU-4 trivial cases and errors") {
  const std::vector<EvalPair> perfect{{"a", "a red cube on the table", {"x y z", "a red cube on the table"}},
                                      {"b", "one blue ball sits here", {"one blue ball sits here"}}};
  CHECK(bleu4(perfect) == doctest::Approx(1.0).epsilon(1e-15));
  const std::vector<EvalPair> no_four{{"a", "red cube table blue", {"a red cube on the table"}}};
  CHECK(bleu4(no_four) == 0.0);
  CHECK_THROWS(bleu4(std::vector<EvalPair>{}));
}

TEST_CASE("BLEU-4 agrees with the independent oracle on random corpora") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<EvalPair> pairs;
    for (int i = 0; i < 6; ++i) {
      EvalPair p{"i" + std::to_string(i), random_caption(rng, 4 + rng() % 6), {}};
      for (int r = 0; r < 1 + static_cast<int>(rng() % 4); ++r) p.references.push_back(random_caption(rng, 3 + rng() % 7));
      pairs.push_back(p);
    }
    const double s = bleu4(pairs);
    CHECK(std::abs(s - oracle::bleu4(oracle_pairs(pairs))) < 1e-12);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
  }
}

TEST_CASE("brevity penalty never grows as the candidate shrinks") {
  const std::string ref = "a red cube on the table near a blue ball";
  double last = 2.0;
  for (std::size_t len = 10; len >= 4; --len) {
    std::string cand;
    std::size_t pos = 0;
    for (std::size_t w = 0; w < len; ++w) {
      const std::size_t end = std::min(ref.find(' ', pos), ref.size());
      cand += (w ? " " : "") + ref.substr(pos, end - pos);
      pos = end + 1;
    }
    const std::vector<EvalPair> p{{"x", cand, {ref}}};
    const double bp = bleu4_detail(p).brevity_penalty;
    CHECK(bp <= last);
    last = bp;
  }
}

TEST_CASE("CIDEr-D identical candidate scores ten") {
  // Four words or more, so every n-gram order contributes.
  const std::vector<EvalPair> pairs{{"a", "a red cube here", {"a red cube here"}},
                                    {"b", "one blue ball there", {"one blue ball there"}}};
  const auto r = cider_d(pairs);
  CHECK(std::abs(r.per_image.at("a") - 10.0) < 1e-9);
  CHECK(std::abs(r.per_image.at("b") - 10.0) < 1e-9);
  CHECK(std::abs(r.corpus - 10.0) < 1e-9);
}

TEST_CASE("CIDEr-D with no overlap is zero") {
  const CiderScorer s({{"a red cube"}, {"one blue ball"}});
  CHECK(s.score("green cone", {"a red cube"}) == 0.0);
}

TEST_CASE("CIDEr-D on a five image corpus matches the independent oracle") {
  const auto pairs = toy_corpus();
  const auto corpus = refs_of(pairs);
  const auto r = cider_d(pairs);
  double mean = 0.0;
  for (const auto& p : pairs) {
    const double expected = oracle::cider_d(p.candidate, p.references, corpus);
    CHECK(std::abs(r.per_image.at(p.image_id) - expected) < 1e-6);
    mean += expected;
  }
  CHECK(std::abs(r.corpus - mean / 5.0) < 1e-6);
}

TEST_CASE("CIDEr-D properties") {
  const auto pairs = toy_corpus();
  const auto corpus = refs_of(pairs);
  const CiderScorer scorer(corpus);
  std::mt19937_64 rng(8);

  SUBCASE("range and identity maximality") {
    for (const auto& p : pairs) {
      const double self = scorer.score(p.references[0], p.references);
      for (int t = 0; t < 40; ++t) {
        const double s = scorer.score(random_caption(rng, 2 + rng() % 7), p.references);
        CHECK(s >= 0.0);
        CHECK(s <= 10.0);
      }
      for (const auto& other : pairs) CHECK(scorer.score(other.candidate, p.references) <= self + 1e-12);
    }
  }
  SUBCASE("image order in the idf corpus does not matter") {
    auto shuffled = corpus;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const CiderScorer other(shuffled);
    for (const auto& p : pairs) CHECK(other.score(p.candidate, p.references) == scorer.score(p.candidate, p.references));
  }
  SUBCASE("idf uses one document per image") {
    CHECK(scorer.corpus_size() == 5);
    // "cube" appears in the references of three images.
    CHECK(std::abs(scorer.idf("cube") - std::log(5.0 / 3.0)) < 1e-12);
    CHECK(std::abs(scorer.idf("a blue") - std::log(5.0 / 2.0)) < 1e-12);
  }
}

TEST_CASE("CIDEr-D errors") {
  CHECK_THROWS(CiderScorer({{"only one image"}}));
  const CiderScorer s({{"a red cube"}, {"one blue ball"}});
  CHECK_THROWS(s.score("", {"a red cube"}));
  CHECK_THROWS(s.score("a red cube", {""}));
  CHECK_THROWS(s.score("a red cube", {}));
}

TEST_CASE("evaluation entry point scores an empty generation as zero") {
  auto pairs = toy_corpus();
  pairs[1].candidate = "";
  const auto report = score_captions(pairs);
  CHECK(report.per_image.at("i1") == 0.0);
  CHECK(report.cider_d > 0.0);
  CHECK(report.per_image.size() == 5);
}

TEST_CASE("caption and metric files") {
  const auto pairs = toy_corpus();
  const auto dir = fs::temp_directory_path() / "ragcap_metrics_test";
  fs::create_directories(dir);
  write_caption_file(dir / "captions.jsonl", pairs);
  const auto back = read_caption_file(dir / "captions.jsonl");
  REQUIRE(back.size() == pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK(back[i].image_id == pairs[i].image_id);
    CHECK(back[i].candidate == pairs[i].candidate);
    CHECK(back[i].references == pairs[i].references);
  }
  write_metric_report(dir / "metrics.json", score_captions(pairs));
  CHECK(fs::file_size(dir / "metrics.json") > 0);
  CHECK_THROWS(read_caption_file(dir / "absent.jsonl"));
  fs::remove_all(dir);
}
