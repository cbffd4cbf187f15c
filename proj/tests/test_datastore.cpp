#include "ragcap/binary_io.hpp"
#include "ragcap/datastore.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

using namespace ragcap;
namespace fs = std::filesystem;

namespace {

// Random entries over a few image ids; every seventh vector repeats an
// earlier one so the tie rule is exercised.
std::vector<DatastoreEntry> random_entries(std::size_t n, std::size_t dim, std::uint64_t seed, std::int64_t first = 0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<DatastoreEntry> out;
  for (std::size_t i = 0; i < n; ++i) {
    DatastoreEntry e;
    e.entry_id = first + static_cast<std::int64_t>(i);
    e.image_id = "img" + std::to_string(rng() % (n / 3 + 1));
    e.caption_text = "caption " + std::to_string(i);
    if (i >= 7 && i % 7 == 0) {
      e.vector = out[rng() % i].vector;
    } else {
      e.vector.resize(dim);
      for (double& v : e.vector) v = g(rng);
    }
    out.push_back(e);
  }
  return out;
}

std::vector<double> random_query(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> q(dim);
  for (double& v : q) v = g(rng);
  return q;
}

void check_against_oracle(const std::vector<DatastoreEntry>& entries, Metric metric, const std::vector<double>& q,
                          std::size_t k, const std::optional<std::string>& exclude) {
  const auto index = VectorIndex::build(entries, metric);
  std::optional<std::string_view> ex;
  if (exclude) ex = *exclude;
  const auto hits = index.search(q, k, ex);
  const auto expected = oracle::brute_force_search(entries, metric, q, k, exclude);
  REQUIRE(hits.size() == expected.size());
  for (std::size_t i = 0; i < hits.size(); ++i) {
    CHECK(hits[i].entry.entry_id == expected[i].entry_id);
    CHECK(std::abs(hits[i].score - expected[i].score) <= 1e-12);
  }
}

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("ragcap_ds_" + name); }

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("building an index") {
  std::vector<DatastoreEntry> e{{1, "a", "x", {1, 0, 0, 0}}, {2, "b", "y", {0, 1, 0, 0}}, {3, "c", "z", {0, 0, 1, 1}}};
  const auto index = VectorIndex::build(e, Metric::cosine);
  CHECK(index.size() == 3);
  CHECK(index.dimension() == 4);

  SUBCASE("zero vector under cosine") {
    e.push_back({4, "d", "w", {0, 0, 0, 0}});
    CHECK_THROWS(VectorIndex::build(e, Metric::cosine));
    CHECK_NOTHROW(VectorIndex::build(e, Metric::euclidean));
  }
  SUBCASE("mixed dimensions, duplicate ids, non-finite values") {
    auto bad = e;
    bad.push_back({5, "d", "w", {1, 2}});
    CHECK_THROWS(VectorIndex::build(bad, Metric::cosine));
    bad = e;
    bad.push_back({1, "d", "w", {1, 2, 3, 4}});
    CHECK_THROWS(VectorIndex::build(bad, Metric::cosine));
    bad = e;
    bad.push_back({9, "d", "w", {1, std::nan(""), 3, 4}});
    CHECK_THROWS(VectorIndex::build(bad, Metric::euclidean));
    CHECK_THROWS(VectorIndex::build(std::vector<DatastoreEntry>{}, Metric::cosine));
  }
}

TEST_CASE("cosine self-similarity and orthogonality") {
  std::vector<DatastoreEntry> e{{10, "a", "x", {0.6, 0.8}}, {11, "b", "y", {-0.8, 0.6}}};
  const auto index = VectorIndex::build(e, Metric::cosine);
  const std::vector<double> q{0.6, 0.8};
  const auto hits = index.search(q, 2);
  CHECK(hits[0].entry.entry_id == 10);
  CHECK(hits[0].score == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(std::abs(hits[1].score) < 1e-15);
}

TEST_CASE("search errors") {
  const auto index = VectorIndex::build(random_entries(10, 3, 1), Metric::cosine);
  const std::vector<double> wrong{1, 2};
  CHECK_THROWS(index.search(wrong, 1));
  const std::vector<double> zero{0, 0, 0};
  CHECK_THROWS(index.search(zero, 1));
  const std::vector<double> ok{1, 2, 3};
  CHECK_THROWS(index.search(ok, 0));
}

TEST_CASE("search matches a brute force scan on 1000 entries") {
  for (Metric metric : {Metric::cosine, Metric::euclidean}) {
    const auto entries = random_entries(1000, 8, metric == Metric::cosine ? 21 : 22);
    std::mt19937_64 rng(99);
    for (int q = 0; q < 50; ++q) {
      auto query = random_query(rng, 8);
      if (q % 5 == 0) query = entries[rng() % entries.size()].vector;  // exact hit plus its duplicates
      const std::optional<std::string> exclude =
          q % 2 ? std::optional<std::string>(entries[rng() % entries.size()].image_id) : std::nullopt;
      check_against_oracle(entries, metric, query, 5, exclude);
    }
  }
}

TEST_CASE("scores stay in range") {
  const auto entries = random_entries(200, 5, 4);
  const auto cos = VectorIndex::build(entries, Metric::cosine);
  const auto euc = VectorIndex::build(entries, Metric::euclidean);
  std::mt19937_64 rng(4);
  for (int i = 0; i < 20; ++i) {
    const auto q = random_query(rng, 5);
    for (const auto& h : cos.search(q, 200)) CHECK((h.score >= -1.0 && h.score <= 1.0 + 1e-15));
    for (const auto& h : euc.search(q, 200)) CHECK(h.score > 0.0);
  }
  CHECK(euc.search(entries[3].vector, 1)[0].score == 0.0);
}

TEST_CASE("merge") {
  const auto a = VectorIndex::build(random_entries(10, 4, 1, 0), Metric::cosine);
  const auto b = VectorIndex::build(random_entries(20, 4, 2, 100), Metric::cosine);
  CHECK(VectorIndex::merge(a, b).size() == 30);

  SUBCASE("exact match in the extra store wins") {
    std::vector<double> target{0.1, -0.2, 0.3, 0.4};
    auto extra = random_entries(20, 4, 3, 500);
    extra[7].vector = target;
    const auto merged = VectorIndex::merge(a, VectorIndex::build(extra, Metric::cosine));
    const auto top = merged.search(target, 1)[0];
    CHECK(top.entry.caption_text == extra[7].caption_text);
    CHECK(top.entry.entry_id == extra[7].entry_id + 10);  // re-offset past the primary ids
  }
  SUBCASE("an empty extra store changes nothing") {
    const VectorIndex empty(Metric::cosine, 4);
    const auto merged = VectorIndex::merge(a, empty);
    std::mt19937_64 rng(8);
    for (int i = 0; i < 20; ++i) {
      const auto q = random_query(rng, 4);
      const auto x = a.search(q, 5), y = merged.search(q, 5);
      REQUIRE(x.size() == y.size());
      for (std::size_t j = 0; j < x.size(); ++j) {
        CHECK(x[j].entry == y[j].entry);
        CHECK(x[j].score == y[j].score);
      }
    }
  }
  SUBCASE("associativity at the result level") {
    const auto c = VectorIndex::build(random_entries(15, 4, 9, 900), Metric::cosine);
    const auto left = VectorIndex::merge(VectorIndex::merge(a, b), c);
    const auto right = VectorIndex::merge(a, VectorIndex::merge(b, c));
    std::mt19937_64 rng(10);
    for (int i = 0; i < 20; ++i) {
      const auto q = random_query(rng, 4);
      const auto x = left.search(q, 7), y = right.search(q, 7);
      for (std::size_t j = 0; j < x.size(); ++j) CHECK(x[j].entry == y[j].entry);
    }
  }
  SUBCASE("incompatible stores") {
    CHECK_THROWS(VectorIndex::merge(a, VectorIndex(Metric::euclidean, 4)));
    CHECK_THROWS(VectorIndex::merge(a, VectorIndex(Metric::cosine, 5)));
  }
  SUBCASE("extra ids are re-offset to stay unique") {
    const auto twice = VectorIndex::merge(a, a);
    CHECK(twice.size() == 20);
    std::set<std::int64_t> ids;
    for (std::size_t r = 0; r < twice.size(); ++r) ids.insert(twice.entry(r).entry_id);
    CHECK(ids.size() == 20);
  }
}

TEST_CASE("save and load") {
  const auto entries = random_entries(100, 6, 12);
  const auto index = VectorIndex::build(entries, Metric::euclidean);
  const auto p1 = temp_file("a.xtds"), p2 = temp_file("b.xtds");
  index.save(p1);
  index.save(p2);
  CHECK(read_bytes(p1) == read_bytes(p2));

  const auto back = VectorIndex::load(p1);
  CHECK(back.metric() == Metric::euclidean);
  std::mt19937_64 rng(13);
  for (int i = 0; i < 20; ++i) {
    const auto q = random_query(rng, 6);
    const auto x = index.search(q, 5), y = back.search(q, 5);
    for (std::size_t j = 0; j < 5; ++j) {
      CHECK(x[j].entry == y[j].entry);
      CHECK(x[j].score == y[j].score);
    }
  }

  SUBCASE("wrong magic") {
    auto bytes = read_bytes(p1);
    bytes[0] = 'Z';
    std::ofstream(p2, std::ios::binary) << bytes;
    CHECK_THROWS_AS(VectorIndex::load(p2), FormatError);
  }
  SUBCASE("truncated file") {
    auto bytes = read_bytes(p1);
    bytes.resize(bytes.size() / 2);
    std::ofstream(p2, std::ios::binary) << bytes;
    CHECK_THROWS_AS(VectorIndex::load(p2), CorruptionError);
  }
  SUBCASE("missing file") { CHECK_THROWS(VectorIndex::load(temp_file("missing.xtds"))); }
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("metric names") {
  CHECK(parse_metric("cosine") == Metric::cosine);
  CHECK(parse_metric(to_string(Metric::euclidean)) == Metric::euclidean);
  CHECK_THROWS(parse_metric("manhattan"));
}
