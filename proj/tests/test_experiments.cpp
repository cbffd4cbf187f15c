#include "ragcap/experiments.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace ragcap;
namespace fs = std::filesystem;

namespace {

std::string bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("ragcap_exp_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ToyDatasetOptions small_options(std::uint64_t seed) {
  ToyDatasetOptions o;
  o.seed = seed;
  o.train_images = 30;
  o.val_images = 10;
  o.test_images = 10;
  return o;
}

bool any_problem_contains(const ValidationError& e, const std::string& needle) {
  return std::any_of(e.problems().begin(), e.problems().end(),
                     [&](const std::string& p) { return p.find(needle) != std::string::npos; });
}

}  // namespace

TEST_CASE("toy generator is deterministic") {
  const auto a = scratch("gen_a"), b = scratch("gen_b");
  generate_toy_dataset(small_options(4), a);
  generate_toy_dataset(small_options(4), b);
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), a);
    REQUIRE(fs::exists(b / rel));
    CHECK(bytes_of(entry.path()) == bytes_of(b / rel));
    ++files;
  }
  CHECK(files > 50);
  const auto c = scratch("gen_c");
  generate_toy_dataset(small_options(5), c);
  CHECK(bytes_of(a / "manifest.json") != bytes_of(c / "manifest.json"));
  fs::remove_all(a);
  fs::remove_all(b);
  fs::remove_all(c);
}

TEST_CASE("toy dataset contents") {
  const auto dir = scratch("contents");
  ToyDatasetOptions o;
  o.seed = 2;
  o.train_images = 100;
  o.val_images = 10;
  o.test_images = 10;
  o.min_captions = 3;
  o.max_captions = 3;
  const auto manifest = generate_toy_dataset(o, dir);
  const Dataset ds = ingest_dataset(dir / "manifest.json");
  CHECK(ds.split("train").size() == 100);
  CHECK(ds.split("val").size() == 10);
  CHECK(ds.regions == 8);
  CHECK(ds.region_dim == 32);
  CHECK(manifest.splits.at("test").size() == 10);

  const auto stores = build_retrieval_resources(ds.split("train"));
  CHECK(stores.captions.size() == 300);
  CHECK(stores.images.size() == 100);

  // The nearest caption from another image shares a concept with the scene.
  std::size_t overlapping = 0;
  for (const auto& img : ds.split("train")) {
    std::set<std::string> scene;
    for (const auto& c : img.captions) {
      for (const auto& concept_name : toy_concepts_in(c)) scene.insert(concept_name);
    }
    const auto hit = stores.captions.search(img.embedding, 1, img.image_id);
    REQUIRE(hit.size() == 1);
    const auto found = toy_concepts_in(hit[0].entry.caption_text);
    overlapping += std::any_of(found.begin(), found.end(), [&](const std::string& c) { return scene.count(c) != 0; });
  }
  MESSAGE("k=1 concept overlap: " << overlapping << "/100");
  CHECK(overlapping >= 90);
  fs::remove_all(dir);
}

TEST_CASE("generator rejects tiny datasets") {
  ToyDatasetOptions o;
  o.train_images = 5;
  o.val_images = 2;
  o.test_images = 2;
  CHECK_THROWS(generate_toy_dataset(o, scratch("tiny")));
  o.max_captions = 40;
  CHECK_THROWS(generate_toy_dataset(o, scratch("tiny")));
}

TEST_CASE("ingestion diagnostics") {
  const auto dir = scratch("ingest");
  auto manifest = generate_toy_dataset(small_options(7), dir);

  SUBCASE("region file with the wrong number of rows names the file") {
    const auto& rec = manifest.splits.at("train")[3];
    write_feature_file(dir / rec.region_feature_file, Tensor::matrix(5, 32));
    try {
      ingest_dataset(dir / "manifest.json");
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(any_problem_contains(e, rec.region_feature_file));
    }
  }
  SUBCASE("duplicate image ids across splits") {
    manifest.splits.at("test").push_back(manifest.splits.at("train")[0]);
    manifest.save(dir / "manifest.json");
    try {
      ingest_dataset(dir / "manifest.json");
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(any_problem_contains(e, manifest.splits.at("train")[0].image_id));
    }
  }
  SUBCASE("every problem is reported at once") {
    fs::remove(dir / manifest.splits.at("train")[1].region_feature_file);
    fs::remove(dir / manifest.splits.at("val")[2].retrieval_embedding_file);
    try {
      ingest_dataset(dir / "manifest.json");
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(e.problems().size() >= 2);
    }
  }
  SUBCASE("image without captions") {
    manifest.splits.at("val")[0].captions.clear();
    manifest.save(dir / "manifest.json");
    CHECK_THROWS_AS(ingest_dataset(dir / "manifest.json"), ValidationError);
  }
  SUBCASE("corrupt feature file") {
    std::ofstream(dir / manifest.splits.at("train")[2].region_feature_file, std::ios::binary) << "XTFTjunk";
    CHECK_THROWS_AS(ingest_dataset(dir / "manifest.json"), ValidationError);
  }
  CHECK_THROWS(ingest_dataset(dir / "absent.json"));
  fs::remove_all(dir);
}

TEST_CASE("experiment specs") {
  ExperimentSpec s;
  s.id = "sweep";
  CHECK(validate_spec(s).empty());
  const auto back = experiment_spec_from_json(experiment_spec_to_json(s));
  CHECK(experiment_spec_to_json(back) == experiment_spec_to_json(s));

  s.kind = ExperimentKind::oracle;
  s.replace_counts = {0, 1, 6};
  CHECK_FALSE(validate_spec(s).empty());
  s.kind = ExperimentKind::datastore_swap;
  s.retrain = true;
  CHECK_FALSE(validate_spec(s).empty());
  s = ExperimentSpec{};
  CHECK_FALSE(validate_spec(s).empty());  // no id
  s.id = "v";
  s.kind = ExperimentKind::context_variant;
  s.variants = {ContextVariant::oracle};
  CHECK_FALSE(validate_spec(s).empty());

  CHECK_THROWS(experiment_spec_from_json(R"({"id": "x", "kind": "nonsense"})"));
  CHECK_THROWS(experiment_spec_from_json(R"({"id": "x", "kind": "k_sweep", "colour": 1})"));
  CHECK(experiment_spec_from_json(R"({"id": "x", "kind": "oracle", "replace_counts": [0, 5]})").kind ==
        ExperimentKind::oracle);
  for (auto k : {ExperimentKind::k_sweep, ExperimentKind::histogram, ExperimentKind::datastore_swap}) {
    CHECK(parse_experiment_kind(to_string(k)) == k);
  }
}

TEST_CASE("run configuration") {
  const auto c = run_config_from_json(R"({"train": {"max_epochs": 3, "learning_rate": 0.01}, "retrieval": {"k": 4}})");
  CHECK(c.train.max_epochs == 3);
  CHECK(c.train.learning_rate == 0.01);
  CHECK(c.retrieval.k == 4);
  CHECK_THROWS(run_config_from_json(R"({"trian": {}})"));
  CHECK_THROWS(run_config_from_json(R"({"train": {"max_epochs": "three"}})"));
}

TEST_CASE("experiment runner") {
  const auto dir = scratch("runner");
  generate_toy_dataset(small_options(3), dir / "data");
  const Dataset ds = ingest_dataset(dir / "data" / "manifest.json");
  RunConfig cfg;
  cfg.train.max_epochs = 3;
  cfg.train.batch_size = 10;
  cfg.train.learning_rate = 3e-3;
  cfg.train.beam_width = 1;
  ExperimentRunner runner(ds, cfg);
  ContextSetup base;
  const CaptionModel& model = runner.trained(base, 0);
  CHECK(&runner.trained(base, 0) == &model);  // cached

  SUBCASE("k sweep rows equal independent re-evaluation") {
    ExperimentSpec spec;
    spec.id = "ks";
    spec.k_values = {1, 3, 5};
    const auto report = runner.run(spec, &model, "abc");
    REQUIRE(report.rows.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      ContextSetup s;
      s.retrieval.k = spec.k_values[i];
      const auto examples = make_examples(model, ds.split("test"), runner.stores(), s, 0);
      const auto ev = evaluate(model, examples, spec.beam_width);
      CHECK(report.rows[i].condition == "k=" + std::to_string(spec.k_values[i]));
      CHECK(report.rows[i].cider_d == ev.report.cider_d);
      CHECK(report.rows[i].bleu4 == ev.report.bleu4);
      CHECK(report.rows[i].checkpoint == "abc");
    }
    const auto again = runner.run(spec, &model, "abc");
    for (std::size_t i = 0; i < 3; ++i) CHECK(again.rows[i].cider_d == report.rows[i].cider_d);

    write_report(report, dir / "reports");
    CHECK(fs::exists(dir / "reports" / "ks.json"));
    std::ifstream csv(dir / "reports" / "ks.csv");
    std::size_t lines = 0;
    for (std::string line; std::getline(csv, line);) ++lines;
    CHECK(lines == 4);
  }
  SUBCASE("an empty extra store leaves every metric unchanged") {
    ExperimentSpec spec;
    spec.id = "swap";
    spec.kind = ExperimentKind::datastore_swap;
    const auto report = runner.run(spec, &model, "abc");
    REQUIRE(report.rows.size() == 2);
    CHECK(report.rows[0].cider_d == report.rows[1].cider_d);
    CHECK(report.rows[0].bleu4 == report.rows[1].bleu4);
  }
  SUBCASE("oracle needs enough references") {
    ExperimentSpec spec;
    spec.id = "or";
    spec.kind = ExperimentKind::oracle;
    spec.replace_counts = {0, 5};
    // Toy images carry 2 to 5 captions, so five references are not always there.
    CHECK_THROWS(runner.run(spec, &model, "abc"));
  }
  SUBCASE("a checkpoint is required unless retraining") {
    ExperimentSpec spec;
    spec.id = "none";
    CHECK_THROWS(runner.run(spec, nullptr, ""));
  }
  SUBCASE("histogram and attention reports") {
    ExperimentSpec h;
    h.id = "hist";
    h.kind = ExperimentKind::histogram;
    const auto hr = runner.run(h, nullptr, "");
    REQUIRE(hr.histograms.size() == 2);
    for (const auto& hist : hr.histograms) CHECK(hist.total == 10);
    ExperimentSpec a;
    a.id = "attn";
    a.kind = ExperimentKind::attention_analysis;
    const auto ar = runner.run(a, &model, "abc");
    REQUIRE(ar.attention.has_value());
    CHECK(ar.attention->captions == 10);
    write_report(ar, dir / "reports");
    CHECK(fs::exists(dir / "reports" / "attn.attention.csv"));
  }
  fs::remove_all(dir);
}

TEST_CASE("exact-match store re-labels image ids") {
  const auto dir = scratch("exact");
  generate_toy_dataset(small_options(9), dir);
  const Dataset ds = ingest_dataset(dir / "manifest.json");
  const auto store = exact_match_store(ds.split("test"), "extra/");
  std::size_t captions = 0;
  for (const auto& img : ds.split("test")) captions += img.captions.size();
  CHECK(store.size() == captions);
  for (std::size_t i = 0; i < store.size(); ++i) CHECK(store.entry(i).image_id.rfind("extra/", 0) == 0);
  fs::remove_all(dir);
}
