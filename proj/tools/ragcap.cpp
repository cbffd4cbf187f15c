// Command-line front end: data generation, datastores, training, evaluation
// and the ablation experiments. Failures exit nonzero with a JSON error object
// on stderr.

#include "ragcap/analysis.hpp"
#include "ragcap/dataset.hpp"
#include "ragcap/experiments.hpp"
#include "ragcap/metrics.hpp"
#include "ragcap/model.hpp"
#include "ragcap/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace ragcap;
using nlohmann::json;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::string config;
  std::string out = ".";
};

RunConfig run_config(const Globals& g) {
  RunConfig c = g.config.empty() ? RunConfig{} : load_run_config(g.config);
  return c;
}

fs::path out_dir(const Globals& g) {
  fs::path p(g.out);
  fs::create_directories(p);
  return p;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  return out;
}

ContextSetup setup_from(const RunConfig& rc, const std::string& variant, std::size_t replace_count, bool blacked) {
  ContextSetup s;
  s.retrieval = rc.retrieval;
  if (variant == "empty") s.variant = ContextVariant::empty;
  else if (variant == "random") s.variant = ContextVariant::random;
  else if (variant == "oracle") s.variant = ContextVariant::oracle;
  else if (variant != "retrieved") throw std::invalid_argument("unknown context variant '" + variant + "'");
  s.replace_count = replace_count;
  s.blacked_image = blacked;
  return s;
}

void print(const json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retrieval-augmented image captioning toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--config", g.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "Output directory")->capture_default_str();

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic scene dataset");
  ToyDatasetOptions toy;
  gen->add_option("--train", toy.train_images)->capture_default_str();
  gen->add_option("--val", toy.val_images)->capture_default_str();
  gen->add_option("--test", toy.test_images)->capture_default_str();
  gen->add_option("--regions", toy.regions)->capture_default_str();
  gen->add_option("--region-dim", toy.region_dim)->capture_default_str();
  gen->add_option("--objects", toy.objects)->capture_default_str();
  gen->add_option("--attributes", toy.attributes)->capture_default_str();
  gen->add_option("--min-captions", toy.min_captions)->capture_default_str();
  gen->add_option("--max-captions", toy.max_captions)->capture_default_str();
  gen->add_option("--min-concepts", toy.min_concepts)->capture_default_str();
  gen->add_option("--max-concepts", toy.max_concepts)->capture_default_str();
  gen->add_option("--feature-noise", toy.feature_noise, "Region feature noise std")->capture_default_str();
  gen->add_option("--embedding-noise", toy.embedding_noise, "Retrieval embedding noise std")->capture_default_str();

  // build-store
  auto* build = app.add_subcommand("build-store", "Build a caption or image datastore from a split");
  std::string build_manifest, build_split = "train", store_kind = "captions", build_output;
  build->add_option("--manifest", build_manifest)->required()->check(CLI::ExistingFile);
  build->add_option("--split", build_split, "Split whose captions fill the store")->capture_default_str();
  build->add_option("--kind", store_kind, "captions or images")->capture_default_str();
  build->add_option("--output", build_output)->required();

  // query-store
  auto* query = app.add_subcommand("query-store", "Search a datastore");
  std::string query_store, query_manifest, image_id;
  std::vector<double> vector;
  std::size_t k = 5;
  bool include_self = false;
  query->add_option("--store", query_store)->required()->check(CLI::ExistingFile);
  query->add_option("--manifest", query_manifest, "Dataset to take the query image from")->check(CLI::ExistingFile);
  query->add_option("--image-id", image_id);
  query->add_option("--vector", vector, "Explicit query vector")->delimiter(',');
  query->add_option("-k", k)->capture_default_str();
  query->add_flag("--include-self", include_self);

  // merge-store
  auto* merge = app.add_subcommand("merge-store", "Merge an extra datastore into a primary one");
  std::string primary, extra, merge_output;
  merge->add_option("--primary", primary)->required()->check(CLI::ExistingFile);
  merge->add_option("--extra", extra)->required()->check(CLI::ExistingFile);
  merge->add_option("--output", merge_output)->required();

  // train
  auto* train = app.add_subcommand("train", "Cross-entropy training with early stopping");
  std::string train_manifest, variant = "retrieved";
  std::size_t replace_count = 0;
  bool blacked = false, first_caption_only = false;
  train->add_option("--manifest", train_manifest)->required()->check(CLI::ExistingFile);
  train->add_option("--variant", variant, "retrieved, empty, random or oracle")->capture_default_str();
  train->add_option("--replace-count", replace_count)->capture_default_str();
  train->add_flag("--blacked", blacked, "Zero the region features");
  train->add_flag("--first-caption-only", first_caption_only);

  // scst
  auto* scst = app.add_subcommand("scst", "Self-critical fine-tuning of a checkpoint");
  std::string scst_manifest, scst_checkpoint;
  scst->add_option("--manifest", scst_manifest)->required()->check(CLI::ExistingFile);
  scst->add_option("--checkpoint", scst_checkpoint)->required()->check(CLI::ExistingFile);

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint with beam search");
  std::size_t beam = 3, eval_replace_count = 0;
  std::string eval_manifest, eval_checkpoint, eval_split = "test", eval_variant = "retrieved", extra_store;
  bool eval_blacked = false;
  eval->add_option("--manifest", eval_manifest)->required()->check(CLI::ExistingFile);
  eval->add_option("--checkpoint", eval_checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--split", eval_split)->capture_default_str();
  eval->add_option("--beam", beam)->capture_default_str();
  eval->add_option("--variant", eval_variant)->capture_default_str();
  eval->add_option("--replace-count", eval_replace_count)->capture_default_str();
  eval->add_flag("--blacked", eval_blacked);
  eval->add_option("--extra-store", extra_store, "Caption store merged in at inference")->check(CLI::ExistingFile);

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Run one ablation experiment");
  std::string ablate_manifest, ablate_checkpoint, spec_path, kind;
  ablate->add_option("--manifest", ablate_manifest)->required()->check(CLI::ExistingFile);
  ablate->add_option("--checkpoint", ablate_checkpoint)->check(CLI::ExistingFile);
  ablate->add_option("--spec", spec_path, "JSON experiment spec")->check(CLI::ExistingFile);
  ablate->add_option("--kind", kind, "Experiment kind when no spec file is given");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Summarize attention records or rescore a caption file");
  std::string records_path, captions_path;
  std::size_t visual_len = 0, text_len = 0;
  analyze->add_option("--attention", records_path, "Attention records (JSON lines)")->check(CLI::ExistingFile);
  analyze->add_option("--visual", visual_len, "Visual positions N");
  analyze->add_option("--text", text_len, "Textual positions |L|");
  analyze->add_option("--captions", captions_path, "Caption file to rescore")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      toy.seed = g.seed;
      const fs::path dir = out_dir(g);
      const auto m = generate_toy_dataset(toy, dir);
      json sizes;
      for (const auto& [name, recs] : m.splits) sizes[name] = recs.size();
      print({{"manifest", (dir / "manifest.json").string()}, {"splits", sizes}});
    } else if (*build) {
      const Dataset ds = ingest_dataset(build_manifest);
      const auto& images = ds.split(build_split);
      VectorIndex index = store_kind == "captions" ? VectorIndex::build(caption_entries(images), Metric::cosine)
                          : store_kind == "images"
                              ? VectorIndex::build(image_entries(images), Metric::euclidean)
                              : throw std::invalid_argument("--kind must be captions or images");
      index.save(build_output);
      print({{"store", build_output}, {"entries", index.size()}, {"metric", to_string(index.metric())}});
    } else if (*query) {
      const VectorIndex index = VectorIndex::load(query_store);
      std::vector<double> q = vector;
      if (q.empty()) {
        if (query_manifest.empty() || image_id.empty()) throw std::invalid_argument("give --vector, or --manifest with --image-id");
        const Dataset ds = ingest_dataset(query_manifest);
        for (const auto& [name, images] : ds.splits) {
          for (const auto& img : images) {
            if (img.image_id != image_id) continue;
            q = index.metric() == Metric::cosine ? img.embedding : pool_regions(img.regions);
          }
        }
        if (q.empty()) throw std::invalid_argument("image '" + image_id + "' not found");
      }
      std::optional<std::string_view> exclude;
      if (!include_self && !image_id.empty()) exclude = image_id;
      json hits = json::array();
      for (const auto& h : index.search(q, k, exclude)) {
        hits.push_back({{"entry_id", h.entry.entry_id},
                        {"image_id", h.entry.image_id},
                        {"caption", h.entry.caption_text},
                        {"score", h.score}});
      }
      print(hits);
    } else if (*merge) {
      const auto merged = VectorIndex::merge(VectorIndex::load(primary), VectorIndex::load(extra));
      merged.save(merge_output);
      print({{"store", merge_output}, {"entries", merged.size()}});
    } else if (*train) {
      const RunConfig rc = run_config(g);
      const Dataset ds = ingest_dataset(train_manifest);
      const auto stores = build_retrieval_resources(ds.split("train"));
      CaptionModel model(rc.model, Vocabulary::build(ds.all_captions("train")), g.seed);
      const ContextSetup setup = setup_from(rc, variant, replace_count, blacked);
      auto train_ex = make_examples(model, ds.split("train"), stores, setup, g.seed, first_caption_only);
      const auto val_ex = ds.splits.count("val") && !ds.split("val").empty()
                              ? make_examples(model, ds.split("val"), stores, setup, g.seed + 1)
                              : std::vector<TrainingExample>{};
      EpochRefresh refresh;
      if (setup.variant == ContextVariant::random) {
        refresh = [&](std::vector<TrainingExample>& ex, std::size_t epoch) {
          const auto fresh = make_examples(model, ds.split("train"), stores, setup, g.seed + 1000 + epoch, first_caption_only);
          for (std::size_t i = 0; i < ex.size(); ++i) ex[i].context = fresh[i].context;
        };
      }
      TrainConfig tc = rc.train;
      tc.seed = g.seed;
      const fs::path dir = out_dir(g);
      auto log = open_out(dir / "train_log.jsonl");
      const auto result = train_xe(model, train_ex, val_ex, tc, &log, refresh);
      model.save(dir / "model.xtck", {result.best_epoch, result.best_bleu4, "xe"});
      model.vocab().save(dir / "vocab.txt");
      print({{"checkpoint", (dir / "model.xtck").string()},
             {"epochs", result.epochs_run},
             {"steps", result.steps},
             {"best_epoch", result.best_epoch},
             {"best_val_bleu4", result.best_bleu4},
             {"final_epoch_loss", result.epoch_losses.empty() ? 0.0 : result.epoch_losses.back()}});
    } else if (*scst) {
      RunConfig rc = run_config(g);
      rc.scst.seed = g.seed;
      const Dataset ds = ingest_dataset(scst_manifest);
      CheckpointInfo info;
      CaptionModel model = CaptionModel::load(scst_checkpoint, &info);
      const auto stores = build_retrieval_resources(ds.split("train"));
      ContextSetup setup;
      setup.retrieval = rc.retrieval;
      const auto train_ex = make_examples(model, ds.split("train"), stores, setup, g.seed);
      std::vector<std::vector<std::string>> corpus;
      for (const auto& img : ds.split("train")) corpus.push_back(img.captions);
      const CiderScorer reward(corpus);
      const fs::path dir = out_dir(g);
      auto log = open_out(dir / "scst_log.jsonl");
      const auto steps = train_scst(model, train_ex, reward, rc.scst, &log);
      info.stage = "scst";
      model.save(dir / "model.scst.xtck", info);
      double adv = 0.0;
      for (const auto& s : steps) adv += s.mean_advantage;
      print({{"scst_checkpoint", (dir / "model.scst.xtck").string()},
             {"steps", steps.size()},
             {"mean_advantage", steps.empty() ? 0.0 : adv / static_cast<double>(steps.size())}});
    } else if (*eval) {
      const RunConfig rc = run_config(g);
      const Dataset ds = ingest_dataset(eval_manifest);
      const CaptionModel model = CaptionModel::load(eval_checkpoint);
      auto stores = build_retrieval_resources(ds.split("train"));
      if (!extra_store.empty()) stores.captions = VectorIndex::merge(stores.captions, VectorIndex::load(extra_store));
      const ContextSetup setup = setup_from(rc, eval_variant, eval_replace_count, eval_blacked);
      const auto examples = make_examples(model, ds.split(eval_split), stores, setup, g.seed);
      const Evaluation ev = evaluate(model, examples, beam);
      const fs::path dir = out_dir(g);
      write_caption_file(dir / "captions.jsonl", ev.captions);
      write_metric_report(dir / "metrics.json", ev.report);
      print({{"bleu4", ev.report.bleu4}, {"cider_d", ev.report.cider_d}, {"images", ev.captions.size()}});
    } else if (*ablate) {
      const RunConfig rc = run_config(g);
      const Dataset ds = ingest_dataset(ablate_manifest);
      ExperimentSpec spec;
      if (!spec_path.empty()) {
        std::ifstream in(spec_path);
        std::stringstream buf;
        buf << in.rdbuf();
        spec = experiment_spec_from_json(buf.str());
      } else if (!kind.empty()) {
        spec.kind = parse_experiment_kind(kind);
        spec.id = kind;
        spec.seeds = {g.seed};
      } else {
        throw std::invalid_argument("ablate needs --spec or --kind");
      }
      std::optional<CaptionModel> model;
      std::string hash;
      if (!ablate_checkpoint.empty()) {
        model.emplace(CaptionModel::load(ablate_checkpoint));
        hash = file_hash(ablate_checkpoint);
      }
      const fs::path dir = out_dir(g);
      auto log = open_out(dir / (spec.id + ".train_log.jsonl"));
      ExperimentRunner runner(ds, rc, &log);
      const auto report = runner.run(spec, model ? &*model : nullptr, hash);
      write_report(report, dir);
      json rows = json::array();
      for (const auto& r : report.rows) {
        rows.push_back({{"condition", r.condition}, {"seed", r.seed}, {"bleu4", r.bleu4}, {"cider_d", r.cider_d}});
      }
      print({{"report", (dir / (spec.id + ".json")).string()}, {"rows", rows}});
    } else if (*analyze) {
      const fs::path dir = out_dir(g);
      json result;
      if (!records_path.empty()) {
        std::ifstream in(records_path);
        const auto records = read_attention_records(in);
        const auto summary = attention_mass(records, visual_len, text_len);
        write_attention_summary(dir / "attention.json", dir / "attention.csv", summary);
        result["attention"] = {{"visual", summary.visual}, {"textual", summary.textual}, {"captions", summary.captions}};
      }
      if (!captions_path.empty()) {
        const auto report = score_captions(read_caption_file(captions_path));
        write_metric_report(dir / "rescored.json", report);
        result["metrics"] = {{"bleu4", report.bleu4}, {"cider_d", report.cider_d}};
      }
      if (result.is_null()) throw std::invalid_argument("analyze needs --attention or --captions");
      print(result);
    }
  } catch (const ValidationError& e) {
    std::cerr << json{{"error", "validation"}, {"problems", e.problems()}}.dump() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}}.dump() << '\n';
    return 1;
  }
  return 0;
}
