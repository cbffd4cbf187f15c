#include "ragcap/experiments.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ragcap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over the combined words.
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string to_string(ContextVariant v) {
  switch (v) {
    case ContextVariant::empty: return "empty";
    case ContextVariant::random: return "random";
    case ContextVariant::oracle: return "oracle";
  }
  return "unknown";
}

ContextVariant parse_variant(std::string_view s) {
  if (s == "empty") return ContextVariant::empty;
  if (s == "random") return ContextVariant::random;
  if (s == "oracle") return ContextVariant::oracle;
  throw std::invalid_argument("unknown context variant '" + std::string(s) + "'");
}

template <typename T>
void take(const json& j, const char* key, T& field, std::vector<std::string>& known) {
  known.emplace_back(key);
  if (j.contains(key)) field = j.at(key).get<T>();
}

void reject_unknown(const json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument("unknown key '" + key + "' in " + where);
    }
  }
}

RetrievalStores view(const RetrievalResources& r) { return {&r.captions, &r.images, &r.image_captions}; }

}  // namespace

std::string ContextSetup::label() const {
  std::string out;
  if (!variant) {
    out = "retrieved/" + to_string(retrieval.mode) + "/k" + std::to_string(retrieval.k);
  } else if (*variant == ContextVariant::oracle) {
    out = "oracle/k" + std::to_string(retrieval.k) + "/replace" + std::to_string(replace_count);
  } else if (*variant == ContextVariant::random) {
    out = "random/k" + std::to_string(retrieval.k);
  } else {
    out = "empty";
  }
  if (blacked_image) out += "/blacked";
  return out;
}

std::vector<TrainingExample> make_examples(const CaptionModel& model, const std::vector<ImageRecord>& images,
                                           const RetrievalResources& stores, const ContextSetup& setup,
                                           std::uint64_t seed, bool first_caption_only) {
  std::vector<TrainingExample> out;
  out.reserve(images.size());
  const RetrievalStores store_view = view(stores);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const ImageRecord& img = images[i];
    RetrievedContext ctx;
    const bool needs_retrieval = !setup.variant || *setup.variant == ContextVariant::oracle;
    if (needs_retrieval) {
      ctx = retrieve_context({img.image_id, img.embedding, img.regions}, store_view, setup.retrieval);
    }
    if (setup.variant) {
      VariantRequest req;
      req.variant = *setup.variant;
      req.references = img.captions;
      req.replace_count = setup.replace_count;
      req.k = setup.retrieval.k;
      req.seed = mix(seed, i);
      req.pool = &stores.captions;
      ctx = make_variant_context(ctx, req);
    }
    TrainingExample ex;
    ex.image_id = img.image_id;
    ex.regions.features = img.regions;
    if (setup.blacked_image) ex.regions = ex.regions.blacked();
    ex.context = model.context(ctx.captions);
    if (img.captions.empty()) throw std::invalid_argument("image " + img.image_id + " has no captions");
    const std::size_t n_targets = first_caption_only ? 1 : img.captions.size();
    for (std::size_t c = 0; c < n_targets; ++c) ex.targets.push_back(model.target(img.captions[c]));
    ex.references = img.captions;
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------

RunConfig run_config_from_json(std::string_view text) {
  RunConfig c;
  try {
    const json j = json::parse(text);
    reject_unknown(j, {"model", "train", "scst", "retrieval"}, "run config");
    if (j.contains("model")) c.model = model_config_from_json(j.at("model").dump());
    if (j.contains("train")) {
      const json& t = j.at("train");
      std::vector<std::string> k;
      take(t, "learning_rate", c.train.learning_rate, k);
      take(t, "batch_size", c.train.batch_size, k);
      take(t, "max_epochs", c.train.max_epochs, k);
      take(t, "max_steps", c.train.max_steps, k);
      take(t, "patience", c.train.patience, k);
      take(t, "encoder_warmup", c.train.encoder_warmup, k);
      take(t, "beam_width", c.train.beam_width, k);
      take(t, "target_loss", c.train.target_loss, k);
      take(t, "seed", c.train.seed, k);
      take(t, "beta1", c.train.optimizer.beta1, k);
      take(t, "beta2", c.train.optimizer.beta2, k);
      take(t, "epsilon", c.train.optimizer.epsilon, k);
      take(t, "weight_decay", c.train.optimizer.weight_decay, k);
      reject_unknown(t, k, "train");
    }
    if (j.contains("scst")) {
      const json& s = j.at("scst");
      std::vector<std::string> k;
      take(s, "learning_rate", c.scst.learning_rate, k);
      take(s, "batch_size", c.scst.batch_size, k);
      take(s, "steps", c.scst.steps, k);
      take(s, "seed", c.scst.seed, k);
      reject_unknown(s, k, "scst");
    }
    if (j.contains("retrieval")) {
      const json& r = j.at("retrieval");
      std::vector<std::string> k{"mode", "metric"};
      reject_unknown(r, {"mode", "metric", "k", "exclude_self"}, "retrieval");
      if (r.contains("mode")) c.retrieval = RetrievalConfig::defaults_for(parse_retrieval_mode(r.at("mode").get<std::string>()));
      if (r.contains("metric")) c.retrieval.metric = parse_metric(r.at("metric").get<std::string>());
      take(r, "k", c.retrieval.k, k);
      take(r, "exclude_self", c.retrieval.exclude_self, k);
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("run config: ") + e.what());
  }
  if (!(c.train.learning_rate > 0.0)) throw std::invalid_argument("run config: learning_rate must be positive");
  if (c.train.patience < 1) throw std::invalid_argument("run config: patience must be at least 1");
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return run_config_from_json(buf.str());
}

// ---------------------------------------------------------------------------

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::k_sweep: return "k_sweep";
    case ExperimentKind::context_variant: return "context_variant";
    case ExperimentKind::blacked_image: return "blacked_image";
    case ExperimentKind::retrieval_mode: return "retrieval_mode";
    case ExperimentKind::oracle: return "oracle";
    case ExperimentKind::datastore_swap: return "datastore_swap";
    case ExperimentKind::attention_analysis: return "attention_analysis";
    case ExperimentKind::histogram: return "histogram";
  }
  return "unknown";
}

ExperimentKind parse_experiment_kind(std::string_view name) {
  for (auto k : {ExperimentKind::k_sweep, ExperimentKind::context_variant, ExperimentKind::blacked_image,
                 ExperimentKind::retrieval_mode, ExperimentKind::oracle, ExperimentKind::datastore_swap,
                 ExperimentKind::attention_analysis, ExperimentKind::histogram}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown experiment kind '" + std::string(name) + "'");
}

std::vector<std::string> validate_spec(const ExperimentSpec& s) {
  std::vector<std::string> f;
  if (s.id.empty()) f.push_back("id must not be empty");
  if (s.seeds.empty()) f.push_back("at least one seed is required");
  if (s.beam_width < 1) f.push_back("beam_width must be at least 1");
  switch (s.kind) {
    case ExperimentKind::k_sweep:
      if (s.k_values.empty()) f.push_back("k_sweep needs k_values");
      break;
    case ExperimentKind::context_variant:
      if (s.variants.empty()) f.push_back("context_variant needs variants");
      for (auto v : s.variants) {
        if (v == ContextVariant::oracle) f.push_back("context_variant takes empty/random; use the oracle kind");
      }
      break;
    case ExperimentKind::oracle:
      if (s.replace_counts.empty()) f.push_back("oracle needs replace_counts");
      for (auto r : s.replace_counts) {
        if (r > s.k) f.push_back("replace_count " + std::to_string(r) + " exceeds k=" + std::to_string(s.k));
      }
      break;
    case ExperimentKind::datastore_swap:
      if (s.retrain) f.push_back("datastore_swap is inference-only and cannot retrain");
      break;
    default:
      break;
  }
  return f;
}

ExperimentSpec experiment_spec_from_json(std::string_view text) {
  ExperimentSpec s;
  try {
    const json j = json::parse(text);
    std::vector<std::string> k{"kind", "variants", "extra_store"};
    reject_unknown(j, {"id", "kind", "k_values", "variants", "replace_counts", "extra_store", "seeds", "split",
                       "beam_width", "k", "retrain"},
                   "experiment spec");
    if (!j.contains("kind")) throw std::invalid_argument("experiment spec: missing 'kind'");
    s.kind = parse_experiment_kind(j.at("kind").get<std::string>());
    take(j, "id", s.id, k);
    take(j, "k_values", s.k_values, k);
    take(j, "replace_counts", s.replace_counts, k);
    take(j, "seeds", s.seeds, k);
    take(j, "split", s.split, k);
    take(j, "beam_width", s.beam_width, k);
    take(j, "k", s.k, k);
    take(j, "retrain", s.retrain, k);
    if (j.contains("variants")) {
      s.variants.clear();
      for (const auto& v : j.at("variants")) s.variants.push_back(parse_variant(v.get<std::string>()));
    }
    if (j.contains("extra_store")) s.extra_store = j.at("extra_store").get<std::string>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("experiment spec: ") + e.what());
  }
  if (s.id.empty()) s.id = to_string(s.kind);
  return s;
}

namespace {

json spec_json(const ExperimentSpec& s) {
  std::vector<std::string> variants;
  for (auto v : s.variants) variants.push_back(to_string(v));
  return {{"id", s.id},
          {"kind", to_string(s.kind)},
          {"k_values", s.k_values},
          {"variants", variants},
          {"replace_counts", s.replace_counts},
          {"extra_store", s.extra_store.string()},
          {"seeds", s.seeds},
          {"split", s.split},
          {"beam_width", s.beam_width},
          {"k", s.k},
          {"retrain", s.retrain}};
}

}  // namespace

std::string experiment_spec_to_json(const ExperimentSpec& spec) { return spec_json(spec).dump(2); }

double ExperimentReport::mean_cider(const std::string& condition) const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.condition == condition) {
      total += r.cider_d;
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("report has no rows for condition " + condition);
  return total / static_cast<double>(n);
}

double ExperimentReport::mean_bleu(const std::string& condition) const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.condition == condition) {
      total += r.bleu4;
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("report has no rows for condition " + condition);
  return total / static_cast<double>(n);
}

void write_report(const ExperimentReport& report, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
  const std::string& id = report.spec.id;
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"condition", r.condition},
                    {"seed", r.seed},
                    {"checkpoint", r.checkpoint},
                    {"bleu4", r.bleu4},
                    {"cider_d", r.cider_d}});
  }
  json j{{"spec", spec_json(report.spec)}, {"rows", rows}};
  if (report.attention) {
    j["attention"] = {{"captions", report.attention->captions},
                      {"visual", report.attention->visual},
                      {"textual", report.attention->textual}};
    write_attention_summary(dir / (id + ".attention.json"), dir / (id + ".attention.csv"), *report.attention);
  }
  for (const auto& h : report.histograms) {
    j["histograms"].push_back({{"mode", h.mode}, {"counts", h.counts}, {"zero_count", h.zero_count}, {"total", h.total}});
    write_histogram(dir / (id + ".histogram." + h.mode + ".json"), dir / (id + ".histogram." + h.mode + ".csv"), h);
  }
  std::ofstream out(dir / (id + ".json"), std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report in " + dir.string());
  out << j.dump(2) << '\n';
  std::ofstream csv(dir / (id + ".csv"), std::ios::trunc);
  csv.precision(17);
  csv << "experiment,kind,condition,seed,checkpoint,bleu4,cider_d\n";
  for (const auto& r : report.rows) {
    csv << id << ',' << to_string(report.spec.kind) << ',' << r.condition << ',' << r.seed << ',' << r.checkpoint
        << ',' << r.bleu4 << ',' << r.cider_d << '\n';
  }
  if (!csv) throw std::runtime_error("cannot write report in " + dir.string());
}

// ---------------------------------------------------------------------------

ExperimentRunner::ExperimentRunner(const Dataset& dataset, RunConfig config, std::ostream* log)
    : dataset_(dataset),
      config_(std::move(config)),
      log_(log),
      vocab_(Vocabulary::build(dataset.all_captions("train"))),
      stores_(build_retrieval_resources(dataset.split("train"))) {}

const CaptionModel& ExperimentRunner::trained(const ContextSetup& setup, std::uint64_t seed) {
  const std::string key = setup.label() + "#" + std::to_string(seed);
  if (auto it = cache_.find(key); it != cache_.end()) return *it->second;
  auto model = std::make_unique<CaptionModel>(config_.model, vocab_, seed);
  auto train = make_examples(*model, dataset_.split("train"), stores_, setup, mix(seed, 1));
  const auto val = make_examples(*model, dataset_.split("val"), stores_, setup, mix(seed, 2));
  EpochRefresh refresh;
  if (setup.variant && *setup.variant == ContextVariant::random) {
    // Fresh random contexts every epoch.
    refresh = [&, seed](std::vector<TrainingExample>& ex, std::size_t epoch) {
      if (epoch == 0) return;
      const auto fresh = make_examples(*model, dataset_.split("train"), stores_, setup, mix(seed, 100 + epoch));
      for (std::size_t i = 0; i < ex.size(); ++i) ex[i].context = fresh[i].context;
    };
  }
  TrainConfig tc = config_.train;
  tc.seed = seed;
  train_xe(*model, train, val, tc, log_, refresh);
  return *cache_.emplace(key, std::move(model)).first->second;
}

Evaluation ExperimentRunner::evaluate(const CaptionModel& model, const ContextSetup& setup, const std::string& split,
                                      std::uint64_t seed, std::size_t beam_width,
                                      const RetrievalResources* stores) const {
  const auto examples = make_examples(model, dataset_.split(split), stores ? *stores : stores_, setup, mix(seed, 3));
  return ragcap::evaluate(model, examples, beam_width);
}

ExperimentReport ExperimentRunner::run(const ExperimentSpec& spec, const CaptionModel* checkpoint,
                                       const std::string& checkpoint_hash) {
  if (auto f = validate_spec(spec); !f.empty()) {
    std::string msg = "invalid experiment spec:";
    for (const auto& s : f) msg += " " + s + ";";
    throw std::invalid_argument(msg);
  }
  if (!spec.retrain && checkpoint == nullptr && spec.kind != ExperimentKind::histogram) {
    throw std::invalid_argument("experiment " + spec.id + " needs a checkpoint or retrain=true");
  }
  ExperimentReport report;
  report.spec = spec;

  ContextSetup base;
  base.retrieval = config_.retrieval;
  base.retrieval.k = spec.k;

  auto model_for = [&](const ContextSetup& setup, std::uint64_t seed) -> const CaptionModel& {
    return spec.retrain ? trained(setup, seed) : *checkpoint;
  };
  auto tag = [&](const ContextSetup& setup, std::uint64_t seed) {
    return spec.retrain ? "trained:" + setup.label() + ":" + std::to_string(seed) : checkpoint_hash;
  };
  auto add_row = [&](const std::string& condition, std::uint64_t seed, const std::string& ckpt, const Evaluation& ev) {
    report.rows.push_back({condition, seed, ckpt, ev.report.bleu4, ev.report.cider_d});
  };

  for (const std::uint64_t seed : spec.seeds) {
    switch (spec.kind) {
      case ExperimentKind::k_sweep: {
        const CaptionModel& m = model_for(base, seed);
        for (std::size_t k : spec.k_values) {
          ContextSetup s = base;
          s.retrieval.k = k;
          add_row("k=" + std::to_string(k), seed, tag(base, seed), evaluate(m, s, spec.split, seed, spec.beam_width));
        }
        break;
      }
      case ExperimentKind::context_variant: {
        add_row("retrieved", seed, tag(base, seed),
                evaluate(model_for(base, seed), base, spec.split, seed, spec.beam_width));
        for (auto v : spec.variants) {
          ContextSetup s = base;
          s.variant = v;
          add_row(to_string(v), seed, tag(s, seed), evaluate(model_for(s, seed), s, spec.split, seed, spec.beam_width));
        }
        break;
      }
      case ExperimentKind::blacked_image: {
        add_row("full", seed, tag(base, seed), evaluate(model_for(base, seed), base, spec.split, seed, spec.beam_width));
        ContextSetup s = base;
        s.blacked_image = true;
        add_row("blacked", seed, tag(s, seed), evaluate(model_for(s, seed), s, spec.split, seed, spec.beam_width));
        break;
      }
      case ExperimentKind::retrieval_mode: {
        for (auto mode : {RetrievalMode::image_text, RetrievalMode::image_image}) {
          ContextSetup s = base;
          s.retrieval = RetrievalConfig::defaults_for(mode);
          s.retrieval.k = spec.k;
          s.retrieval.exclude_self = base.retrieval.exclude_self;
          add_row(to_string(mode), seed, tag(s, seed), evaluate(model_for(s, seed), s, spec.split, seed, spec.beam_width));
        }
        break;
      }
      case ExperimentKind::oracle: {
        const CaptionModel& m = model_for(base, seed);
        for (std::size_t r : spec.replace_counts) {
          ContextSetup s = base;
          s.variant = ContextVariant::oracle;
          s.replace_count = r;
          add_row("replace=" + std::to_string(r), seed, tag(base, seed), evaluate(m, s, spec.split, seed, spec.beam_width));
        }
        break;
      }
      case ExperimentKind::datastore_swap: {
        if (base.retrieval.mode != RetrievalMode::image_text) {
          throw std::invalid_argument("datastore_swap swaps the caption store and needs image_text retrieval");
        }
        const CaptionModel& m = *checkpoint;
        add_row("base", seed, checkpoint_hash, evaluate(m, base, spec.split, seed, spec.beam_width));
        const VectorIndex extra = spec.extra_store.empty()
                                      ? VectorIndex(stores_.captions.metric(), stores_.captions.dimension())
                                      : VectorIndex::load(spec.extra_store);
        RetrievalResources merged = stores_;
        merged.captions = VectorIndex::merge(stores_.captions, extra);
        add_row("merged", seed, checkpoint_hash, evaluate(m, base, spec.split, seed, spec.beam_width, &merged));
        break;
      }
      case ExperimentKind::attention_analysis: {
        const CaptionModel& m = model_for(base, seed);
        const auto examples = make_examples(m, dataset_.split(spec.split), stores_, base, mix(seed, 3));
        std::vector<AttentionRecord> records;
        std::vector<EvalPair> pairs;
        for (const auto& ex : examples) {
          const EncoderOutput enc = m.encode(ex.regions, ex.context);
          const auto hyp = m.generate(enc, spec.beam_width);
          auto rec = m.decoder().record_attention(m.params(), enc, hyp.tokens);
          rec.image_id = ex.image_id;
          records.push_back(std::move(rec));
          pairs.push_back({ex.image_id, m.text(hyp), ex.references});
        }
        const auto scores = score_captions(pairs);
        report.rows.push_back({"retrieved", seed, tag(base, seed), scores.bleu4, scores.cider_d});
        report.attention = attention_mass(records, dataset_.regions, m.config().context_length);
        break;
      }
      case ExperimentKind::histogram: {
        std::vector<HistogramQuery> queries;
        std::vector<std::vector<std::string>> corpus;
        for (const auto& img : dataset_.split(spec.split)) {
          queries.push_back({{img.image_id, img.embedding, img.regions}, img.captions});
          corpus.push_back(img.captions);
        }
        const CiderScorer scorer(corpus);
        for (auto mode : {RetrievalMode::image_text, RetrievalMode::image_image}) {
          RetrievalConfig rc = RetrievalConfig::defaults_for(mode);
          rc.exclude_self = base.retrieval.exclude_self;
          report.histograms.push_back(retrieval_quality_histogram(queries, view(stores_), rc, scorer));
        }
        break;
      }
    }
    if (spec.kind == ExperimentKind::histogram) break;  // seed independent
  }
  return report;
}

VectorIndex exact_match_store(const std::vector<ImageRecord>& images, const std::string& id_prefix) {
  auto entries = caption_entries(images);
  for (auto& e : entries) e.image_id = id_prefix + e.image_id;
  return VectorIndex::build(entries, Metric::cosine);
}

}  // namespace ragcap
