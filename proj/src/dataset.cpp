#include "ragcap/dataset.hpp"

#include "ragcap/binary_io.hpp"
#include "ragcap/retrieval.hpp"
#include "ragcap/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>

namespace ragcap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kFeatureMagic = "XTFT";
constexpr std::uint32_t kFeatureVersion = 1;

std::string join_lines(const std::vector<std::string>& problems) {
  std::string out = "dataset validation failed:";
  for (const auto& p : problems) out += "\n  " + p;
  return out;
}

}  // namespace

void write_feature_file(const fs::path& path, const Tensor& matrix) {
  if (matrix.rank() != 2) throw ShapeError("feature file: expected a matrix");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("feature file: cannot write " + path.string());
  binary::write_bytes(out, kFeatureMagic);
  binary::write<std::uint32_t>(out, kFeatureVersion);
  binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(matrix.rows()));
  binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(matrix.cols()));
  binary::write_doubles(out, matrix.values());
  if (!out) throw std::runtime_error("feature file: write failed for " + path.string());
}

Tensor read_feature_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("feature file: cannot open " + path.string());
  const std::string what = "feature file " + path.string();
  binary::expect_magic(in, kFeatureMagic, what);
  const auto version = binary::read<std::uint32_t>(in, what);
  if (version != kFeatureVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto rows = binary::read<std::uint32_t>(in, what);
  const auto dim = binary::read<std::uint32_t>(in, what);
  const std::uint64_t expected = static_cast<std::uint64_t>(rows) * dim * sizeof(double);
  const std::uint64_t left = binary::remaining(in);
  if (left < expected) throw CorruptionError(what + ": truncated file");
  if (left > expected) throw CorruptionError(what + ": trailing bytes");
  return Tensor({rows, dim}, binary::read_doubles(in, static_cast<std::size_t>(rows) * dim, what));
}

// ---------------------------------------------------------------------------

void DatasetManifest::save(const fs::path& path) const {
  json splits_json = json::object();
  for (const auto& [split, records] : splits) {
    json arr = json::array();
    for (const auto& r : records) {
      json j{{"image_id", r.image_id},
             {"captions", r.captions},
             {"region_feature_file", r.region_feature_file},
             {"retrieval_embedding_file", r.retrieval_embedding_file}};
      if (!r.caption_embedding_file.empty()) j["caption_embedding_file"] = r.caption_embedding_file;
      arr.push_back(std::move(j));
    }
    splits_json[split] = std::move(arr);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("manifest: cannot write " + path.string());
  out << json{{"name", name}, {"regions", regions}, {"splits", splits_json}}.dump(2) << '\n';
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError({"manifest " + path.string() + " cannot be opened"});
  DatasetManifest m;
  std::vector<std::string> problems;
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError({"manifest " + path.string() + " is not valid JSON: " + e.what()});
  }
  auto field = [&](const json& obj, const char* key, const std::string& where) -> const json* {
    if (!obj.is_object() || !obj.contains(key)) {
      problems.push_back(where + ": missing '" + key + "'");
      return nullptr;
    }
    return &obj.at(key);
  };
  if (const json* v = field(j, "name", "manifest"); v && v->is_string()) m.name = v->get<std::string>();
  if (const json* v = field(j, "regions", "manifest")) {
    if (v->is_number_unsigned() && v->get<std::size_t>() > 0) m.regions = v->get<std::size_t>();
    else problems.push_back("manifest: 'regions' must be a positive integer");
  }
  const json* splits = field(j, "splits", "manifest");
  if (splits && !splits->is_object()) {
    problems.push_back("manifest: 'splits' must be an object");
    splits = nullptr;
  }
  if (splits) {
    for (const auto& [split, records] : splits->items()) {
      auto& out = m.splits[split];
      if (!records.is_array()) {
        problems.push_back("split " + split + ": expected an array of records");
        continue;
      }
      for (std::size_t i = 0; i < records.size(); ++i) {
        const std::string where = "split " + split + " record " + std::to_string(i);
        const json& r = records[i];
        ManifestRecord rec;
        auto text = [&](const char* key, std::string& dst, bool required) {
          if (!r.is_object() || !r.contains(key)) {
            if (required) problems.push_back(where + ": missing '" + key + "'");
            return;
          }
          if (!r.at(key).is_string()) problems.push_back(where + ": '" + key + "' must be a string");
          else dst = r.at(key).get<std::string>();
        };
        text("image_id", rec.image_id, true);
        text("region_feature_file", rec.region_feature_file, true);
        text("retrieval_embedding_file", rec.retrieval_embedding_file, true);
        text("caption_embedding_file", rec.caption_embedding_file, false);
        if (const json* caps = field(r, "captions", where)) {
          if (!caps->is_array() || !std::all_of(caps->begin(), caps->end(), [](const json& c) { return c.is_string(); })) {
            problems.push_back(where + ": 'captions' must be an array of strings");
          } else {
            rec.captions = caps->get<std::vector<std::string>>();
          }
        }
        out.push_back(std::move(rec));
      }
    }
  }
  if (!problems.empty()) throw ValidationError(problems);
  return m;
}

ValidationError::ValidationError(std::vector<std::string> problems)
    : std::runtime_error(join_lines(problems)), problems_(std::move(problems)) {}

const std::vector<ImageRecord>& Dataset::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw std::out_of_range("dataset has no split '" + name + "'");
  return it->second;
}

std::vector<std::string> Dataset::all_captions(const std::string& split_name) const {
  std::vector<std::string> out;
  for (const auto& r : split(split_name)) out.insert(out.end(), r.captions.begin(), r.captions.end());
  return out;
}

Dataset ingest_dataset(const fs::path& manifest_path) {
  const DatasetManifest m = DatasetManifest::load(manifest_path);
  const fs::path base = manifest_path.parent_path();
  std::vector<std::string> problems;
  Dataset ds;
  ds.name = m.name;
  ds.regions = m.regions;
  std::map<std::string, std::string> seen;  // image_id -> split

  auto load = [&](const std::string& rel, const std::string& where, const char* kind) -> std::optional<Tensor> {
    if (rel.empty()) return std::nullopt;
    const fs::path p = base / rel;
    if (!fs::exists(p)) {
      problems.push_back(where + ": " + kind + " file " + p.string() + " does not exist");
      return std::nullopt;
    }
    try {
      Tensor t = read_feature_file(p);
      if (!t.all_finite()) {
        problems.push_back(where + ": " + kind + " file " + p.string() + " contains non-finite values");
        return std::nullopt;
      }
      return t;
    } catch (const std::exception& e) {
      problems.push_back(where + ": " + e.what());
      return std::nullopt;
    }
  };
  auto check_dim = [&](std::size_t& expected, std::size_t got, const std::string& where, const std::string& file,
                       const char* kind) {
    if (expected == 0) expected = got;
    else if (got != expected) {
      problems.push_back(where + ": " + kind + " file " + file + " has dimension " + std::to_string(got) +
                         ", expected " + std::to_string(expected));
    }
  };

  for (const auto& [split, records] : m.splits) {
    auto& out = ds.splits[split];
    for (const auto& r : records) {
      const std::string where = "split " + split + " image '" + r.image_id + "'";
      if (r.image_id.empty()) problems.push_back("split " + split + ": empty image_id");
      if (auto [it, fresh] = seen.emplace(r.image_id, split); !fresh) {
        problems.push_back(where + ": duplicate image_id (also in split " + it->second + ")");
      }
      if (r.captions.empty()) problems.push_back(where + ": no captions");
      for (const auto& c : r.captions) {
        if (tokenize(c).empty()) problems.push_back(where + ": caption '" + c + "' has no words");
      }
      ImageRecord img;
      img.image_id = r.image_id;
      img.captions = r.captions;
      if (auto t = load(r.region_feature_file, where, "region")) {
        if (t->rows() != m.regions) {
          problems.push_back(where + ": region file " + r.region_feature_file + " has " + std::to_string(t->rows()) +
                             " rows, expected N=" + std::to_string(m.regions));
        }
        check_dim(ds.region_dim, t->cols(), where, r.region_feature_file, "region");
        img.regions = std::move(*t);
      }
      if (auto t = load(r.retrieval_embedding_file, where, "embedding")) {
        if (t->rows() != 1) {
          problems.push_back(where + ": embedding file " + r.retrieval_embedding_file + " has " +
                             std::to_string(t->rows()) + " rows, expected 1");
        }
        check_dim(ds.embedding_dim, t->cols(), where, r.retrieval_embedding_file, "embedding");
        img.embedding = t->values();
      }
      if (auto t = load(r.caption_embedding_file, where, "caption embedding")) {
        if (t->rows() != r.captions.size()) {
          problems.push_back(where + ": caption embedding file " + r.caption_embedding_file + " has " +
                             std::to_string(t->rows()) + " rows for " + std::to_string(r.captions.size()) +
                             " captions");
        }
        check_dim(ds.embedding_dim, t->cols(), where, r.caption_embedding_file, "caption embedding");
        img.caption_embeddings = std::move(*t);
      }
      out.push_back(std::move(img));
    }
  }
  if (!problems.empty()) throw ValidationError(problems);
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

const std::vector<std::string>& toy_object_names() {
  static const std::vector<std::string> names{"cube", "ball", "cone", "ring", "star", "box", "disk", "tower"};
  return names;
}

const std::vector<std::string>& toy_attribute_names() {
  static const std::vector<std::string> names{"red", "blue", "green", "yellow", "purple", "orange"};
  return names;
}

std::vector<std::string> toy_concepts_in(const std::string& caption) {
  const auto words = tokenize(caption);
  const auto& attrs = toy_attribute_names();
  const auto& objs = toy_object_names();
  std::vector<std::string> out;
  for (std::size_t i = 0; i + 1 < words.size(); ++i) {
    if (std::find(attrs.begin(), attrs.end(), words[i]) != attrs.end() &&
        std::find(objs.begin(), objs.end(), words[i + 1]) != objs.end()) {
      out.push_back(words[i] + ' ' + words[i + 1]);
    }
  }
  return out;
}

namespace {

struct Concept {
  std::size_t object;
  std::size_t attribute;
};

std::string describe(const std::vector<Concept>& scene) {
  std::string out;
  for (std::size_t i = 0; i < scene.size(); ++i) {
    if (i > 0) out += " and ";
    out += "a " + toy_attribute_names()[scene[i].attribute] + ' ' + toy_object_names()[scene[i].object];
  }
  return out;
}

const std::vector<std::string>& caption_templates() {
  static const std::vector<std::string> t{"{}", "there is {}", "a picture of {}", "{} in the scene",
                                          "an image showing {}"};
  return t;
}

std::string fill(const std::string& tmpl, const std::string& body) {
  const auto at = tmpl.find("{}");
  return tmpl.substr(0, at) + body + tmpl.substr(at + 2);
}

std::vector<double> bag_embedding(const std::vector<Concept>& scene, const ToyDatasetOptions& o, std::mt19937_64& rng) {
  const std::size_t pairs = o.objects * o.attributes;
  std::vector<double> v(pairs + o.objects + o.attributes, 0.0);
  for (const auto& c : scene) {
    v[c.object * o.attributes + c.attribute] += 1.0;
    v[pairs + c.object] += 1.0;
    v[pairs + o.objects + c.attribute] += 1.0;
  }
  const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
  std::normal_distribution<double> noise(0.0, o.embedding_noise);
  for (auto& x : v) x = x / norm + noise(rng);
  return v;
}

std::string image_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img%05zu", index);
  return buf;
}

}  // namespace

DatasetManifest generate_toy_dataset(const ToyDatasetOptions& o, const fs::path& out_dir) {
  const std::size_t total = o.train_images + o.val_images + o.test_images;
  if (total < 10) throw std::invalid_argument("toy dataset: at least 10 images are required");
  if (o.objects < 1 || o.objects > toy_object_names().size()) {
    throw std::invalid_argument("toy dataset: objects must be in [1, " + std::to_string(toy_object_names().size()) + "]");
  }
  if (o.attributes < 1 || o.attributes > toy_attribute_names().size()) {
    throw std::invalid_argument("toy dataset: attributes must be in [1, " +
                                std::to_string(toy_attribute_names().size()) + "]");
  }
  if (o.min_concepts < 1 || o.min_concepts > o.max_concepts || o.max_concepts > o.objects ||
      o.max_concepts > o.regions) {
    throw std::invalid_argument("toy dataset: need 1 <= min_concepts <= max_concepts <= min(objects, regions)");
  }
  if (o.min_captions < 1 || o.min_captions > o.max_captions || o.max_captions > caption_templates().size()) {
    throw std::invalid_argument("toy dataset: captions per image must be in [1, " +
                                std::to_string(caption_templates().size()) + "]");
  }
  if (o.region_dim < 1) throw std::invalid_argument("toy dataset: region_dim must be positive");

  std::error_code ec;
  fs::create_directories(out_dir / "features", ec);
  if (ec) throw std::runtime_error("toy dataset: cannot create " + (out_dir / "features").string() + ": " + ec.message());

  std::mt19937_64 rng(o.seed);
  const std::size_t raw_dim = o.objects + o.attributes;
  // Fixed projection from the symbolic region code to the feature space.
  Tensor projection = Tensor::matrix(raw_dim, o.region_dim);
  std::normal_distribution<double> proj(0.0, 1.0 / std::sqrt(static_cast<double>(raw_dim)));
  for (auto& v : projection.values()) v = proj(rng);
  std::normal_distribution<double> feature_noise(0.0, o.feature_noise);

  DatasetManifest m;
  m.name = o.name;
  m.regions = o.regions;
  const std::pair<const char*, std::size_t> splits[] = {
      {"train", o.train_images}, {"val", o.val_images}, {"test", o.test_images}};
  std::size_t index = 0;
  for (const auto& [split, count] : splits) {
    auto& records = m.splits[split];
    for (std::size_t i = 0; i < count; ++i, ++index) {
      const std::string id = image_id(index);
      // Scene: distinct objects, each with one attribute, in object order.
      const std::size_t n_concepts = std::uniform_int_distribution<std::size_t>(o.min_concepts, o.max_concepts)(rng);
      std::vector<std::size_t> objects(o.objects);
      std::iota(objects.begin(), objects.end(), 0);
      std::shuffle(objects.begin(), objects.end(), rng);
      objects.resize(n_concepts);
      std::sort(objects.begin(), objects.end());
      std::vector<Concept> scene;
      for (std::size_t obj : objects) {
        scene.push_back({obj, std::uniform_int_distribution<std::size_t>(0, o.attributes - 1)(rng)});
      }

      Tensor raw = Tensor::matrix(o.regions, raw_dim);
      for (std::size_t r = 0; r < o.regions; ++r) {
        if (r < scene.size()) {
          raw(r, scene[r].object) += 1.0;
          raw(r, o.objects + scene[r].attribute) += 1.0;
        }
        for (std::size_t c = 0; c < raw_dim; ++c) raw(r, c) += feature_noise(rng);
      }
      std::vector<std::size_t> order(o.regions);
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      Tensor regions = Tensor::matrix(o.regions, o.region_dim);
      for (std::size_t r = 0; r < o.regions; ++r) {
        for (std::size_t c = 0; c < o.region_dim; ++c) {
          double acc = 0.0;
          for (std::size_t k = 0; k < raw_dim; ++k) acc += raw(order[r], k) * projection(k, c);
          regions(r, c) = acc;
        }
      }

      const std::size_t n_captions = std::uniform_int_distribution<std::size_t>(o.min_captions, o.max_captions)(rng);
      std::vector<std::size_t> templates(caption_templates().size());
      std::iota(templates.begin(), templates.end(), 0);
      std::shuffle(templates.begin(), templates.end(), rng);
      const std::string body = describe(scene);
      ManifestRecord rec;
      rec.image_id = id;
      for (std::size_t c = 0; c < n_captions; ++c) rec.captions.push_back(fill(caption_templates()[templates[c]], body));

      const auto image_embedding = bag_embedding(scene, o, rng);
      Tensor caption_embeddings = Tensor::matrix(n_captions, image_embedding.size());
      for (std::size_t c = 0; c < n_captions; ++c) {
        const auto e = bag_embedding(scene, o, rng);
        std::copy(e.begin(), e.end(), caption_embeddings.row(c).begin());
      }

      rec.region_feature_file = "features/" + id + ".regions.xtft";
      rec.retrieval_embedding_file = "features/" + id + ".embedding.xtft";
      rec.caption_embedding_file = "features/" + id + ".captions.xtft";
      write_feature_file(out_dir / rec.region_feature_file, regions);
      write_feature_file(out_dir / rec.retrieval_embedding_file,
                         Tensor({1, image_embedding.size()}, image_embedding));
      write_feature_file(out_dir / rec.caption_embedding_file, caption_embeddings);
      records.push_back(std::move(rec));
    }
  }
  m.save(out_dir / "manifest.json");
  return m;
}

// ---------------------------------------------------------------------------

std::vector<DatastoreEntry> caption_entries(const std::vector<ImageRecord>& images, std::int64_t first_id) {
  std::vector<DatastoreEntry> out;
  std::int64_t id = first_id;
  for (const auto& img : images) {
    if (img.caption_embeddings.rows() != img.captions.size() || img.captions.empty()) {
      throw std::invalid_argument("caption store: image " + img.image_id + " has no caption embeddings");
    }
    for (std::size_t c = 0; c < img.captions.size(); ++c) {
      const auto row = img.caption_embeddings.row(c);
      out.push_back({id++, img.image_id, img.captions[c], std::vector<double>(row.begin(), row.end())});
    }
  }
  return out;
}

std::vector<DatastoreEntry> image_entries(const std::vector<ImageRecord>& images, std::int64_t first_id) {
  std::vector<DatastoreEntry> out;
  std::int64_t id = first_id;
  for (const auto& img : images) out.push_back({id++, img.image_id, "", pool_regions(img.regions)});
  return out;
}

RetrievalResources build_retrieval_resources(const std::vector<ImageRecord>& images) {
  RetrievalResources r;
  r.captions = VectorIndex::build(caption_entries(images), Metric::cosine);
  r.images = VectorIndex::build(image_entries(images), Metric::euclidean);
  for (const auto& img : images) r.image_captions[img.image_id] = img.captions;
  return r;
}

}  // namespace ragcap
