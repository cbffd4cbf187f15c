#include "ragcap/model.hpp"

#include "ragcap/binary_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>

namespace ragcap {

namespace {

constexpr std::string_view kMagic = "XTCK";
constexpr std::uint32_t kVersion = 1;

using nlohmann::json;

json to_json(const EncoderConfig& c) {
  return {{"region_dim", c.region_dim},       {"d_model", c.d_model},
          {"heads", c.heads},                 {"text_layers", c.text_layers},
          {"visual_layers", c.visual_layers}, {"cross_layers", c.cross_layers},
          {"ffn_dim", c.ffn_dim},             {"max_positions", c.max_positions},
          {"max_segments", c.max_segments},   {"use_boxes", c.use_boxes},
          {"layer_norm_eps", c.layer_norm_eps}, {"vocab_size", c.vocab_size}};
}

json to_json(const DecoderConfig& c) {
  return {{"d_model", c.d_model},       {"heads", c.heads},           {"layers", c.layers},
          {"ffn_dim", c.ffn_dim},       {"max_length", c.max_length}, {"memory_dim", c.memory_dim},
          {"layer_norm_eps", c.layer_norm_eps}, {"vocab_size", c.vocab_size}};
}

template <typename T>
void take(const json& j, const char* key, T& field, std::vector<std::string>& seen) {
  seen.emplace_back(key);
  if (j.contains(key)) field = j.at(key).get<T>();
}

void reject_unknown(const json& j, const std::vector<std::string>& known, const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument("model config: unknown key '" + key + "' in " + where);
    }
  }
}

void from_json_into(const json& j, EncoderConfig& c) {
  std::vector<std::string> k;
  take(j, "region_dim", c.region_dim, k);
  take(j, "d_model", c.d_model, k);
  take(j, "heads", c.heads, k);
  take(j, "text_layers", c.text_layers, k);
  take(j, "visual_layers", c.visual_layers, k);
  take(j, "cross_layers", c.cross_layers, k);
  take(j, "ffn_dim", c.ffn_dim, k);
  take(j, "max_positions", c.max_positions, k);
  take(j, "max_segments", c.max_segments, k);
  take(j, "use_boxes", c.use_boxes, k);
  take(j, "layer_norm_eps", c.layer_norm_eps, k);
  take(j, "vocab_size", c.vocab_size, k);
  reject_unknown(j, k, "encoder");
}

void from_json_into(const json& j, DecoderConfig& c) {
  std::vector<std::string> k;
  take(j, "d_model", c.d_model, k);
  take(j, "heads", c.heads, k);
  take(j, "layers", c.layers, k);
  take(j, "ffn_dim", c.ffn_dim, k);
  take(j, "max_length", c.max_length, k);
  take(j, "memory_dim", c.memory_dim, k);
  take(j, "layer_norm_eps", c.layer_norm_eps, k);
  take(j, "vocab_size", c.vocab_size, k);
  reject_unknown(j, k, "decoder");
}

json config_json(const ModelConfig& c) {
  return {{"encoder", to_json(c.encoder)}, {"decoder", to_json(c.decoder)}, {"context_length", c.context_length}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  std::vector<std::string> k{"encoder", "decoder"};
  if (j.contains("encoder")) from_json_into(j.at("encoder"), c.encoder);
  if (j.contains("decoder")) from_json_into(j.at("decoder"), c.decoder);
  take(j, "context_length", c.context_length, k);
  reject_unknown(j, k, "model");
  return c;
}

}  // namespace

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.encoder.d_model = 32;
  c.encoder.heads = 4;
  c.encoder.text_layers = 1;
  c.encoder.visual_layers = 1;
  c.encoder.cross_layers = 1;
  c.encoder.ffn_dim = 64;
  c.decoder.d_model = 32;
  c.decoder.heads = 4;
  c.decoder.layers = 2;
  c.decoder.ffn_dim = 64;
  c.decoder.max_length = 20;
  c.context_length = 96;
  return c;
}

ModelConfig resolve(ModelConfig c, const Vocabulary& vocab) {
  c.encoder.vocab_size = vocab.size();
  c.decoder.vocab_size = vocab.size();
  c.decoder.memory_dim = c.encoder.d_model;
  c.encoder.max_positions = c.context_length;
  return c;
}

std::string model_config_to_json(const ModelConfig& config) { return config_json(config).dump(2); }

ModelConfig model_config_from_json(std::string_view text) {
  try {
    return config_from(json::parse(text));
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("model config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

CaptionModel::CaptionModel(const ModelConfig& config, Vocabulary vocab, std::uint64_t seed)
    : config_(resolve(config, vocab)), vocab_(std::move(vocab)), params_(std::make_unique<ParameterSet>()) {
  if (config_.context_length < 2) throw std::invalid_argument("model: context_length must be at least 2");
  std::mt19937_64 rng(seed);
  Encoder::init_parameters(config_.encoder, *params_, rng);
  Decoder::init_parameters(config_.decoder, *params_, rng);
  encoder_ = std::make_unique<Encoder>(config_.encoder, *params_);
  decoder_ = std::make_unique<Decoder>(config_.decoder, *params_);
}

CaptionModel::CaptionModel(const ModelConfig& config, Vocabulary vocab, std::unique_ptr<ParameterSet> params)
    : config_(config), vocab_(std::move(vocab)), params_(std::move(params)) {
  encoder_ = std::make_unique<Encoder>(config_.encoder, *params_);
  decoder_ = std::make_unique<Decoder>(config_.decoder, *params_);
}

CaptionModel::CaptionModel(CaptionModel&&) noexcept = default;
CaptionModel& CaptionModel::operator=(CaptionModel&&) noexcept = default;
CaptionModel::~CaptionModel() = default;

TokenContext CaptionModel::context(const std::vector<std::string>& captions) const {
  return encode_context(captions, vocab_, config_.context_length);
}

std::vector<int> CaptionModel::target(const std::string& caption) const {
  std::vector<int> words = vocab_.encode(caption);
  const std::size_t room = config_.decoder.max_length - 1;
  if (words.size() > room) words.resize(room);
  std::vector<int> out{kBos};
  out.insert(out.end(), words.begin(), words.end());
  out.push_back(kEos);
  return out;
}

EncoderOutput CaptionModel::encode(const RegionFeatures& regions, const TokenContext& context) const {
  return encoder_->encode(*params_, regions, context);
}

CaptionHypothesis CaptionModel::generate(const EncoderOutput& encoded, std::size_t beam_width) const {
  const StepScorer scorer = decoder_->scorer(*params_, encoded);
  if (beam_width == 1) return greedy_decode(scorer, decoder_->limits());
  return beam_search(scorer, beam_width, decoder_->limits());
}

std::string CaptionModel::text(const CaptionHypothesis& hypothesis) const {
  return decode_tokens(hypothesis.tokens, vocab_);
}

std::vector<Tensor> CaptionModel::snapshot() const {
  std::vector<Tensor> out;
  out.reserve(params_->size());
  for (const auto& [name, p] : params_->items()) out.push_back(p.value);
  return out;
}

void CaptionModel::restore(const std::vector<Tensor>& values) {
  if (values.size() != params_->size()) throw std::invalid_argument("model: snapshot size mismatch");
  std::size_t i = 0;
  for (auto& [name, p] : params_->items()) {
    if (values[i].shape() != p.value.shape()) throw ShapeError("model: snapshot shape mismatch for " + name);
    p.value = values[i++];
  }
}

void CaptionModel::save(const std::filesystem::path& path, const CheckpointInfo& info) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
  json header{{"config", config_json(config_)},
              {"vocab_hash", vocab_.hash()},
              {"vocab", vocab_.tokens()},
              {"epoch", info.epoch},
              {"best_bleu4", info.best_bleu4},
              {"stage", info.stage}};
  const std::string text = header.dump();
  binary::write_bytes(out, kMagic);
  binary::write<std::uint32_t>(out, kVersion);
  binary::write<std::uint64_t>(out, text.size());
  binary::write_bytes(out, text);
  binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(params_->size()));
  for (const auto& [name, p] : params_->items()) {
    binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    binary::write_bytes(out, name);
    binary::write<std::uint8_t>(out, static_cast<std::uint8_t>(p.group));
    binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) binary::write<std::uint64_t>(out, d);
    binary::write_doubles(out, p.value.values());
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

CaptionModel CaptionModel::load(const std::filesystem::path& path, CheckpointInfo* info) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  const std::string what = "checkpoint " + path.string();
  binary::expect_magic(in, kMagic, what);
  const auto version = binary::read<std::uint32_t>(in, what);
  if (version != kVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto header_size = binary::read<std::uint64_t>(in, what);
  if (header_size > binary::remaining(in)) throw CorruptionError(what + ": truncated file");
  json header;
  try {
    header = json::parse(binary::read_string(in, header_size, what));
  } catch (const json::exception& e) {
    throw CorruptionError(what + ": header is not valid JSON (" + e.what() + ")");
  }
  ModelConfig config;
  Vocabulary vocab;
  try {
    config = config_from(header.at("config"));
    vocab = Vocabulary::from_tokens(header.at("vocab").get<std::vector<std::string>>());
    if (vocab.hash() != header.at("vocab_hash").get<std::uint64_t>()) {
      throw CorruptionError(what + ": vocabulary hash mismatch");
    }
    if (info) {
      info->epoch = header.at("epoch").get<std::size_t>();
      info->best_bleu4 = header.at("best_bleu4").get<double>();
      info->stage = header.at("stage").get<std::string>();
    }
  } catch (const json::exception& e) {
    throw CorruptionError(what + ": malformed header (" + e.what() + ")");
  }

  auto params = std::make_unique<ParameterSet>();
  const auto count = binary::read<std::uint32_t>(in, what);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_size = binary::read<std::uint32_t>(in, what);
    if (name_size > binary::remaining(in)) throw CorruptionError(what + ": truncated file");
    const std::string name = binary::read_string(in, name_size, what);
    const auto group = binary::read<std::uint8_t>(in, what);
    if (group > 1) throw CorruptionError(what + ": bad parameter group for " + name);
    const auto rank = binary::read<std::uint32_t>(in, what);
    if (rank == 0 || rank > 4) throw CorruptionError(what + ": bad rank for " + name);
    Shape shape(rank);
    std::uint64_t total = 1;
    for (auto& d : shape) {
      d = binary::read<std::uint64_t>(in, what);
      total *= d;
    }
    if (total > binary::remaining(in) / sizeof(double)) throw CorruptionError(what + ": truncated file");
    params->add(name, Tensor(shape, binary::read_doubles(in, total, what)), static_cast<ParamGroup>(group));
  }
  if (binary::remaining(in) != 0) throw CorruptionError(what + ": trailing bytes");
  // Binding checks every expected parameter exists with the right shape; a
  // fresh layout catches leftovers.
  ParameterSet layout;
  std::mt19937_64 rng(0);
  Encoder::init_parameters(config.encoder, layout, rng);
  Decoder::init_parameters(config.decoder, layout, rng);
  if (layout.size() != params->size()) throw CorruptionError(what + ": parameter set mismatch");
  return CaptionModel(config, std::move(vocab), std::move(params));
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a(buf.str());
  return hex.str();
}

}  // namespace ragcap
