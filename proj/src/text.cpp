#include "ragcap/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <stdexcept>

namespace ragcap {

namespace {

const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> tokens = {"[PAD]", "[CLS]", "[SEP]", "[UNK]", "[BOS]", "[EOS]"};
  return tokens;
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      continue;
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

Vocabulary::Vocabulary() : tokens_(reserved_tokens()) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], static_cast<int>(i));
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus, std::size_t min_frequency) {
  if (corpus.empty()) throw std::invalid_argument("vocabulary: empty corpus");
  if (min_frequency < 1) throw std::invalid_argument("vocabulary: min_frequency must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& caption : corpus) {
    for (auto& w : tokenize(caption)) ++counts[w];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [w, n] : counts) {
    if (n >= min_frequency) kept.emplace_back(w, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens = reserved_tokens();
  for (auto& [w, _] : kept) tokens.push_back(w);
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  const auto& reserved = reserved_tokens();
  if (tokens.size() < reserved.size() || !std::equal(reserved.begin(), reserved.end(), tokens.begin())) {
    throw std::invalid_argument("vocabulary: reserved tokens missing or out of place");
  }
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  v.ids_.clear();
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.ids_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("vocabulary: duplicate token '" + v.tokens_[i] + "'");
    }
  }
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("vocabulary: cannot open " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("vocabulary: cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

int Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return ids_.count(std::string(token)) != 0; }

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("vocabulary: unknown id " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> out;
  for (const auto& w : tokenize(text)) out.push_back(id(w));
  return out;
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : tokens_) {
    for (unsigned char c : t) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    h ^= static_cast<unsigned char>('\n');
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<int> TokenContext::segment_ids() const {
  std::vector<int> seg(ids.size(), 0);
  if (segment_boundaries.empty()) return seg;
  std::size_t closed = 0;  // SEPs strictly before position i
  for (std::size_t i = 0; i < ids.size(); ++i) {
    seg[i] = static_cast<int>(std::min(closed, segment_boundaries.size() - 1));
    if (closed < segment_boundaries.size() && i == segment_boundaries[closed]) ++closed;
  }
  return seg;
}

std::vector<bool> TokenContext::padding_mask() const {
  std::vector<bool> mask(ids.size(), false);
  for (std::size_t i = valid_length(); i < ids.size(); ++i) mask[i] = true;
  return mask;
}

TokenContext encode_context(const std::vector<std::string>& captions, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 2) throw std::invalid_argument("encode_context: max_len must be at least 2");
  std::vector<std::vector<int>> encoded;
  for (const auto& c : captions) encoded.push_back(vocab.encode(c));
  // CLS plus one SEP per caption; captions whose SEP cannot fit are dropped.
  const std::size_t segments = std::max<std::size_t>(1, std::min(encoded.size(), max_len - 1));
  const std::size_t kept_captions = std::min(encoded.size(), segments);
  std::size_t budget = max_len - 1 - segments;

  TokenContext ctx;
  ctx.source_caption_count = kept_captions;
  ctx.ids.reserve(max_len);
  ctx.ids.push_back(kCls);
  if (kept_captions == 0) {
    ctx.segment_boundaries.push_back(ctx.ids.size());
    ctx.ids.push_back(kSep);
  }
  for (std::size_t c = 0; c < kept_captions; ++c) {
    const std::size_t take = std::min(budget, encoded[c].size());
    budget -= take;
    ctx.ids.insert(ctx.ids.end(), encoded[c].begin(), encoded[c].begin() + static_cast<std::ptrdiff_t>(take));
    ctx.segment_boundaries.push_back(ctx.ids.size());
    ctx.ids.push_back(kSep);
  }
  ctx.ids.resize(max_len, kPad);
  return ctx;
}

std::string decode_tokens(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    const std::string& tok = vocab.token(id);
    if (id == kEos) break;
    if (id < kReservedCount) continue;
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

}  // namespace ragcap
