#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ragcap {

// Reserved token ids. Fixed so that vocabulary files, checkpoints and masks
// agree without carrying a lookup table around.
inline constexpr int kPad = 0;
inline constexpr int kCls = 1;
inline constexpr int kSep = 2;
inline constexpr int kUnk = 3;
inline constexpr int kBos = 4;
inline constexpr int kEos = 5;
inline constexpr int kReservedCount = 6;

inline constexpr std::size_t kDefaultContextLength = 128;

// Lowercased, punctuation-stripped whitespace tokens.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  // Reserved tokens only.
  Vocabulary();

  // Words with frequency >= min_frequency, ordered by frequency (desc) then
  // lexicographically.
  static Vocabulary build(const std::vector<std::string>& corpus, std::size_t min_frequency = 1);
  // One token per line; the line number is the id.
  static Vocabulary load(const std::filesystem::path& path);
  static Vocabulary from_tokens(std::vector<std::string> tokens);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  int id(std::string_view token) const;  // kUnk when absent
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(std::string_view text) const;
  // FNV-1a over the newline-joined token list.
  std::uint64_t hash() const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// The concatenated linguistic input: [CLS, c1..., SEP, c2..., SEP, ..., PAD...].
struct TokenContext {
  std::vector<int> ids;                       // padded to the configured length
  std::vector<std::size_t> segment_boundaries;  // index of each SEP
  std::size_t source_caption_count = 0;       // captions represented (k)

  // Number of non-padding positions.
  std::size_t valid_length() const { return segment_boundaries.empty() ? 0 : segment_boundaries.back() + 1; }
  // Caption index each position belongs to; CLS shares segment 0 with the
  // first caption and padding takes the last segment.
  std::vector<int> segment_ids() const;
  std::vector<bool> padding_mask() const;
};

// Captions are taken in rank order. When the concatenation does not fit in
// max_len, words are dropped from the tail of the lowest-ranked caption first;
// CLS and every kept caption's SEP always survive.
TokenContext encode_context(const std::vector<std::string>& captions, const Vocabulary& vocab,
                            std::size_t max_len = kDefaultContextLength);

// Reserved ids are dropped, decoding stops at the first EOS.
std::string decode_tokens(const std::vector<int>& ids, const Vocabulary& vocab);

}  // namespace ragcap
