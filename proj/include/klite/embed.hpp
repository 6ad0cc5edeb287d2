#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "klite/errors.hpp"

// Frozen embedding tables standing in for CLIP text/image encoders, plus
// zero-shot concept detection and question keyword extraction.
namespace klite::embed {

// token -> fixed-dimension vector; immutable once built, insertion order is
// preserved so save/load round-trips byte-identically.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::string name, std::size_t dim)
      : name_(std::move(name)), dim_(dim) {}

  const std::string& name() const { return name_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return tokens_.size(); }
  bool empty() const { return tokens_.empty(); }

  void insert(std::string token, std::vector<float> vec);
  const std::vector<float>* find(std::string_view token) const;
  std::span<const std::string> tokens() const { return tokens_; }

  // word2vec text format: "<count> <dim>\n" then "<token> <v1> ... <vdim>\n"
  static EmbeddingTable load(const std::string& path);
  void save(const std::string& path) const;

 private:
  std::string name_;
  std::size_t dim_ = 0;
  std::vector<std::string> tokens_;
  std::vector<std::vector<float>> vectors_;
  std::map<std::string, std::size_t, std::less<>> lookup_;
};

struct ConceptDetection {
  struct Item {
    std::string token;
    double score;  // cosine in [-1, 1]
  };
  std::vector<Item> concepts;  // score descending, ties token-lexicographic
};

// Top-k labels by cosine similarity to image_vec. Zero-norm vectors are an
// error (cosine undefined).
ConceptDetection detect_concepts(std::span<const float> image_vec,
                                 const EmbeddingTable& labels,
                                 std::size_t top_k = 5);

// lowercase, punctuation-stripped whitespace tokens (keeps [a-z0-9_])
std::vector<std::string> tokenize(std::string_view text);

// tokenize, drop stopwords, dedupe keeping first occurrence
std::vector<std::string> extract_keywords(std::string_view question,
                                          const std::set<std::string>& stopwords);

struct QuestionEncoding {
  std::vector<float> vec;
  bool oov = false;  // true when no token was in vocabulary (vec is zero)
};

// mean of in-vocabulary token embeddings
QuestionEncoding encode_question(std::string_view question,
                                 const EmbeddingTable& table);

// seeded Gaussian rows, L2-normalized; the stand-in for pretrained encoders
EmbeddingTable random_table(std::string name, std::span<const std::string> tokens,
                            std::size_t dim, std::uint64_t seed);

// the compiled-in default stopword list (one token per element)
std::span<const std::string_view> default_stopwords();
std::set<std::string> default_stopword_set();
std::set<std::string> load_stopwords(const std::string& path);
void save_stopwords(const std::string& path);

}  // namespace klite::embed
