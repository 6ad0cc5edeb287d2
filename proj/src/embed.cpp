#include "klite/embed.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "klite/rng.hpp"

namespace klite::embed {

void EmbeddingTable::insert(std::string token, std::vector<float> vec) {
  if (vec.size() != dim_)
    throw DataError("table '" + name_ + "': vector for '" + token + "' has " +
                    std::to_string(vec.size()) + " components, want " +
                    std::to_string(dim_));
  for (const float v : vec)
    if (!std::isfinite(v))
      throw DataError("table '" + name_ + "': non-finite value for '" + token + "'");
  if (lookup_.contains(token))
    throw DataError("table '" + name_ + "': duplicate token '" + token + "'");
  lookup_.emplace(token, tokens_.size());
  tokens_.push_back(std::move(token));
  vectors_.push_back(std::move(vec));
}

const std::vector<float>* EmbeddingTable::find(std::string_view token) const {
  const auto it = lookup_.find(token);
  return it == lookup_.end() ? nullptr : &vectors_[it->second];
}

EmbeddingTable EmbeddingTable::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open embedding file " + path);
  std::string line;
  if (!std::getline(f, line))
    throw DataError(path + ": missing header line");
  std::size_t count = 0, dim = 0;
  {
    const char* p = line.data();
    const char* end = line.data() + line.size();
    auto r1 = std::from_chars(p, end, count);
    if (r1.ec != std::errc{} || r1.ptr == end || *r1.ptr != ' ')
      throw DataError(path + ": bad header '" + line + "'");
    auto r2 = std::from_chars(r1.ptr + 1, end, dim);
    if (r2.ec != std::errc{} || r2.ptr != end)
      throw DataError(path + ": bad header '" + line + "'");
  }
  std::string stem = path;
  if (const auto slash = stem.find_last_of('/'); slash != std::string::npos)
    stem = stem.substr(slash + 1);
  if (const auto dot = stem.find('.'); dot != std::string::npos)
    stem = stem.substr(0, dot);

  EmbeddingTable table(stem, dim);
  std::size_t line_no = 1;
  std::vector<float> vec;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::size_t sp = line.find(' ');
    if (sp == std::string::npos || sp == 0)
      throw DataError(path + " line " + std::to_string(line_no) +
                      ": expected '<token> <values...>'");
    std::string token = line.substr(0, sp);
    vec.clear();
    const char* p = line.data() + sp;
    const char* end = line.data() + line.size();
    while (p != end) {
      if (*p != ' ')
        throw DataError(path + " line " + std::to_string(line_no) +
                        ": malformed value separator");
      ++p;
      float v = 0.f;
      const auto r = std::from_chars(p, end, v);
      if (r.ec != std::errc{})
        throw DataError(path + " line " + std::to_string(line_no) +
                        ": bad float");
      p = r.ptr;
      vec.push_back(v);
    }
    if (vec.size() != dim)
      throw DataError(path + " line " + std::to_string(line_no) + ": row has " +
                      std::to_string(vec.size()) + " values, header says " +
                      std::to_string(dim));
    try {
      table.insert(std::move(token), vec);
    } catch (const DataError& e) {
      throw DataError(path + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (table.size() != count)
    throw DataError(path + ": header promises " + std::to_string(count) +
                    " rows, found " + std::to_string(table.size()));
  return table;
}

void EmbeddingTable::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f << tokens_.size() << ' ' << dim_ << '\n';
  char buf[48];
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    f << tokens_[i];
    for (const float v : vectors_[i]) {
      // 9 significant digits round-trips binary32 exactly
      std::snprintf(buf, sizeof(buf), " %.9g", static_cast<double>(v));
      f << buf;
    }
    f << '\n';
  }
}

namespace {

double norm_d(std::span<const float> v) {
  double s = 0.0;
  for (const float x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

double dot_d(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

}  // namespace

ConceptDetection detect_concepts(std::span<const float> image_vec,
                                 const EmbeddingTable& labels,
                                 std::size_t top_k) {
  if (labels.empty()) throw DataError("detect_concepts: empty label table");
  if (labels.dim() != image_vec.size())
    throw DataError("detect_concepts: image vector has " +
                    std::to_string(image_vec.size()) + " dims, labels have " +
                    std::to_string(labels.dim()));
  if (top_k == 0) throw DataError("detect_concepts: top_k must be >= 1");
  const double img_norm = norm_d(image_vec);
  if (img_norm == 0.0)
    throw DataError("detect_concepts: zero-norm image vector, cosine undefined");

  ConceptDetection out;
  out.concepts.reserve(labels.size());
  for (const std::string& token : labels.tokens()) {
    const std::vector<float>& e = *labels.find(token);
    const double e_norm = norm_d(e);
    if (e_norm == 0.0)
      throw DataError("detect_concepts: zero-norm label vector '" + token + "'");
    double cos = dot_d(image_vec, e) / (img_norm * e_norm);
    cos = std::clamp(cos, -1.0, 1.0);
    out.concepts.push_back({token, cos});
  }
  std::sort(out.concepts.begin(), out.concepts.end(),
            [](const ConceptDetection::Item& a, const ConceptDetection::Item& b) {
              if (a.score != b.score) return a.score > b.score;
              return a.token < b.token;
            });
  if (out.concepts.size() > top_k) out.concepts.resize(top_k);
  return out;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (const char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (std::isalnum(c) || c == '_') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
    // other punctuation is stripped
  }
  flush();
  return out;
}

std::vector<std::string> extract_keywords(std::string_view question,
                                          const std::set<std::string>& stopwords) {
  std::vector<std::string> out;
  for (std::string& tok : tokenize(question)) {
    if (stopwords.contains(tok)) continue;
    if (std::find(out.begin(), out.end(), tok) != out.end()) continue;
    out.push_back(std::move(tok));
  }
  return out;
}

QuestionEncoding encode_question(std::string_view question,
                                 const EmbeddingTable& table) {
  if (table.empty()) throw DataError("encode_question: empty table");
  QuestionEncoding enc;
  enc.vec.assign(table.dim(), 0.f);
  std::vector<double> acc(table.dim(), 0.0);
  std::size_t hits = 0;
  for (const std::string& tok : tokenize(question)) {
    const std::vector<float>* v = table.find(tok);
    if (!v) continue;
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += (*v)[i];
    ++hits;
  }
  if (hits == 0) {
    enc.oov = true;
    return enc;
  }
  for (std::size_t i = 0; i < acc.size(); ++i)
    enc.vec[i] = static_cast<float>(acc[i] / static_cast<double>(hits));
  return enc;
}

EmbeddingTable random_table(std::string name, std::span<const std::string> tokens,
                            std::size_t dim, std::uint64_t seed) {
  rng::Rng r(seed);
  EmbeddingTable table(std::move(name), dim);
  std::vector<float> vec(dim);
  for (const std::string& tok : tokens) {
    double sq = 0.0;
    std::vector<double> raw(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      raw[i] = r.normal();
      sq += raw[i] * raw[i];
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t i = 0; i < dim; ++i)
      vec[i] = static_cast<float>(raw[i] * inv);
    table.insert(tok, vec);
  }
  return table;
}

namespace {

// ~150 English function words; determiners, auxiliaries, pronouns,
// prepositions, conjunctions and question scaffolding.
constexpr auto kStopwords = std::to_array<std::string_view>({
    "a",       "about",   "above",  "after",   "again",   "against", "all",
    "am",      "an",      "and",    "any",     "are",     "as",      "at",
    "be",      "because", "been",   "before",  "being",   "below",   "between",
    "both",    "but",     "by",     "can",     "cannot",  "could",   "did",
    "do",      "does",    "doing",  "down",    "during",  "each",    "either",
    "else",    "ever",    "every",  "few",     "for",     "from",    "further",
    "had",     "has",     "have",   "having",  "he",      "her",     "here",
    "hers",    "herself", "him",    "himself", "his",     "how",     "i",
    "if",      "in",      "into",   "is",      "it",      "its",     "itself",
    "just",    "let",     "many",   "may",     "me",      "might",   "more",
    "most",    "much",    "must",   "my",      "myself",  "neither", "no",
    "nor",     "not",     "now",    "of",      "off",     "on",      "once",
    "only",    "or",      "other",  "ought",   "our",     "ours",    "ourselves",
    "out",     "over",    "own",    "same",    "shall",   "she",     "should",
    "so",      "some",    "such",   "than",    "that",    "the",     "their",
    "theirs",  "them",    "themselves", "then", "there",  "these",   "they",
    "this",    "those",   "through", "to",     "too",     "under",   "until",
    "up",      "upon",    "us",     "very",    "was",     "we",      "were",
    "what",    "when",    "whence", "where",   "whether", "which",   "while",
    "who",     "whom",    "whose",  "why",     "will",    "with",    "within",
    "without", "would",   "yet",    "you",     "your",    "yours",   "yourself",
    "yourselves", "also",  "via",   "per",     "amid",    "among",
});

}  // namespace

std::span<const std::string_view> default_stopwords() { return kStopwords; }

std::set<std::string> default_stopword_set() {
  std::set<std::string> out;
  for (const std::string_view w : kStopwords) out.emplace(w);
  return out;
}

std::set<std::string> load_stopwords(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open stopword file " + path);
  std::set<std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
      line.pop_back();
    if (!line.empty()) out.insert(line);
  }
  return out;
}

void save_stopwords(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write stopword file " + path);
  const auto set = default_stopword_set();  // sorted, deduplicated
  for (const std::string& w : set) f << w << '\n';
}

}  // namespace klite::embed
