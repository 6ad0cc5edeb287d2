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

// ConceptNet-style triple store: assertion-dump parsing, an immutable
// concept-indexed view, and prioritized retrieval (image concepts first,
// question keywords second, top-k overall).
namespace klite::kg {

struct Triple {
  std::string head;
  std::string relation;
  std::string tail;
  double weight = 1.0;

  bool operator==(const Triple&) const = default;
};

// One parsed assertion line: a triple, a benign skip, or a recoverable error.
struct LineParse {
  enum class Status { triple, skip, error };
  enum class SkipReason { none, blank, comment, language, no_weight };

  Status status = Status::skip;
  SkipReason skip_reason = SkipReason::none;
  Triple triple;
  std::string error;
  std::size_t line_no = 0;
};

LineParse parse_assertion_line(std::string_view line, std::size_t line_no,
                               std::string_view language = "en");

// Inverse of parse_assertion_line for fixtures and round-trip checks.
std::string serialize_assertion_line(const Triple& t, std::string_view language = "en");

struct ParseStats {
  std::size_t triples = 0;
  std::size_t skipped = 0;
  std::size_t errors = 0;
  std::vector<std::string> error_messages;  // capped
};

// Parse a whole dump; malformed lines are counted and skipped.
std::vector<Triple> parse_assertions(std::istream& in, std::string_view language,
                                     ParseStats* stats);

class ConceptIndex {
 public:
  ConceptIndex() = default;
  static ConceptIndex build(std::vector<Triple> triples);

  const std::vector<Triple>& triples() const { return triples_; }
  std::span<const std::uint32_t> ids_for(std::string_view concept_token) const;
  const std::map<std::string, std::size_t>& relation_counts() const {
    return relation_counts_;
  }

  // <prefix>.triples.tsv + <prefix>.meta.json
  void save(const std::string& prefix, std::string_view language = "en") const;
  static ConceptIndex load(const std::string& prefix);

  std::string serialize_tsv() const;

 private:
  std::vector<Triple> triples_;
  std::map<std::string, std::vector<std::uint32_t>, std::less<>> by_concept_;
  std::map<std::string, std::size_t> relation_counts_;
};

enum class Provenance { image_concept, question_keyword };

std::string_view provenance_name(Provenance p);

struct RetrievedTriple {
  Triple triple;
  double score = 0.0;
  Provenance provenance = Provenance::image_concept;
};

struct RetrievalResult {
  std::vector<RetrievedTriple> entries;
};

// Image-concept matches outrank keyword-only matches; within a tier, score
// descending with triple id as the tie-break. Scoring:
//   weight * tier_multiplier (image 2, keyword 1) + 0.5 per extra matching
//   query term on the same triple.
// Duplicate (head, relation, tail) keys keep the highest-weight copy.
RetrievalResult retrieve(const ConceptIndex& index,
                         std::span<const std::string> image_concepts,
                         std::span<const std::string> question_keywords,
                         std::size_t k = 5,
                         const std::set<std::string>* relation_blocklist = nullptr);

struct RelationStat {
  std::size_t count = 0;
  double fraction = 0.0;
};

std::map<std::string, RelationStat> relation_histogram(
    std::span<const RetrievalResult> results);

// shortest round-trip decimal form, used by every TSV/JSONL writer
std::string format_double(double v);
std::string format_float(float v);

}  // namespace klite::kg
