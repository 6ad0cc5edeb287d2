#include "klite/kg.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <istream>
#include <sstream>

#include <json.hpp>

namespace klite::kg {

namespace {

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool has_whitespace(std::string_view s) {
  return s.find_first_of(" \t\r\n\f\v") != std::string_view::npos;
}

bool is_blank(std::string_view s) {
  return s.find_first_not_of(" \t\r\n") == std::string_view::npos;
}

LineParse fail(std::size_t line_no, std::string msg) {
  LineParse p;
  p.status = LineParse::Status::error;
  p.line_no = line_no;
  p.error = "line " + std::to_string(line_no) + ": " + std::move(msg);
  return p;
}

LineParse skip(std::size_t line_no, LineParse::SkipReason why) {
  LineParse p;
  p.status = LineParse::Status::skip;
  p.skip_reason = why;
  p.line_no = line_no;
  return p;
}

// /c/<lang>/<token>[/...] -> (lang, token); token lowercased
struct ConceptUri {
  std::string lang;
  std::string token;
};

std::optional<ConceptUri> parse_concept_uri(std::string_view uri) {
  if (!uri.starts_with("/c/")) return std::nullopt;
  const auto parts = split(uri, '/');  // "", "c", lang, token, ...
  if (parts.size() < 4 || parts[2].empty() || parts[3].empty()) return std::nullopt;
  return ConceptUri{std::string(parts[2]), lower(parts[3])};
}

}  // namespace

LineParse parse_assertion_line(std::string_view line, std::size_t line_no,
                               std::string_view language) {
  if (is_blank(line)) return skip(line_no, LineParse::SkipReason::blank);
  if (line.starts_with("#")) return skip(line_no, LineParse::SkipReason::comment);
  // strip trailing CR from CRLF dumps
  if (line.ends_with('\r')) line.remove_suffix(1);

  const auto fields = split(line, '\t');
  if (fields.size() != 5)
    return fail(line_no, "expected 5 tab-separated fields, got " +
                             std::to_string(fields.size()));

  const std::string_view rel_uri = fields[1];
  if (!rel_uri.starts_with("/r/") || rel_uri.size() <= 3)
    return fail(line_no, "relation URI must start with /r/: '" +
                             std::string(rel_uri) + "'");
  std::string relation(rel_uri.substr(3));
  if (has_whitespace(relation))
    return fail(line_no, "relation contains whitespace");

  const auto start = parse_concept_uri(fields[2]);
  if (!start)
    return fail(line_no, "malformed start URI '" + std::string(fields[2]) + "'");
  const auto end = parse_concept_uri(fields[3]);
  if (!end)
    return fail(line_no, "malformed end URI '" + std::string(fields[3]) + "'");
  if (has_whitespace(start->token) || has_whitespace(end->token))
    return fail(line_no, "concept token contains whitespace");

  if (start->lang != language || end->lang != language)
    return skip(line_no, LineParse::SkipReason::language);

  const std::string_view meta = fields[4];
  if (is_blank(meta)) return skip(line_no, LineParse::SkipReason::no_weight);

  double weight = 1.0;  // ConceptNet's default when metadata lacks the key
  try {
    const auto j = nlohmann::json::parse(meta);
    if (j.contains("weight")) {
      if (!j["weight"].is_number())
        return fail(line_no, "weight is not numeric");
      weight = j["weight"].get<double>();
      if (!(weight >= 0.0))
        return fail(line_no, "negative weight " + std::to_string(weight));
    }
  } catch (const nlohmann::json::parse_error&) {
    return fail(line_no, "invalid JSON metadata");
  }

  LineParse p;
  p.status = LineParse::Status::triple;
  p.line_no = line_no;
  p.triple = Triple{start->token, std::move(relation), end->token, weight};
  return p;
}

std::string serialize_assertion_line(const Triple& t, std::string_view language) {
  std::string out = "/a/[/r/" + t.relation + "/,/c/" + std::string(language) +
                    "/" + t.head + "/,/c/" + std::string(language) + "/" +
                    t.tail + "/]";
  out += "\t/r/" + t.relation;
  out += "\t/c/" + std::string(language) + "/" + t.head;
  out += "\t/c/" + std::string(language) + "/" + t.tail;
  out += "\t{\"weight\": " + format_double(t.weight) + "}";
  return out;
}

std::vector<Triple> parse_assertions(std::istream& in, std::string_view language,
                                     ParseStats* stats) {
  std::vector<Triple> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    LineParse p = parse_assertion_line(line, line_no, language);
    switch (p.status) {
      case LineParse::Status::triple:
        out.push_back(std::move(p.triple));
        if (stats) ++stats->triples;
        break;
      case LineParse::Status::skip:
        if (stats) ++stats->skipped;
        break;
      case LineParse::Status::error:
        if (stats) {
          ++stats->errors;
          if (stats->error_messages.size() < 20)
            stats->error_messages.push_back(std::move(p.error));
        }
        break;
    }
  }
  return out;
}

ConceptIndex ConceptIndex::build(std::vector<Triple> triples) {
  ConceptIndex idx;
  idx.triples_ = std::move(triples);
  for (std::size_t i = 0; i < idx.triples_.size(); ++i) {
    const Triple& t = idx.triples_[i];
    const auto id = static_cast<std::uint32_t>(i);
    idx.by_concept_[t.head].push_back(id);
    if (t.tail != t.head) idx.by_concept_[t.tail].push_back(id);
    ++idx.relation_counts_[t.relation];
  }
  // ids appended in increasing order, so each list is already sorted
  return idx;
}

std::span<const std::uint32_t> ConceptIndex::ids_for(std::string_view concept_token) const {
  const auto it = by_concept_.find(concept_token);
  if (it == by_concept_.end()) return {};
  return it->second;
}

std::string ConceptIndex::serialize_tsv() const {
  std::string out;
  for (const Triple& t : triples_) {
    out += t.head;
    out += '\t';
    out += t.relation;
    out += '\t';
    out += t.tail;
    out += '\t';
    out += format_double(t.weight);
    out += '\n';
  }
  return out;
}

void ConceptIndex::save(const std::string& prefix, std::string_view language) const {
  {
    std::ofstream f(prefix + ".triples.tsv", std::ios::binary);
    if (!f) throw DataError("cannot write " + prefix + ".triples.tsv");
    f << serialize_tsv();
  }
  nlohmann::ordered_json meta;
  meta["format"] = "klite-triples-tsv-v1";
  meta["language"] = std::string(language);
  meta["triple_count"] = triples_.size();
  meta["concept_count"] = by_concept_.size();
  nlohmann::ordered_json rc = nlohmann::ordered_json::object();
  for (const auto& [rel, count] : relation_counts_) rc[rel] = count;
  meta["relation_counts"] = rc;
  std::ofstream f(prefix + ".meta.json", std::ios::binary);
  if (!f) throw DataError("cannot write " + prefix + ".meta.json");
  f << meta.dump(2) << '\n';
}

ConceptIndex ConceptIndex::load(const std::string& prefix) {
  std::ifstream f(prefix + ".triples.tsv", std::ios::binary);
  if (!f) throw DataError("cannot open " + prefix + ".triples.tsv");
  std::vector<Triple> triples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 4)
      throw DataError(prefix + ".triples.tsv line " + std::to_string(line_no) +
                      ": expected 4 fields");
    double w = 0.0;
    const auto [ptr, ec] =
        std::from_chars(fields[3].data(), fields[3].data() + fields[3].size(), w);
    if (ec != std::errc{} || ptr != fields[3].data() + fields[3].size())
      throw DataError(prefix + ".triples.tsv line " + std::to_string(line_no) +
                      ": bad weight '" + std::string(fields[3]) + "'");
    triples.push_back(Triple{std::string(fields[0]), std::string(fields[1]),
                             std::string(fields[2]), w});
  }
  return ConceptIndex::build(std::move(triples));
}

std::string_view provenance_name(Provenance p) {
  return p == Provenance::image_concept ? "image_concept" : "question_keyword";
}

namespace {

struct Candidate {
  std::uint32_t id;
  double score;
  Provenance prov;
};

}  // namespace

RetrievalResult retrieve(const ConceptIndex& index,
                         std::span<const std::string> image_concepts,
                         std::span<const std::string> question_keywords,
                         std::size_t k,
                         const std::set<std::string>* relation_blocklist) {
  const std::set<std::string, std::less<>> image_set(image_concepts.begin(),
                                                     image_concepts.end());
  std::set<std::string, std::less<>> query_terms = {image_concepts.begin(),
                                                    image_concepts.end()};
  query_terms.insert(question_keywords.begin(), question_keywords.end());

  std::vector<std::uint32_t> ids;
  for (const std::string& c : image_concepts) {
    const auto r = index.ids_for(c);
    ids.insert(ids.end(), r.begin(), r.end());
  }
  for (const std::string& c : question_keywords) {
    const auto r = index.ids_for(c);
    ids.insert(ids.end(), r.begin(), r.end());
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());

  std::vector<Candidate> cands;
  cands.reserve(ids.size());
  for (const std::uint32_t id : ids) {
    const Triple& t = index.triples()[id];
    if (relation_blocklist && relation_blocklist->contains(t.relation)) continue;
    std::size_t matches = 0;
    for (const std::string& q : query_terms)
      if (q == t.head || q == t.tail) ++matches;
    if (matches == 0) continue;
    const bool image_tier =
        image_set.contains(t.head) || image_set.contains(t.tail);
    const double tier_mult = image_tier ? 2.0 : 1.0;
    const double score =
        t.weight * tier_mult + 0.5 * static_cast<double>(matches - 1);
    cands.push_back({id, score,
                     image_tier ? Provenance::image_concept
                                : Provenance::question_keyword});
  }

  // duplicate (head, relation, tail): highest weight wins, then lowest id
  std::map<std::tuple<std::string_view, std::string_view, std::string_view>,
           Candidate>
      best;
  for (const Candidate& c : cands) {
    const Triple& t = index.triples()[c.id];
    const auto key = std::make_tuple(std::string_view(t.head),
                                     std::string_view(t.relation),
                                     std::string_view(t.tail));
    const auto it = best.find(key);
    if (it == best.end()) {
      best.emplace(key, c);
      continue;
    }
    const Triple& have = index.triples()[it->second.id];
    if (t.weight > have.weight ||
        (t.weight == have.weight && c.id < it->second.id))
      it->second = c;
  }

  std::vector<Candidate> ranked;
  ranked.reserve(best.size());
  for (const auto& [key, c] : best) ranked.push_back(c);
  std::sort(ranked.begin(), ranked.end(), [](const Candidate& a, const Candidate& b) {
    if (a.prov != b.prov)
      return a.prov == Provenance::image_concept;  // image tier first
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });

  RetrievalResult out;
  for (const Candidate& c : ranked) {
    if (out.entries.size() == k) break;
    out.entries.push_back({index.triples()[c.id], c.score, c.prov});
  }
  return out;
}

std::map<std::string, RelationStat> relation_histogram(
    std::span<const RetrievalResult> results) {
  std::map<std::string, RelationStat> out;
  std::size_t total = 0;
  for (const RetrievalResult& r : results)
    for (const RetrievedTriple& e : r.entries) {
      ++out[e.triple.relation].count;
      ++total;
    }
  if (total > 0)
    for (auto& [rel, stat] : out)
      stat.fraction =
          static_cast<double>(stat.count) / static_cast<double>(total);
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string format_float(float v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace klite::kg
