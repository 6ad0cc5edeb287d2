#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "klite/kg.hpp"
#include "klite/rng.hpp"
#include "oracles.hpp"

using namespace klite;
using kg::Triple;
using testing::brute_force_retrieve;
using testing::same_retrieval;

namespace {

std::vector<std::string> concept_pool(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("c" + std::to_string(i));
  return out;
}

std::vector<Triple> random_graph(rng::Rng& r, std::size_t max_edges,
                                 std::span<const std::string> pool) {
  const std::size_t n = r.below(max_edges + 1);
  const std::vector<std::string> rels = {"AtLocation", "Antonym", "RelatedTo",
                                         "UsedFor"};
  std::vector<Triple> out;
  for (std::size_t i = 0; i < n; ++i) {
    Triple t;
    t.head = pool[r.below(pool.size())];
    t.tail = pool[r.below(pool.size())];
    t.relation = rels[r.below(rels.size())];
    t.weight = std::round(r.uniform(0.0, 4.0) * 4.0) / 4.0;  // coarse: forces ties
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<std::string> random_terms(rng::Rng& r,
                                      std::span<const std::string> pool,
                                      std::size_t max_n) {
  std::vector<std::string> out;
  const std::size_t n = r.below(max_n + 1);
  for (std::size_t i = 0; i < n; ++i) out.push_back(pool[r.below(pool.size())]);
  return out;
}

}  // namespace

TEST_CASE("parse: the paper's AtLocation example line") {
  const auto p = kg::parse_assertion_line(
      "/a/[/r/AtLocation/,/c/en/monitor/,/c/en/desk/]\t/r/AtLocation\t"
      "/c/en/monitor\t/c/en/desk\t{\"weight\": 1.0}",
      1);
  REQUIRE(p.status == kg::LineParse::Status::triple);
  CHECK(p.triple == Triple{"monitor", "AtLocation", "desk", 1.0});
}

TEST_CASE("parse: blank and comment lines are skips") {
  CHECK(kg::parse_assertion_line("", 1).status == kg::LineParse::Status::skip);
  CHECK(kg::parse_assertion_line("   \t ", 2).status ==
        kg::LineParse::Status::skip);
  CHECK(kg::parse_assertion_line("# header", 3).status ==
        kg::LineParse::Status::skip);
}

TEST_CASE("parse: language filter drops cross-language assertions") {
  const auto p = kg::parse_assertion_line(
      "/a/[x]\t/r/RelatedTo\t/c/fr/chaise\t/c/en/chair\t{\"weight\": 0.5}", 1,
      "en");
  CHECK(p.status == kg::LineParse::Status::skip);
  CHECK(p.skip_reason == kg::LineParse::SkipReason::language);
}

TEST_CASE("parse: every retained triple has both endpoints in the filter language") {
  rng::Rng r(5);
  const std::vector<std::string> langs = {"en", "fr", "de"};
  std::stringstream dump;
  for (int i = 0; i < 200; ++i) {
    dump << "/a/[x]\t/r/RelatedTo\t/c/" << langs[r.below(3)] << "/tok" << i
         << "\t/c/" << langs[r.below(3)] << "/other" << i
         << "\t{\"weight\": 1.0}\n";
  }
  kg::ParseStats stats;
  const auto triples = kg::parse_assertions(dump, "en", &stats);
  CHECK(stats.errors == 0);
  // oracle: re-scan the dump and count lines whose both langs are en
  std::size_t want = 0;
  {
    std::stringstream again(dump.str());
    std::string line;
    while (std::getline(again, line))
      if (line.find("/c/en/tok") != std::string::npos &&
          line.find("\t/c/en/other") != std::string::npos)
        ++want;
  }
  CHECK(triples.size() == want);
}

TEST_CASE("parse: uppercase and multi-word tokens normalize, URI tails drop") {
  const auto p = kg::parse_assertion_line(
      "/a/[x]\t/r/AtLocation\t/c/en/Coffee_Table/n\t/c/en/living_room\t"
      "{\"weight\": 2.0}",
      1);
  REQUIRE(p.status == kg::LineParse::Status::triple);
  CHECK(p.triple.head == "coffee_table");
  CHECK(p.triple.tail == "living_room");
}

TEST_CASE("parse: metadata without weight defaults to 1.0") {
  const auto p = kg::parse_assertion_line(
      "/a/[x]\t/r/IsA\t/c/en/a\t/c/en/b\t{\"dataset\": \"x\"}", 1);
  REQUIRE(p.status == kg::LineParse::Status::triple);
  CHECK(p.triple.weight == 1.0);
}

TEST_CASE("parse: malformed lines are recoverable errors with line numbers") {
  SUBCASE("wrong field count") {
    const auto p = kg::parse_assertion_line("/a/[x]\t/r/IsA\t/c/en/a", 7);
    CHECK(p.status == kg::LineParse::Status::error);
    CHECK(p.error.find("line 7") != std::string::npos);
  }
  SUBCASE("invalid JSON") {
    const auto p = kg::parse_assertion_line(
        "/a/[x]\t/r/IsA\t/c/en/a\t/c/en/b\t{weight: oops", 9);
    CHECK(p.status == kg::LineParse::Status::error);
    CHECK(p.error.find("line 9") != std::string::npos);
  }
  SUBCASE("negative weight") {
    const auto p = kg::parse_assertion_line(
        "/a/[x]\t/r/IsA\t/c/en/a\t/c/en/b\t{\"weight\": -1}", 3);
    CHECK(p.status == kg::LineParse::Status::error);
  }
  SUBCASE("missing /r/ prefix") {
    const auto p = kg::parse_assertion_line(
        "/a/[x]\tIsA\t/c/en/a\t/c/en/b\t{\"weight\": 1}", 4);
    CHECK(p.status == kg::LineParse::Status::error);
  }
}

TEST_CASE("round-trip: parse -> serialize -> parse is the identity") {
  rng::Rng r(11);
  const auto pool = concept_pool(30);
  for (int iter = 0; iter < 20; ++iter) {
    const auto triples = random_graph(r, 50, pool);
    std::vector<Triple> again;
    for (std::size_t i = 0; i < triples.size(); ++i) {
      const auto line = kg::serialize_assertion_line(triples[i]);
      const auto p = kg::parse_assertion_line(line, i + 1);
      REQUIRE(p.status == kg::LineParse::Status::triple);
      again.push_back(p.triple);
    }
    CHECK(again == triples);
  }
}

TEST_CASE("build_index: empty graph") {
  const auto idx = kg::ConceptIndex::build({});
  CHECK(idx.triples().empty());
  CHECK(idx.relation_counts().empty());
  CHECK(idx.ids_for("anything").empty());
}

TEST_CASE("build_index: single edge is reachable from both endpoints") {
  const auto idx =
      kg::ConceptIndex::build({Triple{"monitor", "AtLocation", "desk", 1.0}});
  REQUIRE(idx.ids_for("monitor").size() == 1);
  REQUIRE(idx.ids_for("desk").size() == 1);
  CHECK(idx.ids_for("monitor")[0] == 0);
  CHECK(idx.ids_for("desk")[0] == 0);
  CHECK(idx.relation_counts().at("AtLocation") == 1);
}

TEST_CASE("build_index: self-loop appears once under its concept") {
  const auto idx =
      kg::ConceptIndex::build({Triple{"mirror", "RelatedTo", "mirror", 1.0}});
  CHECK(idx.ids_for("mirror").size() == 1);
}

TEST_CASE("build_index: by_concept equals a brute-force scan") {
  rng::Rng r(13);
  const auto pool = concept_pool(20);
  const auto triples = random_graph(r, 100, pool);
  const auto idx = kg::ConceptIndex::build(triples);
  std::size_t total = 0;
  for (const auto& [rel, count] : idx.relation_counts()) total += count;
  CHECK(total == triples.size());
  for (const std::string& c : pool) {
    std::vector<std::uint32_t> want;
    for (std::size_t i = 0; i < triples.size(); ++i)
      if (triples[i].head == c || triples[i].tail == c)
        want.push_back(static_cast<std::uint32_t>(i));
    const auto got = idx.ids_for(c);
    CHECK(std::vector<std::uint32_t>(got.begin(), got.end()) == want);
  }
}

TEST_CASE("retrieve: image-grounded triples rank before keyword triples") {
  const auto idx = kg::ConceptIndex::build({
      Triple{"room", "Antonym", "kitchen", 1.0},
      Triple{"monitor", "AtLocation", "desk", 1.0},
  });
  const std::vector<std::string> image = {"desk", "monitor", "keyboard"};
  const std::vector<std::string> keywords = {"room"};
  const auto r = kg::retrieve(idx, image, keywords, 5);
  REQUIRE(r.entries.size() == 2);
  CHECK(r.entries[0].triple.head == "monitor");
  CHECK(r.entries[0].provenance == kg::Provenance::image_concept);
  CHECK(r.entries[1].triple.head == "room");
  CHECK(r.entries[1].provenance == kg::Provenance::question_keyword);
}

TEST_CASE("retrieve: empty query terms give an empty result") {
  const auto idx =
      kg::ConceptIndex::build({Triple{"monitor", "AtLocation", "desk", 1.0}});
  const auto r = kg::retrieve(idx, {}, {}, 5);
  CHECK(r.entries.empty());
}

TEST_CASE("retrieve: equals the brute-force oracle on random graphs") {
  rng::Rng r(17);
  const auto pool = concept_pool(15);
  for (int iter = 0; iter < 300; ++iter) {
    const auto triples = random_graph(r, 200, pool);
    const auto idx = kg::ConceptIndex::build(triples);
    const auto image = random_terms(r, pool, 5);
    const auto keywords = random_terms(r, pool, 4);
    const std::size_t k = 1 + r.below(8);
    const auto fast = kg::retrieve(idx, image, keywords, k);
    const auto slow = brute_force_retrieve(triples, image, keywords, k);
    REQUIRE(same_retrieval(fast, slow));
  }
}

TEST_CASE("retrieve: cap and tier ordering hold on random queries") {
  rng::Rng r(19);
  const auto pool = concept_pool(12);
  for (int iter = 0; iter < 200; ++iter) {
    const auto triples = random_graph(r, 80, pool);
    const auto idx = kg::ConceptIndex::build(triples);
    const auto image = random_terms(r, pool, 4);
    const auto keywords = random_terms(r, pool, 4);
    const auto res = kg::retrieve(idx, image, keywords, 5);
    CHECK(res.entries.size() <= 5);
    bool seen_keyword_tier = false;
    std::set<std::tuple<std::string, std::string, std::string>> seen;
    for (const auto& e : res.entries) {
      if (e.provenance == kg::Provenance::question_keyword)
        seen_keyword_tier = true;
      else
        CHECK(!seen_keyword_tier);  // image tier never follows keyword tier
      const auto key =
          std::make_tuple(e.triple.head, e.triple.relation, e.triple.tail);
      CHECK(!seen.contains(key));
      seen.insert(key);
    }
  }
}

TEST_CASE("retrieve: duplicate keys keep the highest-weight copy") {
  const auto idx = kg::ConceptIndex::build({
      Triple{"chair", "AtLocation", "room", 0.5},
      Triple{"chair", "AtLocation", "room", 2.0},
  });
  const std::vector<std::string> image = {"chair"};
  const auto r = kg::retrieve(idx, image, {}, 5);
  REQUIRE(r.entries.size() == 1);
  CHECK(r.entries[0].triple.weight == 2.0);
}

TEST_CASE("retrieve: relation blocklist filters when enabled") {
  const auto idx = kg::ConceptIndex::build({
      Triple{"red", "Antonym", "green", 1.0},
      Triple{"red", "RelatedTo", "fire", 1.0},
  });
  const std::vector<std::string> image = {"red"};
  const std::set<std::string> blocked = {"Antonym"};
  const auto all = kg::retrieve(idx, image, {}, 5);
  CHECK(all.entries.size() == 2);
  const auto filtered = kg::retrieve(idx, image, {}, 5, &blocked);
  REQUIRE(filtered.entries.size() == 1);
  CHECK(filtered.entries[0].triple.relation == "RelatedTo");
}

TEST_CASE("relation_histogram: counts and fractions") {
  kg::RetrievalResult one;
  one.entries.push_back({Triple{"room", "Antonym", "kitchen", 1.0}, 2.0,
                         kg::Provenance::image_concept});
  const std::vector<kg::RetrievalResult> stream = {one};
  const auto h = kg::relation_histogram(stream);
  REQUIRE(h.size() == 1);
  CHECK(h.at("Antonym").count == 1);
  CHECK(h.at("Antonym").fraction == 1.0);

  CHECK(kg::relation_histogram({}).empty());
}

TEST_CASE("relation_histogram: matches a flat recount over a synthetic stream") {
  rng::Rng r(23);
  const auto pool = concept_pool(10);
  std::vector<kg::RetrievalResult> stream;
  std::map<std::string, std::size_t> want;
  std::size_t total = 0;
  for (int i = 0; i < 50; ++i) {
    const auto triples = random_graph(r, 30, pool);
    const auto idx = kg::ConceptIndex::build(triples);
    const auto res = kg::retrieve(idx, random_terms(r, pool, 3),
                                  random_terms(r, pool, 3), 5);
    for (const auto& e : res.entries) {
      ++want[e.triple.relation];
      ++total;
    }
    stream.push_back(res);
  }
  const auto h = kg::relation_histogram(stream);
  double frac_sum = 0.0;
  for (const auto& [rel, stat] : h) {
    CHECK(stat.count == want.at(rel));
    frac_sum += stat.fraction;
  }
  if (total > 0) CHECK(frac_sum == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("index save/load round-trips and serializes deterministically") {
  rng::Rng r(29);
  const auto pool = concept_pool(12);
  const auto triples = random_graph(r, 60, pool);
  const auto idx = kg::ConceptIndex::build(triples);

  const auto dir = std::filesystem::temp_directory_path() / "klite_kg_test";
  std::filesystem::create_directories(dir);
  const std::string prefix = (dir / "idx").string();
  idx.save(prefix);
  const auto again = kg::ConceptIndex::load(prefix);
  CHECK(again.triples() == idx.triples());
  CHECK(again.serialize_tsv() == idx.serialize_tsv());

  idx.save(prefix + "_b");
  std::ifstream f1(prefix + ".triples.tsv"), f2(prefix + "_b.triples.tsv");
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());
  std::filesystem::remove_all(dir);
}
