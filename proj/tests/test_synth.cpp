#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "klite/rng.hpp"
#include "klite/synth.hpp"

using namespace klite;
using synth::QuestionType;
using synth::Scene;
using synth::SceneObject;
using synth::StructuredQuestion;

namespace {

// Second, independently written oracle. Same rules, different mechanics:
// works over a flat (class, color, row, col) list sorted up front.
int second_oracle(const Scene& scene, const StructuredQuestion& q,
                  const synth::AnswerVocab& vocab) {
  struct Obj {
    std::string cls, color;
    int row, col;
  };
  std::vector<Obj> objs;
  for (const auto& o : scene.objects)
    objs.push_back({o.object_class, o.color, o.row, o.col});
  std::sort(objs.begin(), objs.end(), [](const Obj& a, const Obj& b) {
    return a.row * 3 + a.col < b.row * 3 + b.col;
  });
  auto first_of = [&](const std::string& cls) -> const Obj* {
    for (const Obj& o : objs)
      if (o.cls == cls) return &o;
    return nullptr;
  };

  switch (q.type) {
    case QuestionType::existence:
      return vocab.index_of(first_of(q.subject) ? "yes" : "no");
    case QuestionType::counting: {
      int n = 0;
      for (const Obj& o : objs)
        if (o.cls == q.subject) ++n;
      return vocab.index_of(std::to_string(n));
    }
    case QuestionType::color: {
      const Obj* o = first_of(q.subject);
      if (!o) throw DataError("unanswerable");
      return vocab.index_of(o->color);
    }
    case QuestionType::spatial: {
      const Obj* a = first_of(q.subject);
      const Obj* b = first_of(q.object);
      if (!a || !b) throw DataError("unanswerable");
      if (q.relation == "left") return vocab.index_of(a->col < b->col ? "yes" : "no");
      return vocab.index_of(a->col > b->col ? "yes" : "no");
    }
  }
  throw DataError("bad question");
}

synth::GenConfig small_config(std::uint64_t seed, std::size_t scenes = 120) {
  synth::GenConfig cfg;
  cfg.seed = seed;
  cfg.n_scenes = scenes;
  cfg.questions_per_scene = 3;
  return cfg;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("answer vocabulary is exactly the 26 documented entries") {
  const synth::AnswerVocab vocab;
  REQUIRE(vocab.size() == 26);
  CHECK(vocab.token(0) == "yes");
  CHECK(vocab.token(1) == "no");
  CHECK(vocab.token(2) == "0");
  CHECK(vocab.token(7) == "5");
  CHECK(vocab.token(8) == "red");
  CHECK(vocab.token(16) == "chair");
  CHECK(vocab.token(25) == "plant");
  CHECK(vocab.index_of("yes") == 0);
  CHECK_THROWS_AS(vocab.index_of("maybe"), DataError);
}

TEST_CASE("oracle: empty scene counts zero") {
  const synth::AnswerVocab vocab;
  Scene scene;
  StructuredQuestion q;
  q.type = QuestionType::counting;
  q.subject = "chair";
  CHECK(oracle_answer(scene, q, vocab) == vocab.index_of("0"));
}

TEST_CASE("oracle: one red chair exists") {
  const synth::AnswerVocab vocab;
  Scene scene;
  scene.objects.push_back({"chair", "red", 1, 1});
  StructuredQuestion q;
  q.type = QuestionType::existence;
  q.subject = "chair";
  CHECK(oracle_answer(scene, q, vocab) == vocab.index_of("yes"));
  q.subject = "table";
  CHECK(oracle_answer(scene, q, vocab) == vocab.index_of("no"));
}

TEST_CASE("oracle: left-of compares columns strictly") {
  const synth::AnswerVocab vocab;
  Scene scene;
  scene.objects.push_back({"chair", "red", 0, 0});
  scene.objects.push_back({"table", "blue", 0, 2});
  StructuredQuestion q;
  q.type = QuestionType::spatial;
  q.subject = "chair";
  q.object = "table";
  q.relation = "left";
  CHECK(oracle_answer(scene, q, vocab) == vocab.index_of("yes"));
  q.relation = "right";
  CHECK(oracle_answer(scene, q, vocab) == vocab.index_of("no"));

  // same column: neither left nor right
  Scene col;
  col.objects.push_back({"chair", "red", 0, 1});
  col.objects.push_back({"table", "blue", 2, 1});
  q.relation = "left";
  CHECK(oracle_answer(col, q, vocab) == vocab.index_of("no"));
}

TEST_CASE("oracle: color ambiguity resolves to the first object in position order") {
  const synth::AnswerVocab vocab;
  Scene scene;
  scene.objects.push_back({"cup", "green", 2, 2});
  scene.objects.push_back({"cup", "purple", 0, 1});  // earlier cell wins
  StructuredQuestion q;
  q.type = QuestionType::color;
  q.subject = "cup";
  CHECK(oracle_answer(scene, q, vocab) == vocab.index_of("purple"));
}

TEST_CASE("oracle: unanswerable forms are errors") {
  const synth::AnswerVocab vocab;
  Scene scene;
  scene.objects.push_back({"chair", "red", 0, 0});
  StructuredQuestion q;
  q.type = QuestionType::color;
  q.subject = "lamp";
  CHECK_THROWS_AS(oracle_answer(scene, q, vocab), DataError);
  q.type = QuestionType::spatial;
  q.subject = "chair";
  q.object = "lamp";
  q.relation = "left";
  CHECK_THROWS_AS(oracle_answer(scene, q, vocab), DataError);
}

TEST_CASE("oracle: agrees with an independently written second oracle") {
  const synth::AnswerVocab vocab;
  rng::Rng r(3);
  const auto classes = synth::object_classes();
  const auto colors = synth::color_names();
  for (int iter = 0; iter < 200; ++iter) {
    Scene scene;
    std::vector<int> cells = {0, 1, 2, 3, 4, 5, 6, 7, 8};
    r.shuffle(cells);
    const std::size_t n = 1 + r.below(5);
    for (std::size_t i = 0; i < n; ++i)
      scene.objects.push_back({classes[r.below(classes.size())],
                               colors[r.below(colors.size())],
                               cells[i] / 3, cells[i] % 3});
    StructuredQuestion q;
    const int t = static_cast<int>(r.below(4));
    q.type = static_cast<QuestionType>(t);
    q.subject = r.below(2) == 0
                    ? scene.objects[r.below(scene.objects.size())].object_class
                    : classes[r.below(classes.size())];
    if (q.type == QuestionType::spatial) {
      q.object = scene.objects[r.below(scene.objects.size())].object_class;
      q.relation = r.below(2) == 0 ? "left" : "right";
    }
    int a = -1, b = -1;
    bool threw_a = false, threw_b = false;
    try {
      a = synth::oracle_answer(scene, q, vocab);
    } catch (const DataError&) {
      threw_a = true;
    }
    try {
      b = second_oracle(scene, q, vocab);
    } catch (const DataError&) {
      threw_b = true;
    }
    CHECK(threw_a == threw_b);
    if (!threw_a) CHECK(a == b);
  }
}

TEST_CASE("build_synthetic_kg: documented construction rules") {
  const std::vector<std::string> one = {"chair"};
  const auto kg1 = synth::build_synthetic_kg(one, {});
  REQUIRE(kg1.size() == 1);
  CHECK(kg1[0] == kg::Triple{"chair", "AtLocation", "room", 2.0});

  const std::vector<std::string> two_colors = {"red", "green"};
  const auto kg2 = synth::build_synthetic_kg({}, two_colors);
  bool found = false;
  for (const auto& t : kg2)
    if (t == kg::Triple{"red", "Antonym", "green", 1.5}) found = true;
  CHECK(found);
}

TEST_CASE("build_synthetic_kg: full default histogram matches hand counts") {
  const auto kg = synth::build_synthetic_kg(synth::object_classes(),
                                            synth::color_names());
  std::map<std::string, std::size_t> hist;
  for (const auto& t : kg) ++hist[t.relation];
  // 10 classes -> 10 AtLocation; 8 colors -> 8 Antonym (cycle);
  // 4 locations x chains over {3,3,2,2} classes -> (2+2+1+1) RelatedTo
  CHECK(hist.at("AtLocation") == 10);
  CHECK(hist.at("Antonym") == 8);
  CHECK(hist.at("RelatedTo") == 6);
  CHECK(kg.size() == 24);
}

TEST_CASE("generate: deterministic for a fixed seed") {
  const auto a = synth::generate_dataset(small_config(7));
  const auto b = synth::generate_dataset(small_config(7));
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].question == b.samples[i].question);
    CHECK(a.samples[i].gold_answer == b.samples[i].gold_answer);
  }
  for (std::size_t i = 0; i < a.scenes.size(); ++i)
    CHECK(a.scenes[i].image_vec == b.scenes[i].image_vec);

  const auto c = synth::generate_dataset(small_config(8));
  bool differs = false;
  for (std::size_t i = 0; i < std::min(a.samples.size(), c.samples.size()); ++i)
    if (a.samples[i].question != c.samples[i].question) differs = true;
  CHECK(differs);
}

TEST_CASE("generate: every sample is solvable by the oracle (100%)") {
  const auto ds = synth::generate_dataset(small_config(77, 300));
  std::map<std::string, const Scene*> by_id;
  for (const Scene& s : ds.scenes) by_id[s.scene_id] = &s;
  for (const auto& sample : ds.samples) {
    const int want = synth::oracle_answer(*by_id.at(sample.scene_id),
                                          sample.structured, ds.vocab);
    CHECK(sample.gold_answer == want);
    CHECK(sample.gold_token == ds.vocab.token(want));
  }
}

TEST_CASE("generate: splits are disjoint at scene level, roughly 80/20") {
  const auto ds = synth::generate_dataset(small_config(5, 200));
  std::map<std::string, std::string> split_of;
  for (const Scene& s : ds.scenes) split_of[s.scene_id] = s.split;
  std::size_t val = 0;
  for (const auto& [id, split] : split_of)
    if (split == "val") ++val;
  CHECK(val == 40);  // exactly 20% by construction
  for (const auto& sample : ds.samples)
    CHECK(sample.split == split_of.at(sample.scene_id));
}

TEST_CASE("generate: no answer exceeds 40% of gold labels") {
  const auto ds = synth::generate_dataset(small_config(0, 500));
  std::map<int, std::size_t> hist;
  for (const auto& s : ds.samples) ++hist[s.gold_answer];
  for (const auto& [answer, count] : hist)
    CHECK(static_cast<double>(count) / static_cast<double>(ds.samples.size()) <=
          0.40);
}

TEST_CASE("generate: image vectors carry class identity") {
  const auto ds = synth::generate_dataset(small_config(21, 60));
  // present classes must out-rank absent ones by cosine against the labels
  for (const Scene& s : ds.scenes) {
    const auto det = embed::detect_concepts(s.image_vec, ds.label_table, 3);
    std::set<std::string> present;
    for (const auto& o : s.objects) present.insert(o.object_class);
    CHECK(present.contains(det.concepts[0].token));
  }
}

TEST_CASE("write/load: dataset round-trips and is byte-identical across runs") {
  const auto dir = std::filesystem::temp_directory_path() / "klite_synth_ds";
  std::filesystem::remove_all(dir);
  const auto ds = synth::generate_dataset(small_config(7, 50));
  synth::write_dataset(ds, (dir / "a").string());
  synth::write_dataset(synth::generate_dataset(small_config(7, 50)),
                       (dir / "b").string());
  for (const char* name :
       {"scenes.jsonl", "samples.jsonl", "images.vec", "label512.vec",
        "text512.vec", "kg300.vec", "kg.triples.tsv", "kg.meta.json",
        "answers.json", "manifest.json", "stopwords.txt"}) {
    CHECK(read_file(dir / "a" / name) == read_file(dir / "b" / name));
  }

  const auto again = synth::load_dataset((dir / "a").string());
  REQUIRE(again.samples.size() == ds.samples.size());
  REQUIRE(again.scenes.size() == ds.scenes.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(again.samples[i].question == ds.samples[i].question);
    CHECK(again.samples[i].gold_answer == ds.samples[i].gold_answer);
    CHECK(again.samples[i].split == ds.samples[i].split);
  }
  for (std::size_t i = 0; i < ds.scenes.size(); ++i)
    CHECK(again.scenes[i].image_vec == ds.scenes[i].image_vec);
  CHECK(again.kg_triples == ds.kg_triples);
  std::filesystem::remove_all(dir);
}
