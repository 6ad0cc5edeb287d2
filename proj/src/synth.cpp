#include "klite/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "klite/rng.hpp"

namespace klite::synth {

namespace {

const std::vector<std::string> kClasses = {"chair", "table", "monitor",
                                           "keyboard", "lamp", "sofa",
                                           "bed", "cup", "book", "plant"};

const std::vector<std::string> kColors = {"red", "green", "blue", "yellow",
                                          "black", "white", "purple", "orange"};

const std::vector<std::string> kLocations = {"room", "kitchen", "office", "desk"};

const std::map<std::string, std::string> kPlurals = {
    {"chair", "chairs"}, {"table", "tables"},   {"monitor", "monitors"},
    {"keyboard", "keyboards"}, {"lamp", "lamps"}, {"sofa", "sofas"},
    {"bed", "beds"},     {"cup", "cups"},       {"book", "books"},
    {"plant", "plants"}};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + stream * 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

std::span<const std::string> object_classes() { return kClasses; }
std::span<const std::string> color_names() { return kColors; }
std::span<const std::string> locations() { return kLocations; }

const std::string& plural(const std::string& object_class) {
  const auto it = kPlurals.find(object_class);
  if (it == kPlurals.end())
    throw DataError("no plural form for class '" + object_class + "'");
  return it->second;
}

std::string_view question_type_name(QuestionType t) {
  switch (t) {
    case QuestionType::existence: return "existence";
    case QuestionType::counting: return "counting";
    case QuestionType::color: return "color";
    case QuestionType::spatial: return "spatial";
  }
  throw DataError("bad question type");
}

QuestionType question_type_from_name(std::string_view s) {
  if (s == "existence") return QuestionType::existence;
  if (s == "counting") return QuestionType::counting;
  if (s == "color") return QuestionType::color;
  if (s == "spatial") return QuestionType::spatial;
  throw DataError("unknown question type '" + std::string(s) + "'");
}

AnswerVocab::AnswerVocab() {
  tokens_.push_back("yes");
  tokens_.push_back("no");
  for (int c = 0; c <= 5; ++c) tokens_.push_back(std::to_string(c));
  for (const std::string& c : kColors) tokens_.push_back(c);
  for (const std::string& c : kClasses) tokens_.push_back(c);
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    index_.emplace(tokens_[i], static_cast<int>(i));
}

int AnswerVocab::index_of(std::string_view token) const {
  const auto it = index_.find(token);
  if (it == index_.end())
    throw DataError("answer token '" + std::string(token) + "' not in vocabulary");
  return it->second;
}

const std::string& AnswerVocab::token(int index) const {
  if (index < 0 || static_cast<std::size_t>(index) >= tokens_.size())
    throw DataError("answer index " + std::to_string(index) + " out of range");
  return tokens_[static_cast<std::size_t>(index)];
}

namespace {

// first matching object in row-major position order; nullptr when absent
const SceneObject* first_match(const Scene& scene, std::string_view cls) {
  const SceneObject* best = nullptr;
  for (const SceneObject& o : scene.objects) {
    if (o.object_class != cls) continue;
    if (!best || o.row * static_cast<int>(kGridSize) + o.col <
                     best->row * static_cast<int>(kGridSize) + best->col)
      best = &o;
  }
  return best;
}

}  // namespace

int oracle_answer(const Scene& scene, const StructuredQuestion& q,
                  const AnswerVocab& vocab) {
  switch (q.type) {
    case QuestionType::existence: {
      const bool present = std::any_of(
          scene.objects.begin(), scene.objects.end(),
          [&](const SceneObject& o) { return o.object_class == q.subject; });
      return vocab.index_of(present ? "yes" : "no");
    }
    case QuestionType::counting: {
      const auto n = std::count_if(
          scene.objects.begin(), scene.objects.end(),
          [&](const SceneObject& o) { return o.object_class == q.subject; });
      return vocab.index_of(std::to_string(n));
    }
    case QuestionType::color: {
      const SceneObject* o = first_match(scene, q.subject);
      if (!o)
        throw DataError("color question about absent class '" + q.subject + "'");
      return vocab.index_of(o->color);
    }
    case QuestionType::spatial: {
      const SceneObject* a = first_match(scene, q.subject);
      const SceneObject* b = first_match(scene, q.object);
      if (!a || !b)
        throw DataError("spatial question about absent class");
      bool yes = false;
      if (q.relation == "left")
        yes = a->col < b->col;
      else if (q.relation == "right")
        yes = a->col > b->col;
      else
        throw DataError("unknown spatial relation '" + q.relation + "'");
      return vocab.index_of(yes ? "yes" : "no");
    }
  }
  throw DataError("bad structured question");
}

std::vector<kg::Triple> build_synthetic_kg(std::span<const std::string> classes,
                                           std::span<const std::string> colors) {
  std::vector<kg::Triple> out;
  // one AtLocation per class, locations assigned round-robin
  for (std::size_t i = 0; i < classes.size(); ++i)
    out.push_back({classes[i], "AtLocation", kLocations[i % kLocations.size()], 2.0});
  // one Antonym pair per color (cyclic)
  for (std::size_t i = 0; i < colors.size(); ++i)
    out.push_back({colors[i], "Antonym", colors[(i + 1) % colors.size()], 1.5});
  // RelatedTo chains among classes sharing a location
  for (std::size_t loc = 0; loc < kLocations.size(); ++loc) {
    std::vector<std::string_view> group;
    for (std::size_t i = 0; i < classes.size(); ++i)
      if (i % kLocations.size() == loc) group.push_back(classes[i]);
    for (std::size_t j = 0; j + 1 < group.size(); ++j)
      out.push_back({std::string(group[j]), "RelatedTo", std::string(group[j + 1]), 1.0});
  }
  return out;
}

namespace {

struct TypeDraw {
  QuestionType type;
};

QuestionType draw_type(rng::Rng& r, const GenConfig& cfg) {
  const double total = cfg.w_existence + cfg.w_counting + cfg.w_color + cfg.w_spatial;
  const double u = r.uniform() * total;
  if (u < cfg.w_existence) return QuestionType::existence;
  if (u < cfg.w_existence + cfg.w_counting) return QuestionType::counting;
  if (u < cfg.w_existence + cfg.w_counting + cfg.w_color) return QuestionType::color;
  return QuestionType::spatial;
}

std::vector<std::string> present_classes(const Scene& scene) {
  std::vector<std::string> out;
  for (const SceneObject& o : scene.objects)
    if (std::find(out.begin(), out.end(), o.object_class) == out.end())
      out.push_back(o.object_class);
  return out;
}

std::vector<std::string> absent_classes(const Scene& scene) {
  const auto present = present_classes(scene);
  std::vector<std::string> out;
  for (const std::string& c : kClasses)
    if (std::find(present.begin(), present.end(), c) == present.end())
      out.push_back(c);
  return out;
}

VqaSample make_question(const Scene& scene, rng::Rng& r, const GenConfig& cfg,
                        const AnswerVocab& vocab) {
  VqaSample s;
  s.scene_id = scene.scene_id;
  s.split = scene.split;

  QuestionType type = draw_type(r, cfg);
  const auto present = present_classes(scene);
  const auto absent = absent_classes(scene);

  // spatial needs two present classes whose first matches sit in different
  // columns; fall back to existence when the scene cannot support it
  if (type == QuestionType::spatial) {
    bool ok = false;
    if (present.size() >= 2) {
      for (int attempt = 0; attempt < 8 && !ok; ++attempt) {
        const std::size_t ia = r.below(present.size());
        std::size_t ib = r.below(present.size() - 1);
        if (ib >= ia) ++ib;
        const SceneObject* a = first_match(scene, present[ia]);
        const SceneObject* b = first_match(scene, present[ib]);
        if (a->col == b->col) continue;
        s.structured.type = QuestionType::spatial;
        s.structured.subject = present[ia];
        s.structured.object = present[ib];
        s.structured.relation = r.below(2) == 0 ? "left" : "right";
        s.question = "Is the " + s.structured.subject + " " +
                     s.structured.relation + " of the " + s.structured.object + "?";
        ok = true;
      }
    }
    if (!ok) type = QuestionType::existence;
  }

  if (type == QuestionType::color) {
    const std::string& cls = present[r.below(present.size())];
    s.structured.type = QuestionType::color;
    s.structured.subject = cls;
    s.question = "What color is the " + cls + "?";
  } else if (type == QuestionType::counting) {
    // 55% about a present class, 45% about an absent one (count 0)
    const bool ask_present = absent.empty() || r.uniform() < 0.55;
    const std::string& cls = ask_present ? present[r.below(present.size())]
                                         : absent[r.below(absent.size())];
    s.structured.type = QuestionType::counting;
    s.structured.subject = cls;
    s.question = "How many " + plural(cls) + "?";
  } else if (type == QuestionType::existence) {
    // half about a present class, half about an absent one
    const bool ask_present = absent.empty() || r.uniform() < 0.5;
    const std::string& cls = ask_present ? present[r.below(present.size())]
                                         : absent[r.below(absent.size())];
    s.structured.type = QuestionType::existence;
    s.structured.subject = cls;
    s.question = "Is there a " + cls + "?";
  }

  s.type = s.structured.type;
  s.gold_answer = oracle_answer(scene, s.structured, vocab);
  s.gold_token = vocab.token(s.gold_answer);
  return s;
}

std::vector<std::string> text_tokens() {
  std::vector<std::string> tokens;
  for (const std::string& c : kClasses) tokens.push_back(c);
  for (const std::string& c : kColors) tokens.push_back(c);
  for (const std::string& c : kClasses) tokens.push_back(plural(c));
  tokens.push_back("color");
  tokens.push_back("left");
  tokens.push_back("right");
  return tokens;
}

std::vector<std::string> kg_tokens() {
  std::vector<std::string> tokens;
  for (const std::string& c : kClasses) tokens.push_back(c);
  for (const std::string& c : kColors) tokens.push_back(c);
  for (const std::string& l : kLocations) tokens.push_back(l);
  tokens.push_back("AtLocation");
  tokens.push_back("Antonym");
  tokens.push_back("RelatedTo");
  return tokens;
}

}  // namespace

Dataset generate_dataset(const GenConfig& cfg) {
  if (cfg.n_scenes == 0 || cfg.questions_per_scene == 0)
    throw DataError("generator needs n_scenes >= 1 and questions_per_scene >= 1");

  Dataset ds;
  ds.gen = cfg;

  // One text table covers labels and question words; the label table is the
  // prefix subset sharing the same vectors (same seed, same draw order).
  const auto all_text = text_tokens();
  ds.text_table = embed::random_table("text512", all_text, cfg.embed_dim,
                                      mix_seed(cfg.seed, 1));
  std::vector<std::string> label_tokens(kClasses.begin(), kClasses.end());
  label_tokens.insert(label_tokens.end(), kColors.begin(), kColors.end());
  ds.label_table = embed::random_table("label512", label_tokens, cfg.embed_dim,
                                       mix_seed(cfg.seed, 1));
  const auto kgt = kg_tokens();
  ds.kg_table =
      embed::random_table("kg300", kgt, cfg.kg_dim, mix_seed(cfg.seed, 2));
  ds.kg_triples = build_synthetic_kg(kClasses, kColors);

  rng::Rng r(mix_seed(cfg.seed, 3));
  ds.scenes.reserve(cfg.n_scenes);
  ds.samples.reserve(cfg.n_scenes * cfg.questions_per_scene);

  std::vector<int> cells(kGridSize * kGridSize);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);

  for (std::size_t si = 0; si < cfg.n_scenes; ++si) {
    Scene scene;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%06zu", si);
    scene.scene_id = buf;
    scene.split = (si % 5 == 4) ? "val" : "train";  // 80/20 by scene

    const std::size_t n_obj = 1 + r.below(kMaxObjects);
    r.shuffle(cells);
    for (std::size_t oi = 0; oi < n_obj; ++oi) {
      SceneObject o;
      o.object_class = kClasses[r.below(kClasses.size())];
      o.color = kColors[r.below(kColors.size())];
      o.row = cells[oi] / static_cast<int>(kGridSize);
      o.col = cells[oi] % static_cast<int>(kGridSize);
      scene.objects.push_back(std::move(o));
    }

    // image vector: mean of class embeddings, plus noise, L2-normalized
    std::vector<double> acc(cfg.embed_dim, 0.0);
    for (const SceneObject& o : scene.objects) {
      const std::vector<float>& e = *ds.label_table.find(o.object_class);
      for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += e[d];
    }
    for (double& v : acc) v /= static_cast<double>(scene.objects.size());
    for (double& v : acc) v += cfg.noise_sigma * r.normal();
    double sq = 0.0;
    for (const double v : acc) sq += v * v;
    const double inv = 1.0 / std::sqrt(sq);
    scene.image_vec.resize(cfg.embed_dim);
    for (std::size_t d = 0; d < acc.size(); ++d)
      scene.image_vec[d] = static_cast<float>(acc[d] * inv);

    for (std::size_t qi = 0; qi < cfg.questions_per_scene; ++qi)
      ds.samples.push_back(make_question(scene, r, cfg, ds.vocab));
    ds.scenes.push_back(std::move(scene));
  }

  // No single answer may dominate (guards the majority-class baseline).
  // Enforced at benchmark scale; tiny datasets fluctuate too much for the
  // cap to be meaningful.
  if (ds.samples.size() >= 1000) {
    std::map<int, std::size_t> hist;
    for (const VqaSample& s : ds.samples) ++hist[s.gold_answer];
    for (const auto& [answer, count] : hist) {
      const double frac =
          static_cast<double>(count) / static_cast<double>(ds.samples.size());
      if (frac > 0.40)
        throw DataError("generator produced a degenerate answer distribution: '" +
                        ds.vocab.token(answer) + "' is " +
                        std::to_string(frac * 100.0) + "% of gold labels");
    }
  }
  return ds;
}

namespace {

namespace fs = std::filesystem;

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << content;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  const fs::path root(dir);

  {
    std::string out;
    for (const Scene& s : ds.scenes) {
      nlohmann::ordered_json j;
      j["scene_id"] = s.scene_id;
      j["split"] = s.split;
      nlohmann::ordered_json objs = nlohmann::ordered_json::array();
      for (const SceneObject& o : s.objects) {
        nlohmann::ordered_json jo;
        jo["class"] = o.object_class;
        jo["color"] = o.color;
        jo["row"] = o.row;
        jo["col"] = o.col;
        objs.push_back(std::move(jo));
      }
      j["objects"] = std::move(objs);
      out += j.dump();
      out += '\n';
    }
    write_text_file(root / "scenes.jsonl", out);
  }

  {
    std::string out;
    for (const VqaSample& s : ds.samples) {
      nlohmann::ordered_json j;
      j["scene_id"] = s.scene_id;
      j["split"] = s.split;
      j["question"] = s.question;
      j["question_type"] = std::string(question_type_name(s.type));
      nlohmann::ordered_json st;
      st["type"] = std::string(question_type_name(s.structured.type));
      st["subject"] = s.structured.subject;
      st["object"] = s.structured.object;
      st["relation"] = s.structured.relation;
      j["structured"] = std::move(st);
      j["gold_answer"] = s.gold_answer;
      j["gold_token"] = s.gold_token;
      out += j.dump();
      out += '\n';
    }
    write_text_file(root / "samples.jsonl", out);
  }

  {
    embed::EmbeddingTable images("images", ds.gen.embed_dim);
    for (const Scene& s : ds.scenes) images.insert(s.scene_id, s.image_vec);
    images.save((root / "images.vec").string());
  }
  ds.label_table.save((root / "label512.vec").string());
  ds.text_table.save((root / "text512.vec").string());
  ds.kg_table.save((root / "kg300.vec").string());

  kg::ConceptIndex::build(ds.kg_triples).save((root / "kg").string());

  {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const std::string& t : ds.vocab.tokens()) j.push_back(t);
    write_text_file(root / "answers.json", j.dump(2) + "\n");
  }

  embed::save_stopwords((root / "stopwords.txt").string());

  {
    nlohmann::ordered_json j;
    j["format"] = "klite-dataset-v1";
    j["seed"] = ds.gen.seed;
    j["n_scenes"] = ds.gen.n_scenes;
    j["questions_per_scene"] = ds.gen.questions_per_scene;
    j["noise_sigma"] = ds.gen.noise_sigma;
    j["mix"] = {{"existence", ds.gen.w_existence},
                {"counting", ds.gen.w_counting},
                {"color", ds.gen.w_color},
                {"spatial", ds.gen.w_spatial}};
    j["embed_dim"] = ds.gen.embed_dim;
    j["kg_dim"] = ds.gen.kg_dim;
    std::size_t train = 0, val = 0;
    for (const VqaSample& s : ds.samples) (s.split == "train" ? train : val)++;
    j["counts"] = {{"scenes", ds.scenes.size()},
                   {"samples", ds.samples.size()},
                   {"train", train},
                   {"val", val}};
    j["files"] = {{"scenes", "scenes.jsonl"},   {"samples", "samples.jsonl"},
                  {"images", "images.vec"},     {"labels", "label512.vec"},
                  {"text", "text512.vec"},      {"kg300", "kg300.vec"},
                  {"kg_prefix", "kg"},          {"answers", "answers.json"},
                  {"stopwords", "stopwords.txt"}};
    write_text_file(root / "manifest.json", j.dump(2) + "\n");
  }
}

Dataset load_dataset(const std::string& dir) {
  const fs::path root(dir);
  std::ifstream mf(root / "manifest.json");
  if (!mf) throw DataError("cannot open " + (root / "manifest.json").string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("manifest.json: " + std::string(e.what()));
  }

  Dataset ds;
  ds.gen.seed = manifest.at("seed").get<std::uint64_t>();
  ds.gen.n_scenes = manifest.at("n_scenes").get<std::size_t>();
  ds.gen.questions_per_scene = manifest.at("questions_per_scene").get<std::size_t>();
  ds.gen.noise_sigma = manifest.at("noise_sigma").get<double>();
  ds.gen.embed_dim = manifest.at("embed_dim").get<std::size_t>();
  ds.gen.kg_dim = manifest.at("kg_dim").get<std::size_t>();

  embed::EmbeddingTable images =
      embed::EmbeddingTable::load((root / "images.vec").string());

  {
    std::ifstream f(root / "scenes.jsonl");
    if (!f) throw DataError("cannot open " + (root / "scenes.jsonl").string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
      ++line_no;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw DataError("scenes.jsonl line " + std::to_string(line_no) + ": " +
                        e.what());
      }
      Scene s;
      s.scene_id = j.at("scene_id").get<std::string>();
      s.split = j.at("split").get<std::string>();
      for (const auto& jo : j.at("objects")) {
        SceneObject o;
        o.object_class = jo.at("class").get<std::string>();
        o.color = jo.at("color").get<std::string>();
        o.row = jo.at("row").get<int>();
        o.col = jo.at("col").get<int>();
        s.objects.push_back(std::move(o));
      }
      const std::vector<float>* vec = images.find(s.scene_id);
      if (!vec) throw DataError("images.vec missing vector for " + s.scene_id);
      s.image_vec = *vec;
      ds.scenes.push_back(std::move(s));
    }
  }

  {
    std::ifstream f(root / "samples.jsonl");
    if (!f) throw DataError("cannot open " + (root / "samples.jsonl").string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
      ++line_no;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw DataError("samples.jsonl line " + std::to_string(line_no) + ": " +
                        e.what());
      }
      VqaSample s;
      s.scene_id = j.at("scene_id").get<std::string>();
      s.split = j.at("split").get<std::string>();
      s.question = j.at("question").get<std::string>();
      s.type = question_type_from_name(j.at("question_type").get<std::string>());
      const auto& st = j.at("structured");
      s.structured.type = question_type_from_name(st.at("type").get<std::string>());
      s.structured.subject = st.at("subject").get<std::string>();
      s.structured.object = st.at("object").get<std::string>();
      s.structured.relation = st.at("relation").get<std::string>();
      s.gold_answer = j.at("gold_answer").get<int>();
      s.gold_token = j.at("gold_token").get<std::string>();
      if (s.gold_answer < 0 ||
          static_cast<std::size_t>(s.gold_answer) >= ds.vocab.size())
        throw DataError("samples.jsonl line " + std::to_string(line_no) +
                        ": gold_answer out of range");
      ds.samples.push_back(std::move(s));
    }
  }

  ds.label_table = embed::EmbeddingTable::load((root / "label512.vec").string());
  ds.text_table = embed::EmbeddingTable::load((root / "text512.vec").string());
  ds.kg_table = embed::EmbeddingTable::load((root / "kg300.vec").string());
  ds.kg_triples = kg::ConceptIndex::load((root / "kg").string()).triples();
  return ds;
}

}  // namespace klite::synth
