#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "klite/embed.hpp"
#include "klite/kg.hpp"

// Deterministic synthetic VQA benchmark: 3x3-grid scenes, four question
// types, a 26-answer vocabulary and a co-generated consistent knowledge
// graph. Image vectors are derived from class-label embeddings, so object
// identity is visible to the model while colors and positions are not --
// color and spatial questions probe exactly that gap.
namespace klite::synth {

inline constexpr std::size_t kGridSize = 3;
inline constexpr std::size_t kMaxObjects = 5;

std::span<const std::string> object_classes();  // 10
std::span<const std::string> color_names();     // 8
std::span<const std::string> locations();
const std::string& plural(const std::string& object_class);

struct SceneObject {
  std::string object_class;
  std::string color;
  int row = 0;
  int col = 0;
};

struct Scene {
  std::string scene_id;
  std::string split;  // "train" | "val"
  std::vector<SceneObject> objects;
  std::vector<float> image_vec;  // L2-normalized mean of class embeddings + noise
};

enum class QuestionType : std::uint8_t { existence, counting, color, spatial };

std::string_view question_type_name(QuestionType t);
QuestionType question_type_from_name(std::string_view s);

struct StructuredQuestion {
  QuestionType type = QuestionType::existence;
  std::string subject;   // object class under question
  std::string object;    // spatial only: reference class
  std::string relation;  // spatial only: "left" | "right"
};

struct VqaSample {
  std::string scene_id;
  std::string split;
  std::string question;
  QuestionType type = QuestionType::existence;
  StructuredQuestion structured;
  int gold_answer = 0;
  std::string gold_token;
};

// yes, no, 0..5, 8 colors, 10 classes -- exactly 26 entries
class AnswerVocab {
 public:
  AnswerVocab();
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::size_t size() const { return tokens_.size(); }
  int index_of(std::string_view token) const;  // throws DataError when unknown
  const std::string& token(int index) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> index_;
};

struct GenConfig {
  std::uint64_t seed = 0;
  std::size_t n_scenes = 2000;
  std::size_t questions_per_scene = 3;
  double noise_sigma = 0.005;
  // question-type mix, normalized internally
  double w_existence = 0.50;
  double w_counting = 0.25;
  double w_color = 0.10;
  double w_spatial = 0.15;
  std::size_t embed_dim = 512;
  std::size_t kg_dim = 300;
};

struct Dataset {
  GenConfig gen;
  std::vector<Scene> scenes;
  std::vector<VqaSample> samples;
  AnswerVocab vocab;
  embed::EmbeddingTable label_table;  // classes + colors, image space
  embed::EmbeddingTable text_table;   // label tokens + plurals + question words
  embed::EmbeddingTable kg_table;     // knowledge-graph tokens
  std::vector<kg::Triple> kg_triples;
};

// Deterministic for a fixed config; every sample's gold answer is produced
// by oracle_answer and the answer distribution is checked against the 40%
// majority cap.
Dataset generate_dataset(const GenConfig& cfg);

// Ground truth from scene contents. Throws DataError for structured forms
// the scene cannot answer (the generator never emits those).
int oracle_answer(const Scene& scene, const StructuredQuestion& q,
                  const AnswerVocab& vocab);

// One AtLocation triple per class, an Antonym cycle over colors, RelatedTo
// chains among classes sharing a location.
std::vector<kg::Triple> build_synthetic_kg(std::span<const std::string> classes,
                                           std::span<const std::string> colors);

// Writes scenes.jsonl, samples.jsonl, images.vec, label512.vec, text512.vec,
// kg300.vec, kg.triples.tsv/.meta.json, answers.json, stopwords.txt and
// manifest.json into dir (created if missing).
void write_dataset(const Dataset& ds, const std::string& dir);

// Reads back everything write_dataset emitted.
Dataset load_dataset(const std::string& dir);

}  // namespace klite::synth
