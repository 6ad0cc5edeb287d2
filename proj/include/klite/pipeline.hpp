#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "klite/kg.hpp"
#include "klite/model.hpp"
#include "klite/synth.hpp"

// Training, evaluation and the diagnostic analyses: answer bias, retrieval
// statistics and the train/val overfitting gap.
namespace klite::pipeline {

enum class OptimizerKind : std::uint8_t { sgd, adam };

std::string_view optimizer_name(OptimizerKind k);
OptimizerKind optimizer_from_name(std::string_view s);

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;  // epochs between reports

  void validate() const;
};

struct EpochReport {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  double wall_time_s = 0.0;  // console/summary only, kept out of the JSONL
};

// Everything the trainer needs, assembled from a dataset directory.
struct DataBundle {
  synth::Dataset dataset;
  kg::ConceptIndex kg_index;
  std::set<std::string> stopwords;

  const synth::Scene& scene_by_id(std::string_view id) const;
  void build_scene_lookup();

 private:
  std::map<std::string, std::size_t, std::less<>> scene_lookup_;
};

DataBundle load_bundle(const std::string& data_dir);
DataBundle bundle_from_dataset(synth::Dataset ds);

// Per-sample frozen features: the exact detect -> keywords -> retrieve ->
// embed pipeline the trainer runs, cached because every stage is pure.
struct SampleFeatures {
  tc::Mat<float> image_vec;     // [1, image_dim]
  tc::Mat<float> question_vec;  // [1, question_dim]
  bool question_oov = false;
  kg::RetrievalResult retrieval;
  tc::Mat<float> knowledge;  // [n_triples, knowledge_dim]
  int gold = 0;
};

SampleFeatures compute_features(const synth::VqaSample& sample,
                                const DataBundle& bundle,
                                std::size_t max_triples);

struct TrainResult {
  model::ModelParams<float> params;
  std::vector<EpochReport> reports;
};

// Deterministic for fixed seed/config; aborts with NumericalError (naming the
// offending batch) if the loss goes non-finite.
TrainResult train(const model::ModelConfig& cfg, const DataBundle& bundle,
                  const TrainConfig& tcfg, std::ostream* log = nullptr);

struct EvalResult {
  double accuracy = 0.0;
  std::size_t n = 0;
  std::map<std::string, double> per_type_accuracy;
  std::map<std::string, std::size_t> per_type_counts;
  // most frequent (gold, predicted, count) confusions, mistakes only
  struct Confusion {
    std::string gold;
    std::string predicted;
    std::size_t count;
  };
  std::vector<Confusion> top_confusions;
  std::vector<int> predictions;  // per sample, split order
};

EvalResult evaluate(const model::ModelParams<float>& params,
                    const DataBundle& bundle, std::string_view split);

// answers ranked by predicted frequency, descending; fractions sum to 1
std::vector<std::pair<std::string, double>> analyze_bias(
    std::span<const int> predictions, const synth::AnswerVocab& vocab);

struct RetrievalStats {
  double mean_triples_per_sample = 0.0;
  double zero_retrieval_fraction = 0.0;
  std::size_t samples = 0;
  std::map<std::string, kg::RelationStat> relation_histogram;
};

// statistics over the exact retrieval calls the trainer would make;
// split "all" covers the whole dataset
RetrievalStats analyze_retrieval(const DataBundle& bundle,
                                 std::string_view split = "all",
                                 std::size_t max_triples = 5);

struct GapEntry {
  std::size_t epoch = 0;
  double gap = 0.0;  // train_accuracy - val_accuracy
  bool flagged = false;
};

inline constexpr double kOverfitGapThreshold = 0.15;

std::vector<GapEntry> gap_analysis(std::span<const EpochReport> reports,
                                   double threshold = kOverfitGapThreshold);

// Reports persist without the wall-time field so identical seeds produce
// byte-identical files; timing lives in summary.json.
void write_reports_jsonl(const std::string& path,
                         std::span<const EpochReport> reports);
std::vector<EpochReport> read_reports_jsonl(const std::string& path);
void write_summary_json(const std::string& path,
                        std::span<const EpochReport> reports,
                        const model::ModelConfig& cfg, const TrainConfig& tcfg,
                        double wall_time_s);

// most frequent train-split gold answer, evaluated on another split
double majority_baseline_accuracy(const DataBundle& bundle,
                                  std::string_view fit_split,
                                  std::string_view eval_split);

}  // namespace klite::pipeline
