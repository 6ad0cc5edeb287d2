#include "klite/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>

#include <json.hpp>

#include "klite/embed.hpp"
#include "klite/rng.hpp"

namespace klite::pipeline {

std::string_view optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::adam ? "adam" : "sgd";
}

OptimizerKind optimizer_from_name(std::string_view s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw DataError("unknown optimizer '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  if (epochs == 0) throw DataError("train config: epochs must be >= 1");
  if (batch_size == 0) throw DataError("train config: batch_size must be >= 1");
  // lr 0 is allowed: a zero-step run must leave parameters untouched
  if (!(learning_rate >= 0.0))
    throw DataError("train config: learning_rate must be >= 0");
  if (eval_every == 0) throw DataError("train config: eval_every must be >= 1");
}

const synth::Scene& DataBundle::scene_by_id(std::string_view id) const {
  const auto it = scene_lookup_.find(id);
  if (it == scene_lookup_.end())
    throw DataError("unknown scene id '" + std::string(id) + "'");
  return dataset.scenes[it->second];
}

void DataBundle::build_scene_lookup() {
  scene_lookup_.clear();
  for (std::size_t i = 0; i < dataset.scenes.size(); ++i)
    scene_lookup_.emplace(dataset.scenes[i].scene_id, i);
}

DataBundle load_bundle(const std::string& data_dir) {
  DataBundle b;
  b.dataset = synth::load_dataset(data_dir);
  b.kg_index = kg::ConceptIndex::load(
      (std::filesystem::path(data_dir) / "kg").string());
  const auto stop_path = std::filesystem::path(data_dir) / "stopwords.txt";
  b.stopwords = std::filesystem::exists(stop_path)
                    ? embed::load_stopwords(stop_path.string())
                    : embed::default_stopword_set();
  b.build_scene_lookup();
  return b;
}

DataBundle bundle_from_dataset(synth::Dataset ds) {
  DataBundle b;
  b.kg_index = kg::ConceptIndex::build(ds.kg_triples);
  b.dataset = std::move(ds);
  b.stopwords = embed::default_stopword_set();
  b.build_scene_lookup();
  return b;
}

SampleFeatures compute_features(const synth::VqaSample& sample,
                                const DataBundle& bundle,
                                std::size_t max_triples) {
  const synth::Scene& scene = bundle.scene_by_id(sample.scene_id);
  SampleFeatures f;
  f.gold = sample.gold_answer;

  f.image_vec = tc::Mat<float>(1, scene.image_vec.size());
  std::copy(scene.image_vec.begin(), scene.image_vec.end(), f.image_vec.a.begin());

  const auto detection =
      embed::detect_concepts(scene.image_vec, bundle.dataset.label_table, 5);
  std::vector<std::string> concepts;
  concepts.reserve(detection.concepts.size());
  for (const auto& item : detection.concepts) concepts.push_back(item.token);

  const auto keywords = embed::extract_keywords(sample.question, bundle.stopwords);
  f.retrieval = kg::retrieve(bundle.kg_index, concepts, keywords, max_triples);

  const auto enc = embed::encode_question(sample.question, bundle.dataset.text_table);
  f.question_oov = enc.oov;
  f.question_vec = tc::Mat<float>(1, enc.vec.size());
  std::copy(enc.vec.begin(), enc.vec.end(), f.question_vec.a.begin());

  // a triple embeds as the mean of its head/relation/tail token vectors
  const embed::EmbeddingTable& kg_table = bundle.dataset.kg_table;
  f.knowledge = tc::Mat<float>(f.retrieval.entries.size(), kg_table.dim());
  for (std::size_t i = 0; i < f.retrieval.entries.size(); ++i) {
    const kg::Triple& t = f.retrieval.entries[i].triple;
    std::vector<double> acc(kg_table.dim(), 0.0);
    std::size_t hits = 0;
    for (const std::string* tok : {&t.head, &t.relation, &t.tail}) {
      if (const std::vector<float>* v = kg_table.find(*tok)) {
        for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += (*v)[d];
        ++hits;
      }
    }
    if (hits > 0)
      for (std::size_t d = 0; d < acc.size(); ++d)
        f.knowledge.at(i, d) =
            static_cast<float>(acc[d] / static_cast<double>(hits));
  }
  return f;
}

namespace {

struct OptimizerState {
  std::vector<tc::Mat<float>> m;
  std::vector<tc::Mat<float>> v;
  std::size_t step = 0;
};

void optimizer_step(model::ModelParams<float>& params,
                    std::vector<tc::Mat<float>>& grads, OptimizerState& state,
                    const TrainConfig& tcfg) {
  ++state.step;
  const auto lr = static_cast<float>(tcfg.learning_rate);
  if (tcfg.optimizer == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.tensors.size(); ++i)
      kernels::active<float>().axpy(-lr, grads[i].a.data(),
                                    params.tensors[i].value.a.data(),
                                    grads[i].size());
    return;
  }
  const auto b1 = static_cast<float>(tcfg.adam_beta1);
  const auto b2 = static_cast<float>(tcfg.adam_beta2);
  const auto eps = static_cast<float>(tcfg.adam_eps);
  const float bc1 =
      1.f - std::pow(b1, static_cast<float>(state.step));
  const float bc2 =
      1.f - std::pow(b2, static_cast<float>(state.step));
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    float* p = params.tensors[i].value.a.data();
    const float* g = grads[i].a.data();
    float* m = state.m[i].a.data();
    float* v = state.v[i].a.data();
    const std::size_t n = grads[i].size();
    for (std::size_t e = 0; e < n; ++e) {
      m[e] = b1 * m[e] + (1.f - b1) * g[e];
      v[e] = b2 * v[e] + (1.f - b2) * g[e] * g[e];
      const float mhat = m[e] / bc1;
      const float vhat = v[e] / bc2;
      p[e] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

std::vector<std::size_t> split_indices(const synth::Dataset& ds,
                                       std::string_view split) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    if (split == "all" || ds.samples[i].split == split) out.push_back(i);
  return out;
}

int argmax_row(const tc::Mat<float>& logits) {
  int best = 0;
  for (std::size_t j = 1; j < logits.cols; ++j)
    if (logits.a[j] > logits.a[static_cast<std::size_t>(best)])
      best = static_cast<int>(j);
  return best;
}

EvalResult evaluate_features(const model::ModelParams<float>& params,
                             const synth::Dataset& ds,
                             std::span<const std::size_t> idx,
                             std::span<const SampleFeatures> features) {
  EvalResult r;
  r.n = idx.size();
  std::map<std::pair<std::string, std::string>, std::size_t> confusion;
  std::map<std::string, std::size_t> type_correct;
  for (const std::size_t i : idx) {
    const SampleFeatures& f = features[i];
    const auto out =
        model::forward(params, f.image_vec, f.question_vec, f.knowledge);
    const int pred = argmax_row(out.logits);
    r.predictions.push_back(pred);
    const std::string type(synth::question_type_name(ds.samples[i].type));
    ++r.per_type_counts[type];
    if (pred == f.gold) {
      ++type_correct[type];
    } else {
      ++confusion[{ds.vocab.token(f.gold), ds.vocab.token(pred)}];
    }
  }
  std::size_t correct = 0;
  for (auto& [type, count] : r.per_type_counts) {
    const std::size_t c = type_correct[type];
    correct += c;
    r.per_type_accuracy[type] =
        count ? static_cast<double>(c) / static_cast<double>(count) : 0.0;
  }
  r.accuracy = r.n ? static_cast<double>(correct) / static_cast<double>(r.n) : 0.0;

  std::vector<std::pair<std::pair<std::string, std::string>, std::size_t>> flat(
      confusion.begin(), confusion.end());
  std::sort(flat.begin(), flat.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  for (std::size_t i = 0; i < flat.size() && i < 10; ++i)
    r.top_confusions.push_back(
        {flat[i].first.first, flat[i].first.second, flat[i].second});
  return r;
}

}  // namespace

TrainResult train(const model::ModelConfig& cfg, const DataBundle& bundle,
                  const TrainConfig& tcfg, std::ostream* log) {
  cfg.validate();
  tcfg.validate();
  if (bundle.dataset.samples.empty()) throw DataError("train: empty dataset");
  if (cfg.answer_vocab_size != bundle.dataset.vocab.size())
    throw DataError("train: model expects " +
                    std::to_string(cfg.answer_vocab_size) +
                    " answers, dataset vocabulary has " +
                    std::to_string(bundle.dataset.vocab.size()));

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&t0] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
  };

  // frozen encoders + pure retrieval: features are computed once
  std::vector<SampleFeatures> features;
  features.reserve(bundle.dataset.samples.size());
  for (const synth::VqaSample& s : bundle.dataset.samples)
    features.push_back(compute_features(s, bundle, cfg.max_triples));

  const auto train_idx = split_indices(bundle.dataset, "train");
  const auto val_idx = split_indices(bundle.dataset, "val");
  if (train_idx.empty()) throw DataError("train: no samples in train split");

  TrainResult result;
  result.params = model::ModelParams<float>::init(cfg, tcfg.seed);
  auto& params = result.params;

  std::vector<tc::Mat<float>> grads;
  OptimizerState opt;
  for (const auto& t : params.tensors) {
    grads.emplace_back(t.value.rows, t.value.cols);
    opt.m.emplace_back(t.value.rows, t.value.cols);
    opt.v.emplace_back(t.value.rows, t.value.cols);
  }

  rng::Rng shuffle_rng(tcfg.seed ^ 0x5DEECE66Dull);
  std::vector<std::size_t> order = train_idx;

  for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batch_id = 0;
    for (std::size_t start = 0; start < order.size();
         start += tcfg.batch_size, ++batch_id) {
      const std::size_t stop = std::min(order.size(), start + tcfg.batch_size);
      const auto batch_n = static_cast<float>(stop - start);
      for (auto& g : grads) std::fill(g.a.begin(), g.a.end(), 0.f);
      for (std::size_t bi = start; bi < stop; ++bi) {
        const SampleFeatures& f = features[order[bi]];
        try {
          tc::Tape<float> tape;
          const auto logits = model::forward_on_tape(
              tape, params, &grads, f.image_vec, f.question_vec, f.knowledge,
              static_cast<model::ForwardOutput<float>*>(nullptr));
          const auto loss = tape.cross_entropy(logits, {f.gold});
          const double loss_val = tape.val(loss).a[0];
          if (!std::isfinite(loss_val))
            throw NumericalError("non-finite loss");
          loss_sum += loss_val;
          tape.backward(loss, 1.f / batch_n);
        } catch (const NumericalError& e) {
          throw NumericalError("training aborted at epoch " +
                               std::to_string(epoch) + ", batch " +
                               std::to_string(batch_id) + ": " + e.what());
        }
      }
      optimizer_step(params, grads, opt, tcfg);
    }

    if (epoch % tcfg.eval_every == 0 || epoch == tcfg.epochs) {
      EpochReport rep;
      rep.epoch = epoch;
      rep.train_loss = loss_sum / static_cast<double>(order.size());
      rep.train_accuracy =
          evaluate_features(params, bundle.dataset, train_idx, features).accuracy;
      rep.val_accuracy =
          val_idx.empty()
              ? 0.0
              : evaluate_features(params, bundle.dataset, val_idx, features)
                    .accuracy;
      rep.wall_time_s = elapsed();
      if (log)
        *log << "epoch " << rep.epoch << " loss " << rep.train_loss
             << " train_acc " << rep.train_accuracy << " val_acc "
             << rep.val_accuracy << " (" << rep.wall_time_s << "s)\n";
      result.reports.push_back(rep);
    }
  }
  return result;
}

EvalResult evaluate(const model::ModelParams<float>& params,
                    const DataBundle& bundle, std::string_view split) {
  const auto idx = split_indices(bundle.dataset, split);
  if (idx.empty())
    throw DataError("evaluate: split '" + std::string(split) + "' is empty");
  std::vector<SampleFeatures> features(bundle.dataset.samples.size());
  for (const std::size_t i : idx)
    features[i] =
        compute_features(bundle.dataset.samples[i], bundle, params.cfg.max_triples);
  return evaluate_features(params, bundle.dataset, idx, features);
}

std::vector<std::pair<std::string, double>> analyze_bias(
    std::span<const int> predictions, const synth::AnswerVocab& vocab) {
  std::vector<std::pair<std::string, double>> out;
  if (predictions.empty()) return out;
  std::vector<std::size_t> counts(vocab.size(), 0);
  for (const int p : predictions) {
    if (p < 0 || static_cast<std::size_t>(p) >= vocab.size())
      throw DataError("prediction index " + std::to_string(p) + " out of range");
    ++counts[static_cast<std::size_t>(p)];
  }
  for (std::size_t i = 0; i < counts.size(); ++i)
    if (counts[i] > 0)
      out.emplace_back(vocab.token(static_cast<int>(i)),
                       static_cast<double>(counts[i]) /
                           static_cast<double>(predictions.size()));
  std::sort(out.begin(), out.end(), [&](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return vocab.index_of(a.first) < vocab.index_of(b.first);
  });
  return out;
}

RetrievalStats analyze_retrieval(const DataBundle& bundle,
                                 std::string_view split,
                                 std::size_t max_triples) {
  RetrievalStats stats;
  const auto idx = split_indices(bundle.dataset, split);
  stats.samples = idx.size();
  if (idx.empty()) return stats;
  std::vector<kg::RetrievalResult> results;
  results.reserve(idx.size());
  std::size_t total = 0, zero = 0;
  for (const std::size_t i : idx) {
    SampleFeatures f =
        compute_features(bundle.dataset.samples[i], bundle, max_triples);
    total += f.retrieval.entries.size();
    if (f.retrieval.entries.empty()) ++zero;
    results.push_back(std::move(f.retrieval));
  }
  stats.mean_triples_per_sample =
      static_cast<double>(total) / static_cast<double>(idx.size());
  stats.zero_retrieval_fraction =
      static_cast<double>(zero) / static_cast<double>(idx.size());
  stats.relation_histogram = kg::relation_histogram(results);
  return stats;
}

std::vector<GapEntry> gap_analysis(std::span<const EpochReport> reports,
                                   double threshold) {
  std::vector<GapEntry> out;
  out.reserve(reports.size());
  for (const EpochReport& r : reports) {
    GapEntry g;
    g.epoch = r.epoch;
    g.gap = r.train_accuracy - r.val_accuracy;
    g.flagged = g.gap > threshold;
    out.push_back(g);
  }
  return out;
}

void write_reports_jsonl(const std::string& path,
                         std::span<const EpochReport> reports) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  for (const EpochReport& r : reports) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["train_loss"] = r.train_loss;
    j["train_accuracy"] = r.train_accuracy;
    j["val_accuracy"] = r.val_accuracy;
    f << j.dump() << '\n';
  }
}

std::vector<EpochReport> read_reports_jsonl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::vector<EpochReport> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      EpochReport r;
      r.epoch = j.at("epoch").get<std::size_t>();
      r.train_loss = j.at("train_loss").get<double>();
      r.train_accuracy = j.at("train_accuracy").get<double>();
      r.val_accuracy = j.at("val_accuracy").get<double>();
      out.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_summary_json(const std::string& path,
                        std::span<const EpochReport> reports,
                        const model::ModelConfig& cfg, const TrainConfig& tcfg,
                        double wall_time_s) {
  nlohmann::ordered_json j;
  j["model"] = nlohmann::ordered_json::parse(cfg.to_json());
  j["optimizer"] = std::string(optimizer_name(tcfg.optimizer));
  j["learning_rate"] = tcfg.learning_rate;
  j["batch_size"] = tcfg.batch_size;
  j["epochs"] = tcfg.epochs;
  j["seed"] = tcfg.seed;
  j["param_count"] = model::param_count(cfg);
  if (!reports.empty()) {
    const EpochReport& last = reports.back();
    j["final_train_loss"] = last.train_loss;
    j["final_train_accuracy"] = last.train_accuracy;
    j["final_val_accuracy"] = last.val_accuracy;
    const auto gaps = gap_analysis(reports);
    j["final_overfit_gap"] = gaps.back().gap;
    j["overfit_flagged"] = gaps.back().flagged;
  }
  j["wall_time_s"] = wall_time_s;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f << j.dump(2) << '\n';
}

double majority_baseline_accuracy(const DataBundle& bundle,
                                  std::string_view fit_split,
                                  std::string_view eval_split) {
  const auto fit = split_indices(bundle.dataset, fit_split);
  const auto eval = split_indices(bundle.dataset, eval_split);
  if (fit.empty() || eval.empty())
    throw DataError("majority baseline: empty split");
  std::map<int, std::size_t> counts;
  for (const std::size_t i : fit) ++counts[bundle.dataset.samples[i].gold_answer];
  int majority = 0;
  std::size_t best = 0;
  for (const auto& [answer, count] : counts)
    if (count > best || (count == best && answer < majority)) {
      best = count;
      majority = answer;
    }
  std::size_t correct = 0;
  for (const std::size_t i : eval)
    if (bundle.dataset.samples[i].gold_answer == majority) ++correct;
  return static_cast<double>(correct) / static_cast<double>(eval.size());
}

}  // namespace klite::pipeline
