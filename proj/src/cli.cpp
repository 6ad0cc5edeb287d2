#include "klite/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "klite/embed.hpp"
#include "klite/kg.hpp"
#include "klite/model.hpp"
#include "klite/pipeline.hpp"
#include "klite/synth.hpp"

namespace klite::cli {

namespace {

namespace fs = std::filesystem;

void echo_config(std::ostream& err, std::string_view command,
                 const nlohmann::ordered_json& cfg) {
  nlohmann::ordered_json j;
  j["command"] = std::string(command);
  j["config"] = cfg;
  err << j.dump() << '\n';
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(s);
  while (std::getline(ss, cur, ','))
    if (!cur.empty()) out.push_back(cur);
  return out;
}

struct IngestArgs {
  std::string edges;
  std::string lang = "en";
  std::string out_prefix;
};

int run_ingest(const IngestArgs& a, std::ostream& out, std::ostream& err) {
  echo_config(err, "ingest",
              {{"edges", a.edges}, {"lang", a.lang}, {"out", a.out_prefix}});
  std::ifstream f(a.edges, std::ios::binary);
  if (!f) throw DataError("cannot open edges file " + a.edges);
  kg::ParseStats stats;
  auto triples = kg::parse_assertions(f, a.lang, &stats);
  const auto index = kg::ConceptIndex::build(std::move(triples));
  index.save(a.out_prefix, a.lang);
  for (const std::string& msg : stats.error_messages) err << msg << '\n';
  nlohmann::ordered_json j;
  j["triples"] = stats.triples;
  j["skipped"] = stats.skipped;
  j["parse_errors"] = stats.errors;
  j["out"] = {{"triples", a.out_prefix + ".triples.tsv"},
              {"meta", a.out_prefix + ".meta.json"}};
  out << j.dump(2) << '\n';
  return 0;
}

struct GenArgs {
  std::uint64_t seed = 0;
  std::size_t scenes = 0;
  std::size_t questions_per_scene = 3;
  double noise_sigma = 0.005;
  std::string out_dir;
};

int run_gen(const GenArgs& a, std::ostream& out, std::ostream& err) {
  echo_config(err, "gen",
              {{"seed", a.seed},
               {"scenes", a.scenes},
               {"questions_per_scene", a.questions_per_scene},
               {"noise_sigma", a.noise_sigma},
               {"out", a.out_dir}});
  synth::GenConfig cfg;
  cfg.seed = a.seed;
  cfg.n_scenes = a.scenes;
  cfg.questions_per_scene = a.questions_per_scene;
  cfg.noise_sigma = a.noise_sigma;
  const auto ds = synth::generate_dataset(cfg);
  synth::write_dataset(ds, a.out_dir);
  nlohmann::ordered_json j;
  j["scenes"] = ds.scenes.size();
  j["samples"] = ds.samples.size();
  j["answers"] = ds.vocab.size();
  j["kg_triples"] = ds.kg_triples.size();
  j["out"] = a.out_dir;
  out << j.dump(2) << '\n';
  return 0;
}

struct DetectArgs {
  std::string images;
  std::string image_id;
  std::string labels;
  std::size_t top_k = 5;
};

int run_detect(const DetectArgs& a, std::ostream& out, std::ostream& err) {
  echo_config(err, "detect",
              {{"images", a.images},
               {"image-id", a.image_id},
               {"labels", a.labels},
               {"top-k", a.top_k}});
  const auto images = embed::EmbeddingTable::load(a.images);
  const auto labels = embed::EmbeddingTable::load(a.labels);
  const std::vector<float>* vec = images.find(a.image_id);
  if (!vec)
    throw DataError("image id '" + a.image_id + "' not found in " + a.images);
  const auto det = embed::detect_concepts(*vec, labels, a.top_k);
  for (const auto& item : det.concepts)
    out << item.token << '\t' << kg::format_double(item.score) << '\n';
  return 0;
}

struct RetrieveArgs {
  std::string concepts;
  std::string keywords;
  std::string kg_prefix;
  std::size_t k = 5;
  std::string block_relations;
};

int run_retrieve(const RetrieveArgs& a, std::ostream& out, std::ostream& err) {
  echo_config(err, "retrieve",
              {{"concepts", a.concepts},
               {"keywords", a.keywords},
               {"kg", a.kg_prefix},
               {"k", a.k},
               {"block-relations", a.block_relations}});
  const auto index = kg::ConceptIndex::load(a.kg_prefix);
  const auto concepts = split_csv(a.concepts);
  const auto keywords = split_csv(a.keywords);
  const auto blocked_list = split_csv(a.block_relations);
  const std::set<std::string> blocked(blocked_list.begin(), blocked_list.end());
  const auto result = kg::retrieve(index, concepts, keywords, a.k,
                                   blocked.empty() ? nullptr : &blocked);
  for (const auto& e : result.entries)
    out << e.triple.head << '\t' << e.triple.relation << '\t' << e.triple.tail
        << '\t' << kg::format_double(e.score) << '\t'
        << kg::provenance_name(e.provenance) << '\n';
  return 0;
}

struct TrainArgs {
  std::string variant = "b";
  std::string preset;
  std::string data_dir;
  std::string kg_prefix;
  std::string out_ckpt;
  std::size_t hidden_dim = 128;
  std::size_t heads = 8;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::string optimizer = "adam";
  std::size_t eval_every = 1;
  std::uint64_t seed = 0;
};

pipeline::DataBundle load_bundle_with_kg(const std::string& data_dir,
                                         const std::string& kg_prefix) {
  pipeline::DataBundle b = pipeline::load_bundle(data_dir);
  if (!kg_prefix.empty()) b.kg_index = kg::ConceptIndex::load(kg_prefix);
  return b;
}

int run_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  echo_config(err, "train",
              {{"variant", a.variant},
               {"preset", a.preset},
               {"data", a.data_dir},
               {"kg", a.kg_prefix},
               {"out", a.out_ckpt},
               {"hidden-dim", a.hidden_dim},
               {"heads", a.heads},
               {"epochs", a.epochs},
               {"batch-size", a.batch_size},
               {"lr", a.lr},
               {"optimizer", a.optimizer},
               {"eval-every", a.eval_every},
               {"seed", a.seed}});

  const auto bundle = load_bundle_with_kg(a.data_dir, a.kg_prefix);

  model::ModelConfig cfg;
  if (!a.preset.empty()) {
    std::ifstream f(a.preset, std::ios::binary);
    if (!f) throw DataError("cannot open preset " + a.preset);
    std::stringstream ss;
    ss << f.rdbuf();
    cfg = model::ModelConfig::from_json(ss.str());
  } else {
    cfg.variant = model::variant_from_name(a.variant);
    cfg.hidden_dim = a.hidden_dim;
    cfg.num_heads = a.heads;
    cfg.answer_vocab_size = bundle.dataset.vocab.size();
    cfg.image_dim = bundle.dataset.gen.embed_dim;
    cfg.question_dim = bundle.dataset.gen.embed_dim;
    cfg.knowledge_dim = bundle.dataset.gen.kg_dim;
  }

  pipeline::TrainConfig tcfg;
  tcfg.epochs = a.epochs;
  tcfg.batch_size = a.batch_size;
  tcfg.learning_rate = a.lr;
  tcfg.optimizer = pipeline::optimizer_from_name(a.optimizer);
  tcfg.eval_every = a.eval_every;
  tcfg.seed = a.seed;

  err << "resolved model config: " << cfg.to_json() << '\n';
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = pipeline::train(cfg, bundle, tcfg, &err);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  model::save_checkpoint(result.params, a.out_ckpt);
  pipeline::write_reports_jsonl(a.out_ckpt + ".reports.jsonl", result.reports);
  pipeline::write_summary_json(a.out_ckpt + ".summary.json", result.reports, cfg,
                               tcfg, wall);

  nlohmann::ordered_json j;
  j["checkpoint"] = a.out_ckpt;
  j["reports"] = a.out_ckpt + ".reports.jsonl";
  j["summary"] = a.out_ckpt + ".summary.json";
  j["param_count"] = model::param_count(cfg);
  if (!result.reports.empty()) {
    j["final_train_accuracy"] = result.reports.back().train_accuracy;
    j["final_val_accuracy"] = result.reports.back().val_accuracy;
  }
  j["wall_time_s"] = wall;
  out << j.dump(2) << '\n';
  return 0;
}

struct EvalArgs {
  std::string ckpt;
  std::string data_dir;
  std::string kg_prefix;
  std::string split = "val";
};

int run_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  echo_config(err, "eval",
              {{"ckpt", a.ckpt},
               {"data", a.data_dir},
               {"kg", a.kg_prefix},
               {"split", a.split}});
  const auto bundle = load_bundle_with_kg(a.data_dir, a.kg_prefix);
  const auto params = model::load_checkpoint(a.ckpt);
  const auto r = pipeline::evaluate(params, bundle, a.split);
  nlohmann::ordered_json j;
  j["split"] = a.split;
  j["samples"] = r.n;
  j["accuracy"] = r.accuracy;
  nlohmann::ordered_json per_type = nlohmann::ordered_json::object();
  for (const auto& [type, acc] : r.per_type_accuracy)
    per_type[type] = {{"accuracy", acc}, {"count", r.per_type_counts.at(type)}};
  j["per_type"] = per_type;
  nlohmann::ordered_json conf = nlohmann::ordered_json::array();
  for (const auto& c : r.top_confusions)
    conf.push_back({{"gold", c.gold}, {"predicted", c.predicted}, {"count", c.count}});
  j["top_confusions"] = conf;
  out << j.dump(2) << '\n';
  return 0;
}

struct AnalyzeArgs {
  std::string what;
  std::string ckpt;
  std::string data_dir;
  std::string kg_prefix;
  std::string split;
  std::string reports;
  std::size_t k = 5;
};

int run_analyze(const AnalyzeArgs& a, std::ostream& out, std::ostream& err) {
  echo_config(err, "analyze",
              {{"what", a.what},
               {"ckpt", a.ckpt},
               {"data", a.data_dir},
               {"kg", a.kg_prefix},
               {"split", a.split},
               {"reports", a.reports},
               {"k", a.k}});
  nlohmann::ordered_json j;
  if (a.what == "bias") {
    if (a.ckpt.empty() || a.data_dir.empty())
      throw DataError("analyze bias needs --ckpt and --data");
    const auto bundle = load_bundle_with_kg(a.data_dir, a.kg_prefix);
    const auto params = model::load_checkpoint(a.ckpt);
    const std::string split = a.split.empty() ? "val" : a.split;
    const auto r = pipeline::evaluate(params, bundle, split);
    const auto ranked = pipeline::analyze_bias(r.predictions, bundle.dataset.vocab);
    j["split"] = split;
    j["predictions"] = r.predictions.size();
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& [token, frac] : ranked)
      arr.push_back({{"answer", token}, {"fraction", frac}});
    j["ranked"] = arr;
  } else if (a.what == "retrieval") {
    if (a.data_dir.empty()) throw DataError("analyze retrieval needs --data");
    const auto bundle = load_bundle_with_kg(a.data_dir, a.kg_prefix);
    const std::string split = a.split.empty() ? "all" : a.split;
    const auto stats = pipeline::analyze_retrieval(bundle, split, a.k);
    j["split"] = split;
    j["samples"] = stats.samples;
    j["mean_triples_per_sample"] = stats.mean_triples_per_sample;
    j["zero_retrieval_fraction"] = stats.zero_retrieval_fraction;
    nlohmann::ordered_json hist = nlohmann::ordered_json::object();
    for (const auto& [rel, stat] : stats.relation_histogram)
      hist[rel] = {{"count", stat.count}, {"fraction", stat.fraction}};
    j["relation_histogram"] = hist;
  } else if (a.what == "gap") {
    if (a.reports.empty()) throw DataError("analyze gap needs --reports");
    const auto reports = pipeline::read_reports_jsonl(a.reports);
    const auto gaps = pipeline::gap_analysis(reports);
    j["threshold"] = pipeline::kOverfitGapThreshold;
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& g : gaps)
      arr.push_back({{"epoch", g.epoch}, {"gap", g.gap}, {"flagged", g.flagged}});
    j["gaps"] = arr;
  } else {
    throw DataError("unknown analysis '" + a.what + "' (bias|retrieval|gap)");
  }
  out << j.dump(2) << '\n';
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err) {
  CLI::App app{"klite: lightweight knowledge-grounded VQA lab"};
  app.require_subcommand(1);

  IngestArgs ingest;
  auto* cmd_ingest =
      app.add_subcommand("ingest", "parse an assertions dump into an index");
  cmd_ingest->add_option("--edges", ingest.edges, "assertions CSV (tab-separated)")
      ->required();
  cmd_ingest->add_option("--lang", ingest.lang, "language filter (default en)");
  cmd_ingest->add_option("--out", ingest.out_prefix, "output index prefix")
      ->required();

  GenArgs gen;
  auto* cmd_gen = app.add_subcommand("gen", "generate the synthetic benchmark");
  cmd_gen->add_option("--seed", gen.seed, "generator seed")->required();
  cmd_gen->add_option("--scenes", gen.scenes, "number of scenes")->required();
  cmd_gen->add_option("--questions-per-scene", gen.questions_per_scene,
                      "questions per scene (default 3)");
  cmd_gen->add_option("--noise-sigma", gen.noise_sigma,
                      "image vector noise (default 0.005)");
  cmd_gen->add_option("--out", gen.out_dir, "output dataset directory")->required();

  DetectArgs detect;
  auto* cmd_detect =
      app.add_subcommand("detect", "zero-shot concept detection for one image");
  cmd_detect->add_option("--images", detect.images, "image vectors (word2vec text)")
      ->required();
  cmd_detect->add_option("--image-id", detect.image_id, "image/scene id")
      ->required();
  cmd_detect->add_option("--labels", detect.labels, "label table (word2vec text)")
      ->required();
  cmd_detect->add_option("--top-k", detect.top_k, "number of concepts (default 5)");

  RetrieveArgs retrieve;
  auto* cmd_retrieve =
      app.add_subcommand("retrieve", "prioritized knowledge retrieval");
  cmd_retrieve->add_option("--concepts", retrieve.concepts,
                           "comma-separated image concepts");
  cmd_retrieve->add_option("--keywords", retrieve.keywords,
                           "comma-separated question keywords");
  cmd_retrieve->add_option("--kg", retrieve.kg_prefix, "index prefix")->required();
  cmd_retrieve->add_option("--k", retrieve.k, "max triples (default 5)");
  cmd_retrieve->add_option("--block-relations", retrieve.block_relations,
                           "comma-separated relations to exclude");

  TrainArgs train;
  auto* cmd_train = app.add_subcommand("train", "train a model on a dataset");
  cmd_train->add_option("--variant", train.variant, "model variant a|b");
  cmd_train->add_option("--preset", train.preset, "model config JSON file");
  cmd_train->add_option("--data", train.data_dir, "dataset directory")->required();
  cmd_train->add_option("--kg", train.kg_prefix,
                        "index prefix (default: dataset's own kg)");
  cmd_train->add_option("--out", train.out_ckpt, "checkpoint path")->required();
  cmd_train->add_option("--hidden-dim", train.hidden_dim, "hidden width (default 128)");
  cmd_train->add_option("--heads", train.heads, "attention heads (default 8)");
  cmd_train->add_option("--epochs", train.epochs, "training epochs (default 10)");
  cmd_train->add_option("--batch-size", train.batch_size, "batch size (default 32)");
  cmd_train->add_option("--lr", train.lr, "learning rate (default 1e-3)");
  cmd_train->add_option("--optimizer", train.optimizer, "adam|sgd (default adam)");
  cmd_train->add_option("--eval-every", train.eval_every,
                        "epochs between reports (default 1)");
  cmd_train->add_option("--seed", train.seed, "training seed")->required();

  EvalArgs eval;
  auto* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  cmd_eval->add_option("--ckpt", eval.ckpt, "checkpoint path")->required();
  cmd_eval->add_option("--data", eval.data_dir, "dataset directory")->required();
  cmd_eval->add_option("--kg", eval.kg_prefix, "index prefix (default: dataset kg)");
  cmd_eval->add_option("--split", eval.split, "train|val|all (default val)");

  AnalyzeArgs analyze;
  auto* cmd_analyze =
      app.add_subcommand("analyze", "bias / retrieval / overfitting-gap analyses");
  cmd_analyze->add_option("--what", analyze.what, "bias|retrieval|gap")->required();
  cmd_analyze->add_option("--ckpt", analyze.ckpt, "checkpoint (bias)");
  cmd_analyze->add_option("--data", analyze.data_dir, "dataset dir (bias, retrieval)");
  cmd_analyze->add_option("--kg", analyze.kg_prefix, "index prefix override");
  cmd_analyze->add_option("--split", analyze.split, "sample split");
  cmd_analyze->add_option("--reports", analyze.reports, "reports JSONL (gap)");
  cmd_analyze->add_option("--k", analyze.k, "retrieval cap (retrieval, default 5)");

  std::vector<const char*> argv;
  argv.push_back("klite");
  for (const std::string& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << e.what() << '\n';
    return 1;
  }

  try {
    if (cmd_ingest->parsed()) return run_ingest(ingest, out, err);
    if (cmd_gen->parsed()) return run_gen(gen, out, err);
    if (cmd_detect->parsed()) return run_detect(detect, out, err);
    if (cmd_retrieve->parsed()) return run_retrieve(retrieve, out, err);
    if (cmd_train->parsed()) return run_train(train, out, err);
    if (cmd_eval->parsed()) return run_eval(eval, out, err);
    if (cmd_analyze->parsed()) return run_analyze(analyze, out, err);
  } catch (const NumericalError& e) {
    err << "numerical abort: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const TensorError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  err << "no subcommand given\n";
  return 1;
}

}  // namespace klite::cli
