#include "klite/model.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "klite/rng.hpp"

namespace klite::model {

std::string_view variant_name(Variant v) { return v == Variant::a ? "a" : "b"; }

Variant variant_from_name(std::string_view s) {
  if (s == "a" || s == "A") return Variant::a;
  if (s == "b" || s == "B") return Variant::b;
  throw DataError("unknown model variant '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  if (hidden_dim == 0 || num_heads == 0 || hidden_dim % num_heads != 0)
    throw DataError("config: num_heads (" + std::to_string(num_heads) +
                    ") must divide hidden_dim (" + std::to_string(hidden_dim) + ")");
  if (hidden_dim % 2 != 0)
    throw DataError("config: hidden_dim must be even (MLP inner width is hidden/2)");
  if (answer_vocab_size < 2)
    throw DataError("config: answer_vocab_size must be >= 2");
  if (image_dim == 0 || question_dim == 0 || knowledge_dim == 0)
    throw DataError("config: feature dims must be positive");
  if (max_triples == 0) throw DataError("config: max_triples must be >= 1");
}

std::string ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["variant"] = std::string(variant_name(variant));
  j["image_dim"] = image_dim;
  j["question_dim"] = question_dim;
  j["knowledge_dim"] = knowledge_dim;
  j["hidden_dim"] = hidden_dim;
  j["num_heads"] = num_heads;
  j["answer_vocab_size"] = answer_vocab_size;
  j["max_triples"] = max_triples;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("config JSON parse failed: ") + e.what());
  }
  ModelConfig cfg;
  try {
    cfg.variant = variant_from_name(j.at("variant").get<std::string>());
    cfg.image_dim = j.at("image_dim").get<std::size_t>();
    cfg.question_dim = j.at("question_dim").get<std::size_t>();
    cfg.knowledge_dim = j.at("knowledge_dim").get<std::size_t>();
    cfg.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    cfg.num_heads = j.at("num_heads").get<std::size_t>();
    cfg.answer_vocab_size = j.at("answer_vocab_size").get<std::size_t>();
    cfg.max_triples = j.at("max_triples").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("config JSON missing field: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>>
declared_tensors(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t h = cfg.hidden_dim;
  const std::size_t m = cfg.mlp_dim();
  std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> out;
  auto add = [&](std::string name, std::size_t r, std::size_t c) {
    out.emplace_back(std::move(name), std::make_pair(r, c));
  };
  add("img_proj.w", cfg.image_dim, h);
  add("img_proj.b", 1, h);
  add("q_proj.w", cfg.question_dim, h);
  add("q_proj.b", 1, h);
  add("kg_proj.w", cfg.knowledge_dim, h);
  add("kg_proj.b", 1, h);
  auto add_block = [&](const std::string& prefix) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) add(prefix + ".attn." + w, h, h);
    for (const char* b : {"bq", "bk", "bv", "bo"}) add(prefix + ".attn." + b, 1, h);
    add(prefix + ".ln1.gain", 1, h);
    add(prefix + ".ln1.bias", 1, h);
    add(prefix + ".mlp.w1", h, m);
    add(prefix + ".mlp.b1", 1, m);
    add(prefix + ".mlp.w2", m, h);
    add(prefix + ".mlp.b2", 1, h);
    add(prefix + ".ln2.gain", 1, h);
    add(prefix + ".ln2.bias", 1, h);
  };
  add_block("stage1");
  if (cfg.variant == Variant::b) add_block("stage2");
  const std::size_t head_in = cfg.variant == Variant::a ? 2 * h : h;
  add("head.w", head_in, cfg.answer_vocab_size);
  add("head.b", 1, cfg.answer_vocab_size);
  return out;
}

std::size_t param_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t h = cfg.hidden_dim;
  const std::size_t m = cfg.mlp_dim();
  const std::size_t v = cfg.answer_vocab_size;
  const std::size_t projections =
      (cfg.image_dim * h + h) + (cfg.question_dim * h + h) +
      (cfg.knowledge_dim * h + h);
  const std::size_t block = 4 * (h * h + h)       // attention projections
                            + 2 * (2 * h)          // two layer norms
                            + (h * m + m)          // mlp.w1 + b1
                            + (m * h + h);         // mlp.w2 + b2
  const std::size_t blocks = cfg.variant == Variant::b ? 2 * block : block;
  const std::size_t head_in = cfg.variant == Variant::a ? 2 * h : h;
  const std::size_t head = head_in * v + v;
  return projections + blocks + head;
}

namespace {

bool is_weight(std::string_view name) {
  return name.ends_with(".w") || name.ends_with(".w1") || name.ends_with(".w2") ||
         name.ends_with("wq") || name.ends_with("wk") || name.ends_with("wv") ||
         name.ends_with("wo");
}

bool is_gain(std::string_view name) { return name.ends_with(".gain"); }

}  // namespace

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams<T> p;
  p.cfg = cfg;
  rng::Rng r(seed);
  for (const auto& [name, shape] : declared_tensors(cfg)) {
    tc::Mat<T> m(shape.first, shape.second);
    if (is_weight(name)) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(shape.first));
      for (T& x : m.a) x = static_cast<T>(r.uniform(-bound, bound));
    } else if (is_gain(name)) {
      for (T& x : m.a) x = T(1);
    }  // biases stay zero
    p.tensors.push_back({name, std::move(m)});
  }
  return p;
}

template <typename T>
std::size_t ModelParams<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.value.size();
  return n;
}

template <typename T>
const tc::Mat<T>* ModelParams<T>::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t.value;
  return nullptr;
}

template <typename T>
tc::Mat<T>* ModelParams<T>::find(std::string_view name) {
  for (auto& t : tensors)
    if (t.name == name) return &t.value;
  return nullptr;
}

template struct ModelParams<float>;
template struct ModelParams<double>;

namespace {

// name -> bound tape id resolver over the declared order
template <typename T>
class Bound {
 public:
  Bound(tc::Tape<T>& tape, const ModelParams<T>& params,
        std::vector<tc::Mat<T>>* grads)
      : params_(params) {
    ids_.reserve(params.tensors.size());
    for (std::size_t i = 0; i < params.tensors.size(); ++i)
      ids_.push_back(tape.param(&params.tensors[i].value,
                                grads ? &(*grads)[i] : nullptr));
  }

  std::uint32_t operator[](std::string_view name) const {
    for (std::size_t i = 0; i < params_.tensors.size(); ++i)
      if (params_.tensors[i].name == name) return ids_[i];
    throw TensorError("unbound parameter '" + std::string(name) + "'");
  }

 private:
  const ModelParams<T>& params_;
  std::vector<std::uint32_t> ids_;
};

// attention -> residual -> LN -> MLP(ReLU) -> residual -> LN
template <typename T>
typename tc::Tape<T>::Id fusion_block(tc::Tape<T>& tape, const Bound<T>& p,
                                      const std::string& prefix,
                                      typename tc::Tape<T>::Id query,
                                      typename tc::Tape<T>::Id keyvalue,
                                      const tc::AttentionConfig& acfg,
                                      tc::Mat<T>* attn_out) {
  tc::MhaParamIds mp{p[prefix + ".attn.wq"], p[prefix + ".attn.bq"],
                     p[prefix + ".attn.wk"], p[prefix + ".attn.bk"],
                     p[prefix + ".attn.wv"], p[prefix + ".attn.bv"],
                     p[prefix + ".attn.wo"], p[prefix + ".attn.bo"]};
  const auto attn = tc::multi_head_attention(tape, query, keyvalue, mp, acfg, attn_out);
  const auto norm1 = tape.layer_norm(tape.add(query, attn), p[prefix + ".ln1.gain"],
                                     p[prefix + ".ln1.bias"]);
  const auto hidden = tape.relu(
      tape.linear(norm1, p[prefix + ".mlp.w1"], p[prefix + ".mlp.b1"]));
  const auto mlp = tape.linear(hidden, p[prefix + ".mlp.w2"], p[prefix + ".mlp.b2"]);
  return tape.layer_norm(tape.add(norm1, mlp), p[prefix + ".ln2.gain"],
                         p[prefix + ".ln2.bias"]);
}

}  // namespace

template <typename T>
typename tc::Tape<T>::Id forward_on_tape(tc::Tape<T>& tape,
                                         const ModelParams<T>& params,
                                         std::vector<tc::Mat<T>>* grads,
                                         const tc::Mat<T>& image_vec,
                                         const tc::Mat<T>& question_vec,
                                         const tc::Mat<T>& knowledge,
                                         ForwardOutput<T>* out) {
  const ModelConfig& cfg = params.cfg;
  if (image_vec.rows != 1 || image_vec.cols != cfg.image_dim)
    throw TensorError("forward: image vector " +
                      tc::shape_str(image_vec.rows, image_vec.cols) + " vs dim " +
                      std::to_string(cfg.image_dim));
  if (question_vec.rows != 1 || question_vec.cols != cfg.question_dim)
    throw TensorError("forward: question vector " +
                      tc::shape_str(question_vec.rows, question_vec.cols) +
                      " vs dim " + std::to_string(cfg.question_dim));
  if (knowledge.rows > 0 && knowledge.cols != cfg.knowledge_dim)
    throw TensorError("forward: knowledge " +
                      tc::shape_str(knowledge.rows, knowledge.cols) + " vs dim " +
                      std::to_string(cfg.knowledge_dim));
  if (knowledge.rows > cfg.max_triples)
    throw TensorError("forward: " + std::to_string(knowledge.rows) +
                      " triples exceed cap " + std::to_string(cfg.max_triples));

  const Bound<T> p(tape, params, grads);
  const tc::AttentionConfig acfg(cfg.hidden_dim, cfg.num_heads);
  const std::size_t n_triples = knowledge.rows;

  const auto img_h = tape.linear(tape.input(image_vec), p["img_proj.w"],
                                 p["img_proj.b"]);
  const auto q_h = tape.linear(tape.input(question_vec), p["q_proj.w"],
                               p["q_proj.b"]);

  tc::Mat<T> stage1_attn;
  const auto fused = fusion_block(tape, p, "stage1", img_h, q_h, acfg, &stage1_attn);

  typename tc::Tape<T>::Id logits;
  std::optional<tc::Mat<T>> stage2_attn;
  if (cfg.variant == Variant::a) {
    typename tc::Tape<T>::Id pooled;
    if (n_triples > 0) {
      const auto k_h = tape.linear(tape.input(knowledge), p["kg_proj.w"],
                                   p["kg_proj.b"]);
      pooled = tape.mean_rows(k_h);
    } else {
      pooled = tape.input(tc::Mat<T>::zeros(1, cfg.hidden_dim));
    }
    const std::array<typename tc::Tape<T>::Id, 2> parts{fused, pooled};
    const auto cat = tape.concat_cols(parts);
    logits = tape.linear(cat, p["head.w"], p["head.b"]);
  } else {
    auto refined = fused;
    if (n_triples > 0) {
      const auto k_h = tape.linear(tape.input(knowledge), p["kg_proj.w"],
                                   p["kg_proj.b"]);
      tc::Mat<T> attn2;
      refined = fusion_block(tape, p, "stage2", fused, k_h, acfg, &attn2);
      stage2_attn = std::move(attn2);
    }
    // zero triples: stage 2 is a literal pass-through
    logits = tape.linear(refined, p["head.w"], p["head.b"]);
  }

  if (out) {
    out->logits = tape.val(logits);
    out->stage1_attention = std::move(stage1_attn);
    out->stage2_attention = std::move(stage2_attn);
  }
  return logits;
}

template <typename T>
ForwardOutput<T> forward(const ModelParams<T>& params, const tc::Mat<T>& image_vec,
                         const tc::Mat<T>& question_vec,
                         const tc::Mat<T>& knowledge) {
  tc::Tape<T> tape;
  ForwardOutput<T> out;
  forward_on_tape<T>(tape, params, nullptr, image_vec, question_vec, knowledge,
                     &out);
  return out;
}

template typename tc::Tape<float>::Id forward_on_tape<float>(
    tc::Tape<float>&, const ModelParams<float>&, std::vector<tc::Mat<float>>*,
    const tc::Mat<float>&, const tc::Mat<float>&, const tc::Mat<float>&,
    ForwardOutput<float>*);
template typename tc::Tape<double>::Id forward_on_tape<double>(
    tc::Tape<double>&, const ModelParams<double>&, std::vector<tc::Mat<double>>*,
    const tc::Mat<double>&, const tc::Mat<double>&, const tc::Mat<double>&,
    ForwardOutput<double>*);
template ForwardOutput<float> forward<float>(const ModelParams<float>&,
                                             const tc::Mat<float>&,
                                             const tc::Mat<float>&,
                                             const tc::Mat<float>&);
template ForwardOutput<double> forward<double>(const ModelParams<double>&,
                                               const tc::Mat<double>&,
                                               const tc::Mat<double>&,
                                               const tc::Mat<double>&);

namespace {

constexpr char kMagic[6] = {'K', 'L', 'I', 'T', 'E', '1'};

void put_u32_le(std::ostream& f, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff),
                         static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff),
                         static_cast<char>((v >> 24) & 0xff)};
  f.write(bytes, 4);
}

std::uint32_t get_u32_le(std::istream& f) {
  unsigned char bytes[4];
  f.read(reinterpret_cast<char*>(bytes), 4);
  if (!f) throw DataError("checkpoint truncated (header)");
  return static_cast<std::uint32_t>(bytes[0]) |
         (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) |
         (static_cast<std::uint32_t>(bytes[3]) << 24);
}

}  // namespace

void save_checkpoint(const ModelParams<float>& params, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint " + path);
  f.write(kMagic, sizeof(kMagic));
  const std::string cfg = params.cfg.to_json();
  put_u32_le(f, static_cast<std::uint32_t>(cfg.size()));
  f.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  for (const auto& t : params.tensors)
    for (const float v : t.value.a) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      put_u32_le(f, bits);
    }
  if (!f) throw DataError("write failed for checkpoint " + path);
}

ModelParams<float> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint " + path);
  char magic[6];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw DataError("bad checkpoint magic in " + path);
  const std::uint32_t len = get_u32_le(f);
  if (len > (1u << 20))
    throw DataError("checkpoint size mismatch: implausible config length in " + path);
  std::string cfg_text(len, '\0');
  f.read(cfg_text.data(), len);
  if (!f) throw DataError("checkpoint truncated (config) in " + path);
  const ModelConfig cfg = ModelConfig::from_json(cfg_text);

  ModelParams<float> params;
  params.cfg = cfg;
  for (const auto& [name, shape] : declared_tensors(cfg)) {
    tc::Mat<float> m(shape.first, shape.second);
    for (float& v : m.a) {
      unsigned char bytes[4];
      f.read(reinterpret_cast<char*>(bytes), 4);
      if (!f)
        throw DataError("checkpoint truncated (tensor '" + name + "') in " + path);
      const std::uint32_t bits = static_cast<std::uint32_t>(bytes[0]) |
                                 (static_cast<std::uint32_t>(bytes[1]) << 8) |
                                 (static_cast<std::uint32_t>(bytes[2]) << 16) |
                                 (static_cast<std::uint32_t>(bytes[3]) << 24);
      v = std::bit_cast<float>(bits);
    }
    params.tensors.push_back({name, std::move(m)});
  }
  f.peek();
  if (!f.eof())
    throw DataError("checkpoint size mismatch: trailing bytes in " + path);
  return params;
}

}  // namespace klite::model
