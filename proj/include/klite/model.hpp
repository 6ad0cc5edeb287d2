#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "klite/tensor.hpp"

// Model A (concatenation fusion) and Model B (two-stage cascaded attention)
// over frozen image/question/knowledge features, with analytic parameter
// counting and a bit-exact checkpoint format.
namespace klite::model {

enum class Variant : std::uint8_t { a, b };

std::string_view variant_name(Variant v);
Variant variant_from_name(std::string_view s);

struct ModelConfig {
  Variant variant = Variant::b;
  std::size_t image_dim = 512;
  std::size_t question_dim = 512;
  std::size_t knowledge_dim = 300;
  std::size_t hidden_dim = 128;
  std::size_t num_heads = 8;
  std::size_t answer_vocab_size = 26;
  std::size_t max_triples = 5;

  // inner width of each block's 2-layer MLP; fixed at hidden/2 so the
  // shipped presets land on their parameter budgets
  std::size_t mlp_dim() const { return hidden_dim / 2; }

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

// one fusion block: attention -> residual -> LN -> MLP(ReLU) -> residual -> LN
struct BlockNames {
  std::string prefix;
};

template <typename T>
struct NamedTensor {
  std::string name;
  tc::Mat<T> value;
};

template <typename T>
struct ModelParams {
  ModelConfig cfg;
  std::vector<NamedTensor<T>> tensors;  // fixed declared order

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);
  std::size_t scalar_count() const;
  const tc::Mat<T>* find(std::string_view name) const;
  tc::Mat<T>* find(std::string_view name);
};

// exact count of trainable scalars for a config
std::size_t param_count(const ModelConfig& cfg);

// declared tensor (name, rows, cols) list; checkpoint order contract
std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>>
declared_tensors(const ModelConfig& cfg);

template <typename T>
struct ForwardOutput {
  tc::Mat<T> logits;                           // [1, vocab]
  tc::Mat<T> stage1_attention;                 // [1, nq], head-averaged
  std::optional<tc::Mat<T>> stage2_attention;  // [1, n_triples], Model B only
};

// Forward pass on an existing tape. grads, when non-null, must be aligned
// with params.tensors; bound parameters then accumulate gradients on
// backward(). Returns the logits node id and fills out.
template <typename T>
typename tc::Tape<T>::Id forward_on_tape(tc::Tape<T>& tape,
                                         const ModelParams<T>& params,
                                         std::vector<tc::Mat<T>>* grads,
                                         const tc::Mat<T>& image_vec,
                                         const tc::Mat<T>& question_vec,
                                         const tc::Mat<T>& knowledge,
                                         ForwardOutput<T>* out);

// inference convenience: fresh tape, no gradients
template <typename T>
ForwardOutput<T> forward(const ModelParams<T>& params, const tc::Mat<T>& image_vec,
                         const tc::Mat<T>& question_vec,
                         const tc::Mat<T>& knowledge);

// Checkpoint: magic "KLITE1", u32-LE length-prefixed config JSON, then every
// tensor as little-endian f32 in declared order.
void save_checkpoint(const ModelParams<float>& params, const std::string& path);
ModelParams<float> load_checkpoint(const std::string& path);

extern template struct ModelParams<float>;
extern template struct ModelParams<double>;

}  // namespace klite::model
