#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "v2pe/posembed.hpp"
#include "v2pe/posindex.hpp"
#include "v2pe/tokenstream.hpp"

namespace v2pe {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ModelConfig {
  int layers = 2;
  int heads = 4;
  int head_dim = 16;
  int vocab_size = 64;
  int mlp_hidden = 0;  // 0 means 4 * width
  std::uint64_t max_trained_window = 512;
  RopeConfig rope{};
  std::uint64_t seed = 0;
  double norm_eps = 1e-6;

  int width() const noexcept { return heads * head_dim; }
  int hidden() const noexcept { return mlp_hidden > 0 ? mlp_hidden : 4 * width(); }
  // Throws ConfigError on non-positive sizes, odd head_dim or a rope head_dim
  // that disagrees with head_dim.
  void validate() const;
};

nlohmann::json to_json(const RopeConfig& rope);
RopeConfig rope_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct TensorSpec {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::size_t offset = 0;

  std::size_t size() const noexcept { return static_cast<std::size_t>(rows * cols); }
};

// Parameter layout shared by a model and its gradients. Tensor order:
// embed, then per layer {norm1, wq, wk, wv, wo, norm2, w1, w2}, then norm_f, head.
// Linear maps are stored (in x out) and applied as X * W.
class ParamLayout {
 public:
  static constexpr int kPerLayer = 8;
  enum Slot { kNorm1, kWq, kWk, kWv, kWo, kNorm2, kW1, kW2 };

  explicit ParamLayout(const ModelConfig& cfg);

  const std::vector<TensorSpec>& tensors() const noexcept { return tensors_; }
  std::size_t total() const noexcept { return total_; }
  std::size_t embed() const noexcept { return 0; }
  std::size_t layer(int l, Slot s) const noexcept { return 1 + kPerLayer * l + s; }
  std::size_t norm_f() const noexcept { return tensors_.size() - 2; }
  std::size_t head() const noexcept { return tensors_.size() - 1; }

 private:
  std::vector<TensorSpec> tensors_;
  std::size_t total_ = 0;
};

// Flat parameter (or gradient) storage with typed views into each tensor.
template <typename T>
class ParamBuffer {
 public:
  using Map = Eigen::Map<RowMatrix<T>>;
  using ConstMap = Eigen::Map<const RowMatrix<T>>;

  explicit ParamBuffer(const ParamLayout& layout)
      : layout_(layout), data_(layout.total(), T(0)) {}

  const ParamLayout& layout() const noexcept { return layout_; }
  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }

  Map operator[](std::size_t i) {
    const auto& s = layout_.tensors()[i];
    return Map(data_.data() + s.offset, s.rows, s.cols);
  }
  ConstMap operator[](std::size_t i) const {
    const auto& s = layout_.tensors()[i];
    return ConstMap(data_.data() + s.offset, s.rows, s.cols);
  }
  void zero() { std::fill(data_.begin(), data_.end(), T(0)); }

 private:
  ParamLayout layout_;
  std::vector<T> data_;
};

// Decoder-only transformer: pre-norm (RMSNorm) blocks, causal multi-head
// attention with rotary embeddings at caller-supplied real positions, a GELU
// MLP and an untied output head. Textual and visual symbols share one
// embedding table. Parameters are deterministic in (config, seed).
template <typename T>
class TinyModel {
 public:
  explicit TinyModel(const ModelConfig& cfg);

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamBuffer<T>& params() noexcept { return params_; }
  const ParamBuffer<T>& params() const noexcept { return params_; }

  template <typename U>
  TinyModel<U> cast() const {
    TinyModel<U> out(cfg_);
    auto src = params_.flat();
    auto dst = out.params().flat();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<U>(src[i]);
    return out;
  }

  friend bool operator==(const TinyModel& a, const TinyModel& b) {
    return std::equal(a.params_.flat().begin(), a.params_.flat().end(), b.params_.flat().begin(),
                      b.params_.flat().end());
  }

 private:
  ModelConfig cfg_;
  ParamBuffer<T> params_;
};

using Model = TinyModel<float>;

// Input embeddings (N x width) for the stream's symbols.
template <typename T>
RowMatrix<T> embed_tokens(const TinyModel<T>& model, const TokenStream& stream);

// Full logits, one row per token (row i predicts token i + 1).
template <typename T>
RowMatrix<T> forward(const TinyModel<T>& model, const TokenStream& stream,
                     const PositionSequence& positions);

// Logits for selected rows only; the last layer and the head are evaluated on
// those rows alone. `rope` overrides the model's rotary configuration (used
// by evaluation sweeps for interpolation / NTK scaling).
template <typename T>
RowMatrix<T> logits_at(const TinyModel<T>& model, const TokenStream& stream,
                       const PositionSequence& positions, std::span<const Eigen::Index> rows,
                       const RopeConfig* rope = nullptr);

// Same as logits_at but starting from explicit input embeddings (N x width),
// as produced by compress_visual_tokens.
template <typename T>
RowMatrix<T> logits_from_embeddings(const TinyModel<T>& model, const RowMatrix<T>& embeddings,
                                    const PositionSequence& positions,
                                    std::span<const Eigen::Index> rows,
                                    const RopeConfig* rope = nullptr);

// One supervised sequence. Each target is a token index t >= 1 whose symbol is
// predicted from the logits at row t - 1.
struct TrainingExample {
  TokenStream stream;
  PositionSequence positions;
  std::vector<std::size_t> targets;
};

template <typename T>
struct LossAndGrads {
  double loss = 0.0;
  ParamBuffer<T> grads;
};

// Mean cross-entropy over every target of every example, and its gradient with
// respect to every parameter. Throws ConfigError when there are no targets,
// RangeError for a target outside [1, N), ShapeError for |positions| != N.
template <typename T>
LossAndGrads<T> loss_and_grads(const TinyModel<T>& model,
                               std::span<const TrainingExample> batch);

template <typename T>
double loss_only(const TinyModel<T>& model, std::span<const TrainingExample> batch);

// Attention probabilities of `layer` for the last `tail_rows` query rows,
// max-reduced over heads (tail_rows x N). Throws RangeError when the layer or
// tail_rows is out of range.
template <typename T>
RowMatrix<T> dump_attention(const TinyModel<T>& model, const TokenStream& stream,
                            const PositionSequence& positions, int layer, std::size_t tail_rows,
                            const RopeConfig* rope = nullptr);

// Per-head probabilities before the max-reduction: heads x (tail_rows x N).
template <typename T>
std::vector<RowMatrix<T>> attention_probs(const TinyModel<T>& model, const TokenStream& stream,
                                          const PositionSequence& positions, int layer,
                                          std::size_t tail_rows, const RopeConfig* rope = nullptr);

// ---------------------------------------------------------------------------
// Token compression baseline.

struct CompressedInput {
  TokenStream stream;
  RowMatrix<float> embeddings;
};

// Mean-pools each image's embedding run in consecutive groups of 1/ratio
// tokens (the ragged tail forms a smaller group). Pooled tokens keep the
// symbol of the group's first token; textual tokens are untouched.
CompressedInput compress_visual_tokens(const TokenStream& stream,
                                       const RowMatrix<float>& embeddings, const Dyadic& ratio);

// ---------------------------------------------------------------------------
// Training.

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  std::size_t warmup_steps = 100;
  bool cosine_decay = false;  // decay to min_lr_ratio * lr over the run
  double min_lr_ratio = 0.1;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
};

class AdamW {
 public:
  AdamW(const ParamLayout& layout, AdamConfig cfg);
  void step(ParamBuffer<float>& params, const ParamBuffer<float>& grads, double lr_scale = 1.0);
  std::size_t steps_taken() const noexcept { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<float> m_;
  std::vector<float> v_;
  std::size_t t_ = 0;
};

// Supplies unpositioned training sequences; positions come from the policy.
struct TrainingSequence {
  TokenStream stream;
  std::vector<std::size_t> targets;
};

class TrainingSource {
 public:
  virtual ~TrainingSource() = default;
  // Deterministic in (step, its own seed). Must return at least one sequence.
  virtual std::vector<TrainingSequence> batch(std::size_t step) = 0;
};

struct TrainConfig {
  std::size_t steps = 1000;
  AdamConfig adam{};
  std::uint64_t seed = 0;  // drives per-sequence delta draws
  std::size_t log_every = 0;  // 0: no progress output
};

struct TrainLogEntry {
  std::size_t step = 0;
  double loss = 0.0;
  std::map<Dyadic, std::size_t> sampled_deltas;  // image-delta histogram of the batch
};

struct TrainResult {
  Model model;
  std::vector<TrainLogEntry> log;
};

// Trains a freshly initialised model. For VARIABLE policies every sequence
// draws its own per-image deltas (seed derived from train seed, step, index).
// Throws TrainingError on a non-finite loss.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  TrainingSource& source, const DeltaPolicy& policy,
                  const std::function<void(const TrainLogEntry&)>& on_log = {});

// Continues training an existing model in place.
std::vector<TrainLogEntry> train_in_place(Model& model, const TrainConfig& train_cfg,
                                          TrainingSource& source, const DeltaPolicy& policy,
                                          const std::function<void(const TrainLogEntry&)>& on_log = {});

// ---------------------------------------------------------------------------
// Checkpoints: "V2PECKPT" magic, u32 format version, u64 header length, JSON
// header (config + tensor table), then little-endian float32 parameters.

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

void write_attention_csv(const RowMatrix<float>& attn, const std::filesystem::path& path);

}  // namespace v2pe
