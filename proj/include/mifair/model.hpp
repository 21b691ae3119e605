#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mifair/tape.hpp"

namespace mifair {

enum class PoolingMode { kFirst, kMid, kLast, kMeanOfThree, kCustom };
// Which sequence positions feed the per-layer mean: the feature and
// instruction prompt only, or every position including the teacher-forced
// target prefix, or just the last prompt position.
enum class PoolPositions { kPrompt, kAll, kLast };

std::string to_string(PoolingMode m);
std::string to_string(PoolPositions p);
PoolingMode pooling_mode_from_string(const std::string& s);
PoolPositions pool_positions_from_string(const std::string& s);

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 64;
  std::size_t max_seq = 48;
  std::size_t feature_dim = 16;
  std::size_t n_feature_tokens = 4;
  std::size_t lora_rank = 4;
  double lora_scale = 1.0;
  std::size_t mlp_ratio = 4;
  PoolingMode pooling_mode = PoolingMode::kMeanOfThree;
  // 1-based layer indices; used only when pooling_mode is custom.
  std::vector<std::size_t> tapped_layers;
  PoolPositions pool_positions = PoolPositions::kPrompt;
  std::uint64_t init_seed = 1234;

  void validate() const;
  // Resolved tapped-layer set K, sorted and de-duplicated.
  std::vector<std::size_t> tapped() const;
  std::size_t prompt_length() const;  // feature tokens + instruction
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Weight layout. Matrices follow the y = W x convention (W is d_out x d_in),
// applied to row-major activations as x W^T.
struct ModelState {
  ModelConfig config;
  std::vector<NamedTensor> frozen;
  std::vector<NamedTensor> projector;  // psi: weight (tokens*d_model x feature_dim), bias
  std::vector<NamedTensor> adapters;   // per layer: q_A, q_B, v_A, v_B, up_A, up_B
  std::vector<std::size_t> instruction;

  // Frozen indices.
  static constexpr std::size_t kTokEmb = 0;
  static constexpr std::size_t kPosEmb = 1;
  static constexpr std::size_t kPerLayer = 12;
  enum LayerSlot : std::size_t {
    kLn1Gain, kLn1Bias, kWq, kWk, kWv, kWo, kLn2Gain, kLn2Bias, kWUp, kBUp, kWDown, kBDown
  };
  static std::size_t layer_index(std::size_t layer, LayerSlot slot) { return 2 + layer * kPerLayer + slot; }
  std::size_t final_ln_gain() const { return 2 + config.n_layers * kPerLayer; }
  std::size_t final_ln_bias() const { return final_ln_gain() + 1; }
  std::size_t head() const { return final_ln_gain() + 2; }

  enum AdapterSlot : std::size_t { kQA, kQB, kVA, kVB, kUpA, kUpB };
  static constexpr std::size_t kAdaptersPerLayer = 6;
  static std::size_t adapter_index(std::size_t layer, AdapterSlot slot) { return layer * kAdaptersPerLayer + slot; }
};

// Random frozen backbone, random projector, adapters with A random and B = 0.
ModelState init_model(const ModelConfig& config);

// FNV-1a over the bit patterns of every frozen weight.
std::string frozen_checksum(const ModelState& state);

// Tape handles for every weight of a ModelState.
struct BoundModel {
  const ModelState* state = nullptr;
  Tape* tape = nullptr;
  std::vector<Var> frozen;
  std::vector<Var> projector;
  std::vector<Var> adapters;
};

struct Trainable {
  bool projector = true;
  bool adapters = true;
};

// Frozen weights become constants; trainable groups become leaves.
BoundModel bind(Tape& tape, const ModelState& state, Trainable trainable = {});

// One decoder input: a feature vector and the target prefix r_{<t}.
struct SequenceInput {
  std::span<const double> features;
  std::span<const std::size_t> prefix;
};

struct ForwardResult {
  // Every position of every sequence stacked row-wise (sum of T_i rows).
  Var logits;
  // Residual stream after each tapped layer's block, in tapped() order.
  std::vector<std::size_t> layers;
  std::vector<Var> hidden;
  std::vector<std::size_t> offsets;  // first row of each sequence
  std::vector<std::size_t> lengths;  // T_i
  std::size_t prompt_length = 0;

  // Rows holding the logits for target positions 0..|prefix| of sequence i.
  std::size_t target_begin(std::size_t i) const { return offsets[i] + prompt_length - 1; }
  std::size_t target_count(std::size_t i) const { return lengths[i] - prompt_length + 1; }
};

// psi(features) reshaped to n_feature_tokens x d_model rows.
Var project_features(const BoundModel& model, Var features_row);
// x W^T + scale * (x A^T) B^T.
Var adapted_matmul(Var x, Var w, Var a, Var b, double scale);

ForwardResult forward_decode(const BoundModel& model, std::span<const SequenceInput> batch);

struct LmLoss {
  Var total;           // sum over samples and target tokens of -log p
  Var per_sample_mean;  // total / batch size
  std::vector<double> per_sample;
  std::size_t tokens = 0;
};

// Teacher-forced cross entropy of reference + end-of-sequence. Optional
// per-sample multipliers (reweighting baseline) scale each sample's terms.
LmLoss lm_loss(const BoundModel& model, std::span<const SequenceInput> batch, const ForwardResult& fwd,
               std::span<const double> sample_weights = {});
// Convenience: builds inputs with prefix = reference and runs the forward.
struct TeacherForced {
  ForwardResult forward;
  LmLoss loss;
};
TeacherForced teacher_forced(const BoundModel& model, std::span<const std::vector<double>* const> features,
                             std::span<const std::vector<std::size_t>* const> references,
                             std::span<const double> sample_weights = {});

// h = (1/|K|) sum_{l in K} mean over pooled positions of layer l's states.
// `positions[i]` gives, per sequence, the row range [begin, end) to average.
struct PoolRange {
  std::size_t begin = 0;
  std::size_t end = 0;
};
Var pool_hidden(std::span<const Var> layer_states, std::span<const PoolRange> ranges);
std::vector<PoolRange> pool_ranges(const ModelConfig& config, const ForwardResult& fwd);
Var pooled(const BoundModel& model, const ForwardResult& fwd);

// Greedy decoding, ties to the lowest token id, stopping at end-of-sequence
// or after max_new tokens. Runs batched on an untracked tape.
std::vector<std::vector<std::size_t>> generate(const ModelState& state,
                                               std::span<const std::vector<double>* const> features,
                                               std::size_t max_new);
std::vector<std::size_t> generate_one(const ModelState& state, std::span<const double> features,
                                      std::size_t max_new);

// Argmax with ties to the lowest index.
std::size_t greedy_pick(std::span<const double> logits);

void to_json(nlohmann::json& j, const NamedTensor& t);
void from_json(const nlohmann::json& j, NamedTensor& t);
nlohmann::json model_to_json(const ModelState& state);
ModelState model_from_json(const nlohmann::json& j);

}  // namespace mifair
