#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mifair/data.hpp"
#include "mifair/fairness.hpp"
#include "mifair/metrics.hpp"
#include "mifair/model.hpp"

namespace mifair {

enum class Schedule { kJoint, kPretrainDacThenFreeze };
enum class Baseline { kNone, kReweight, kResample };
enum class OptimizerKind { kAdam, kSgd };

std::string to_string(Schedule s);
std::string to_string(Baseline b);
std::string to_string(OptimizerKind o);
Schedule schedule_from_string(const std::string& s);
Baseline baseline_from_string(const std::string& s);
OptimizerKind optimizer_from_string(const std::string& s);

struct TrainConfig {
  std::size_t epochs = 12;
  std::size_t batch_size = 32;
  double learning_rate = 1e-2;
  // DAC heads; unset means learning_rate.
  std::optional<double> dac_learning_rate;
  // Head updates per minibatch in the joint schedule.
  std::size_t dac_steps = 5;
  // Model objective uses max(L_DIM, 0) per attribute.
  bool clip_dim = true;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  std::uint64_t seed = 0;
  Schedule schedule = Schedule::kJoint;
  std::size_t dac_pretrain_epochs = 3;
  // Language-model-only warm start of the projector before the main loop.
  std::size_t stage1_epochs = 1;
  Baseline baseline = Baseline::kNone;
  // Attributes the baseline balances; resampling uses the first one.
  std::vector<std::string> baseline_attributes = {"gender"};
  std::size_t dac_hidden = 32;
  LossWeights loss;
  std::string checkpoint_path;
  std::string log_path;

  // Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Adam (0.9, 0.999, 1e-8) or plain SGD over a fixed list of tensors.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate) : kind_(kind), lr_(learning_rate) {}
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads);
  std::size_t steps() const { return t_; }

 private:
  OptimizerKind kind_;
  double lr_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

enum class Phase { kStage1, kDacPretrain, kJoint, kFrozenDac };
std::string to_string(Phase p);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  Phase phase = Phase::kJoint;
  std::size_t batch = 0;
  double lm = 0.0;
  std::vector<double> dac;  // per attribute, unweighted
  std::vector<double> dim;
  double grad_norm_model = 0.0;
  double grad_norm_dac = 0.0;
  bool aborted = false;
  std::string diagnostic;
};

struct EpochRecord {
  std::size_t epoch = 0;
  Phase phase = Phase::kJoint;
  std::size_t steps = 0;
  std::size_t aborted = 0;
  double lm = 0.0;
  std::vector<double> dac;
  std::vector<double> dim;
  std::optional<double> eval_lm;  // held-out teacher-forced loss per sample
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::string checksum_before;
  std::string checksum_after;
};

void to_json(nlohmann::json& j, const StepRecord& r);
void to_json(nlohmann::json& j, const EpochRecord& r);
void write_log_jsonl(const std::filesystem::path& path, const TrainLog& log);

// Everything one optimizer step needs besides the parameters.
struct StepContext {
  const AttributeSchema* schema = nullptr;
  const LossWeights* weights = nullptr;
  // Per attribute, class weights for L_DAC.
  const std::vector<std::vector<double>>* class_weight = nullptr;
};

// Stateful two-phase stepper: the DAC heads are updated first with the
// pooled states detached, then the projector and adapters with the heads
// frozen. The frozen backbone is never written.
class Trainer {
 public:
  Trainer(const TrainConfig& config, StepContext context);

  // Joint step (both phases). Frozen-DAC runs only the model phase,
  // DAC pretraining only the head phase, stage 1 the language-model loss
  // on the projector.
  StepRecord step(ModelState& state, DacSet& dac, std::span<const Sample* const> batch, Phase phase,
                  std::span<const double> sample_weights = {});

 private:
  void run_step(StepRecord& rec, ModelState& state, DacSet& dac, std::span<const Sample* const> batch, Phase phase,
                std::span<const double> sample_weights);

  TrainConfig config_;
  StepContext ctx_;
  Optimizer model_opt_;
  Optimizer dac_opt_;
  Optimizer stage1_opt_;
  std::size_t steps_ = 0;
};

struct TrainResult {
  ModelState state;
  DacSet dac;
  TrainLog log;
};

// Runs stage 1, then the configured schedule. `eval`, when given, adds a
// held-out loss to every epoch record.
TrainResult train_run(const TrainConfig& config, ModelState initial, const Dataset& train,
                      const Dataset* eval = nullptr);

// Throws DataError/ConfigError when the dataset cannot feed the model.
void check_dataset(const Dataset& dataset, const ModelConfig& model);

// Per-sample multipliers prod_a N / (|Z_a| count(group)), normalized to
// mean 1. Throws ConfigError for unknown attributes, DataError for empty
// groups.
std::vector<double> reweight_factors(const Dataset& dataset, std::span<const std::string> attributes);

// N indices drawn with replacement, uniform within each group, with group
// counts equal up to one.
std::vector<std::size_t> resample_indices(const Dataset& dataset, const std::string& attribute, std::uint64_t seed);

// Pooled states of every sample under the current model (no gradients).
Tensor pooled_states(const ModelState& state, const Dataset& dataset, std::size_t batch_size = 64);

struct ProbeConfig {
  std::size_t hidden = 32;
  std::size_t steps = 300;
  double learning_rate = 1e-2;
  // Fraction of the probe's training split used to select the best step.
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  std::string attribute;
  double accuracy = 0.0;  // held out
  double chance = 0.0;    // 1 / |Z_a|
  double majority = 0.0;  // held-out rate of the training majority class
};

// Fresh probe per attribute on standardized states of the train split,
// scored on the test split. Throws DataError when a split holds one class.
std::vector<ProbeResult> probe_states(const Tensor& train_h, const std::vector<std::vector<std::size_t>>& train_labels,
                                      const Tensor& test_h, const std::vector<std::vector<std::size_t>>& test_labels,
                                      const AttributeSchema& schema, const ProbeConfig& config);
std::vector<ProbeResult> probe_leakage(const ModelState& state, const Dataset& train, const Dataset& test,
                                       const ProbeConfig& config);

// labels[a][i] for every schema attribute.
std::vector<std::vector<std::size_t>> attribute_labels(const Dataset& dataset);

// Greedy generations for every sample, in dataset order. Latents are the
// pooled states when requested.
std::vector<ScoredPair> predict(const ModelState& state, const Dataset& dataset, std::size_t max_new,
                                bool with_latent = true, std::size_t batch_size = 64);

// Versioned JSON container: model, DAC heads, training seed.
nlohmann::json checkpoint_to_json(const ModelState& state, const DacSet& dac, std::uint64_t seed);
struct Checkpoint {
  ModelState state;
  DacSet dac;
  std::uint64_t seed = 0;
};
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const std::filesystem::path& path, const ModelState& state, const DacSet& dac,
                     std::uint64_t seed);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mifair
