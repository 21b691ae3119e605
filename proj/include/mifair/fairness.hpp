#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mifair/model.hpp"
#include "mifair/schema.hpp"
#include "mifair/tape.hpp"

namespace mifair {

// Per-attribute variational classifier phi_a: d_model -> hidden -> |Z_a|,
// GELU between the layers.
struct DacHead {
  std::string attribute;
  Tensor w1;  // hidden x d_model
  Tensor b1;  // 1 x hidden
  Tensor w2;  // groups x hidden
  Tensor b2;  // 1 x groups
  // Input standardization (x - mean) * inv_std from running statistics of
  // the detached pooled states. Empty means identity. Never trained by
  // gradient, so it is a constant wherever the head is evaluated.
  Tensor norm_mean;     // 1 x d_model
  Tensor norm_inv_std;  // 1 x d_model
  std::size_t norm_updates = 0;

  std::size_t groups() const { return w2.rows(); }
};

struct DacSet {
  std::vector<DacHead> heads;  // schema order
};

DacSet init_dac(const AttributeSchema& schema, std::size_t d_model, std::size_t hidden, std::uint64_t seed);

struct BoundHead {
  Var w1, b1, w2, b2;
  // Constants; unset (null tape) when the head has no statistics.
  Var shift;  // -mean, 1 x d
  Var diag;   // diag(inv_std), d x d
};

// Running-statistics update from a batch of detached pooled states: the
// first call copies the batch moments, later calls blend with momentum.
void update_dac_statistics(DacHead& head, const Tensor& h, double momentum = 0.9);

// trainable == false binds every weight as a constant. Statistics are
// always constants.
std::vector<BoundHead> bind_dac(Tape& tape, const DacSet& dac, bool trainable);

// Softmax-input logits for a batch of pooled states (B x d_model).
Var dac_logits(const BoundHead& head, Var h);
// Probabilities floored at kLogFloor (untracked, for reporting and tests).
Tensor dac_forward(const DacHead& head, const Tensor& h);

// 1/frequency per class, normalized to mean 1 over classes. Throws
// ConfigError when a class has no members.
std::vector<double> class_weights(std::span<const std::size_t> counts);

// -(1/B) sum_i w[a_i] log phi(a_i | h_i). h is detached inside, so the loss
// never reaches the model parameters.
Var dac_loss(const BoundHead& head, Var h, std::span<const std::size_t> labels, std::span<const double> weights);

// The batch CLUB estimate from a B x |Z| matrix of log phi(a | h_j):
// (1/B) sum_i log phi(a_i|h_i) - 1/(B(B-1)) sum_{i != j} log phi(a_i|h_j).
Var club_batch_estimate(Var log_probs, std::span<const std::size_t> labels);
// club_batch_estimate over the head's log-probabilities. The head weights
// are detached inside, so gradients reach h only.
Var dim_loss(const BoundHead& head, Var h, std::span<const std::size_t> labels);

// Exact CLUB value for a finite joint p(h-cell, a) (rows: h-cells) and a
// conditional q(a | h-cell) with rows summing to one. Logs of q are floored
// at kLogFloor; q == 0 where the joint has mass is an error.
double club_bound_exact(const Tensor& joint, const Tensor& q);
double exact_mi(const Tensor& joint);
// Rows of the joint normalized to p(a | h-cell); empty rows become uniform.
Tensor exact_conditional(const Tensor& joint);

struct LossWeights {
  double lambda_lm = 1.0;
  double lambda_dim = 0.0;
  double lambda_dac = 0.0;
  // w_a by attribute name; attributes not listed get 1.
  std::map<std::string, double> attribute;

  void validate() const;
  double weight(const std::string& name) const;
  bool fairness_active() const { return lambda_dim > 0.0 || lambda_dac > 0.0; }
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

struct LossBreakdown {
  double total = 0.0;
  double lm = 0.0;
  std::vector<double> dim;  // per attribute, unweighted
  std::vector<double> dac;
};

// One batch's loss terms on a single tape.
struct TotalLoss {
  Var total;           // lambda_lm L_LM + lambda_dim sum w_a L_DIM + lambda_dac sum w_a L_DAC
  Var model_objective;  // lambda_lm L_LM + lambda_dim sum w_a L_DIM (theta/psi step)
  Var dac_objective;    // lambda_dac sum w_a L_DAC (phi step)
  LossBreakdown breakdown;
};

// lambda_dac * sum_a w_a L_DAC^(a); fills breakdown->dac when given.
Var weighted_dac(std::span<const BoundHead> heads, Var h, const std::vector<std::vector<std::size_t>>& labels,
                 const std::vector<std::vector<double>>& class_weight, const AttributeSchema& schema,
                 const LossWeights& weights, LossBreakdown* breakdown = nullptr);
// lambda_dim * sum_a w_a L_DIM^(a); fills breakdown->dim (unclipped) when
// given. clip_negative replaces each term by max(term, 0).
Var weighted_dim(std::span<const BoundHead> heads, Var h, const std::vector<std::vector<std::size_t>>& labels,
                 const AttributeSchema& schema, const LossWeights& weights, LossBreakdown* breakdown = nullptr,
                 bool clip_negative = false);

// labels[a][i]: group of sample i for attribute a. `lm` is the batch-mean
// per-sample LM loss. `heads` may be empty when both fairness lambdas are 0.
TotalLoss total_loss(Var lm, Var h, std::span<const BoundHead> heads,
                     const std::vector<std::vector<std::size_t>>& labels,
                     const std::vector<std::vector<double>>& class_weight, const AttributeSchema& schema,
                     const LossWeights& weights);

void to_json(nlohmann::json& j, const DacHead& h);
void from_json(const nlohmann::json& j, DacHead& h);
void to_json(nlohmann::json& j, const DacSet& d);
void from_json(const nlohmann::json& j, DacSet& d);

}  // namespace mifair
