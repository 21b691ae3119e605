#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "mifair/data.hpp"
#include "mifair/metrics.hpp"
#include "mifair/model.hpp"
#include "mifair/trainer.hpp"

namespace mifair {

// ---------------------------------------------------------------- gradient checks

struct GradCheckConfig {
  std::size_t n_configs = 10;
  std::uint64_t seed = 0;
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  std::size_t batch_size = 3;
};

void to_json(nlohmann::json& j, const GradCheckConfig& c);
void from_json(const nlohmann::json& j, GradCheckConfig& c);

struct TermCheck {
  std::string term;  // lm, dac, dim, total
  std::string wrt;   // theta+psi, phi, all
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

struct GradCheckCase {
  std::uint64_t seed = 0;
  std::vector<TermCheck> terms;
  // Exact zeros required by the stop-gradients.
  bool dim_phi_zero = false;
  bool dac_model_zero = false;
};

struct GradCheckReport {
  double tolerance = 1e-4;
  std::vector<GradCheckCase> cases;

  double max_rel_error() const;
  double max_rel_error(const std::string& term) const;
  bool stop_gradients_hold() const;
  bool passed() const;
};

void to_json(nlohmann::json& j, const GradCheckReport& r);

// Small random decoders (two layers, width 8) with random adapters, heads
// and loss weights; every loss term against central differences.
GradCheckReport run_grad_check_suite(const GradCheckConfig& config);

// ---------------------------------------------------------------- MI oracle

struct MiOracleConfig {
  std::size_t n_joints = 100;
  std::size_t max_cells = 8;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const MiOracleConfig& c);
void from_json(const nlohmann::json& j, MiOracleConfig& c);

struct MiOracleRow {
  std::size_t cells = 0;
  std::size_t groups = 0;
  double mi = 0.0;
  double bound = 0.0;
};

struct MiOracleReport {
  std::vector<MiOracleRow> rows;  // the 2x2 example first
  double min_slack = 0.0;         // min over rows of bound - mi
  bool passed(double tolerance = 1e-12) const { return min_slack >= -tolerance; }
};

void to_json(nlohmann::json& j, const MiOracleReport& r);

// Random joints with up to max_cells h-cells and groups, q the exact
// conditional.
MiOracleReport run_mi_oracle(const MiOracleConfig& config);

// ---------------------------------------------------------------- benchmark

struct BenchmarkConfig {
  SynthConfig data;
  ModelConfig model;
  TrainConfig train;
  double train_fraction = 0.8;
  std::string target_attribute = "gender";
  ProbeConfig probe;
  // 0: as many tokens as max_seq allows.
  std::size_t max_new = 0;
};

// Derived seeds for one benchmark repetition: data, split, model init and
// training all follow `seed`.
BenchmarkConfig with_seed(BenchmarkConfig config, std::uint64_t seed);

struct BenchmarkResult {
  std::uint64_t seed = 0;
  double bleu1 = 0.0;  // sample mean over the test split
  double target_gap = 0.0;
  std::vector<GroupScore> target_groups;
  std::vector<ProbeResult> probes;
  bool checksum_unchanged = false;
  double seconds = 0.0;

  const ProbeResult& probe(const std::string& attribute) const;
};

void to_json(nlohmann::json& j, const BenchmarkResult& r);

BenchmarkResult run_benchmark(const BenchmarkConfig& config);

// The benchmark arms. Baseline: lambda_dim = lambda_dac = 0. Fair: both 1,
// joint schedule. Frozen: both 1, DAC pretraining then frozen heads.
BenchmarkConfig benchmark_baseline();
BenchmarkConfig benchmark_fair();
BenchmarkConfig benchmark_frozen();

double median(std::vector<double> values);

}  // namespace mifair
