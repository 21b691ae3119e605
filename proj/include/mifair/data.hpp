#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mifair/schema.hpp"

namespace mifair {

// Token ids shared by the generator, the model and the metrics.
//   0 pad, 1 end-of-sequence, [2, 2 + n_instruction) instruction,
//   then three shared template tokens, then three tokens per finding.
struct TokenLayout {
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kEos = 1;
  static constexpr std::size_t kInstructionBegin = 2;
  static constexpr std::size_t kInstructionLength = 4;
  static constexpr std::size_t kTemplateLength = 6;

  std::size_t n_findings = 4;

  std::vector<std::size_t> instruction() const;
  std::size_t shared_token(std::size_t slot) const;  // slot in {0, 1, 2}
  std::size_t finding_token(std::size_t finding, std::size_t slot) const;
  // [open, f0, f1, mid, f2, close] for the finding.
  std::vector<std::size_t> standard_template(std::size_t finding) const;
  std::size_t vocab_needed() const;
  // Diagnosis lexicon: the finding tokens of each class.
  std::vector<std::vector<std::size_t>> lexicon() const;
};

struct Sample {
  std::string id;
  std::vector<double> features;
  std::vector<std::size_t> attributes;  // group index per schema attribute
  std::vector<std::size_t> reference;   // without the end-of-sequence token
  std::vector<std::size_t> labels;      // task label set (finding classes)
  std::string split;                    // "train", "test" or empty
};

struct Dataset {
  AttributeSchema schema;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  // Copy of the schema with group counts recomputed from the samples.
  AttributeSchema counted_schema() const;
  Dataset subset(const std::vector<std::size_t>& indices) const;
  Dataset with_split(const std::string& tag) const;
};

struct SynthConfig {
  std::size_t n_samples = 4000;
  AttributeSchema schema = AttributeSchema::default_schema();
  std::vector<std::vector<double>> marginals = {{0.5, 0.5}, {0.3, 0.4, 0.3}, {0.55, 0.2, 0.1, 0.1, 0.05}};
  std::size_t n_findings = 4;
  std::size_t feature_dim = 16;
  std::vector<double> leakage = {0.8, 0.8, 0.8};        // beta per attribute
  std::vector<double> phrasing_bias = {0.5, 0.5, 0.5};  // gamma per attribute
  double noise = 0.3;                                   // sigma
  std::uint64_t seed = 0;

  // Throws ConfigError on inconsistent sizes, marginals that do not sum to
  // one, or beta/gamma outside [0, 1].
  void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
// Strict: unknown keys are rejected with ConfigError.
void from_json(const nlohmann::json& j, SynthConfig& c);

// Stable FNV-1a hash of the canonical JSON form of the config.
std::string config_hash(const SynthConfig& config);

// Fixed random projections of one synthetic configuration: one unit row per
// finding followed by one unit row per (attribute, group), all orthonormal.
struct FeatureProjections {
  std::vector<std::vector<double>> finding_rows;
  std::vector<std::vector<std::vector<double>>> group_rows;  // [attribute][group]
  // Group-specific reorderings of the template; identity for group 0.
  std::vector<std::vector<std::vector<std::size_t>>> variants;  // [attribute][group]
};

FeatureProjections make_projections(const SynthConfig& config);

// Probability that a sample of (attribute, group) takes its group-specific
// phrasing variant. Group 0 keeps the standard phrasing.
double variant_probability(const SynthConfig& config, std::size_t attribute, std::size_t group);

struct DatasetManifest {
  AttributeSchema schema;  // with counts
  std::size_t n_samples = 0;
  std::size_t n_findings = 0;
  std::vector<std::vector<std::vector<std::size_t>>> cell_counts;  // [attribute][group][finding]
  std::string config_hash;
  std::optional<std::vector<double>> true_mi;  // nats per attribute, noiseless configs only
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

DatasetManifest build_manifest(const Dataset& dataset, std::size_t n_findings, std::string hash,
                               std::optional<std::vector<double>> true_mi);

struct SynthResult {
  Dataset dataset;
  DatasetManifest manifest;
};

SynthResult synth_generate(const SynthConfig& config);

// Exact I(a; x) in nats for every attribute, by enumerating the generator's
// joint distribution. Requires noise == 0.
std::vector<double> true_mi_oracle(const SynthConfig& config);

struct IngestResult {
  Dataset dataset;
  std::size_t dropped = 0;  // records missing a schema attribute
};

// Reads a line-delimited JSON dataset, validating every record against the
// schema. Missing-attribute records are dropped and counted.
IngestResult ingest_jsonl(const std::filesystem::path& path, const AttributeSchema& schema,
                          std::size_t vocab_size);

void write_jsonl(const std::filesystem::path& path, const Dataset& dataset);
nlohmann::json sample_to_json(const Sample& s, const AttributeSchema& schema);

struct SplitResult {
  Dataset train;
  Dataset test;
};

// Stratified by the joint attribute cell. Samples are ordered by cell and a
// seeded shuffle within each cell, then assigned systematically so every
// cell (and every contiguous run of cells) lands within one sample of the
// requested fraction.
SplitResult split(const Dataset& dataset, double train_fraction, std::uint64_t seed);

}  // namespace mifair
