#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mifair/schema.hpp"

namespace mifair {

using Tokens = std::vector<std::size_t>;

struct ScoredPair {
  std::string id;
  Tokens generated;
  Tokens reference;
  std::vector<std::size_t> attributes;  // group index per schema attribute
  std::optional<std::vector<double>> latent;
  std::optional<std::vector<std::size_t>> labels;
};

struct BleuScore {
  double value = 0.0;
  bool empty_candidate = false;
  bool smoothed = false;  // some order had zero matches
};

// Modified n-gram precision, geometric mean over orders 1..n, brevity
// penalty. A zero precision becomes 1 / (2 * number of candidate n-grams);
// an order with no candidate n-grams uses 1/2, or 1 when the reference has
// none either.
BleuScore bleu_score(std::span<const std::size_t> candidate, std::span<const std::size_t> reference, std::size_t n);
double bleu_n(std::span<const std::size_t> candidate, std::span<const std::size_t> reference, std::size_t n);

std::size_t lcs_length(std::span<const std::size_t> a, std::span<const std::size_t> b);
// LCS F-measure with beta = 1.
double rouge_l(std::span<const std::size_t> candidate, std::span<const std::size_t> reference);

// Class predicted from a generation: the first token found in any class's
// lexicon entry, or nullopt.
std::optional<std::size_t> predicted_class(std::span<const std::size_t> generated,
                                           const std::vector<Tokens>& lexicon);
// 1 when the predicted class is in the pair's label set, else 0.
double diagnosis_correct(const ScoredPair& pair, const std::vector<Tokens>& lexicon);
double diagnosis_accuracy(std::span<const ScoredPair> pairs, const std::vector<Tokens>& lexicon);

enum class Metric { kBleu1, kBleu4, kRougeL, kDiagnosis };
std::string to_string(Metric m);
Metric metric_from_string(const std::string& s);

// Per-pair metric values in [0, 1]; the lexicon is needed for diagnosis only.
std::vector<double> pair_scores(std::span<const ScoredPair> pairs, Metric metric,
                                const std::vector<Tokens>& lexicon = {});

struct GroupScore {
  std::string group;
  double mean = 0.0;  // NaN for an empty group
  std::size_t count = 0;
  bool flagged = false;  // below the minimum count; left out of the gap
};

constexpr std::size_t kDefaultMinCount = 10;

// scores[i] belongs to group groups[i] of an attribute with group_names.
std::vector<GroupScore> group_scores(std::span<const double> scores, std::span<const std::size_t> groups,
                                     const std::vector<std::string>& group_names,
                                     std::size_t min_count = kDefaultMinCount);

// max - min over unflagged groups. Throws DataError for fewer than two.
double fairness_gap(std::span<const GroupScore> groups);

// M_all / (1 + gap); both in the same (percent) units.
double es_metric(double m_all, double gap);

enum class MAllMode { kSampleMean, kGroupMean };
std::string to_string(MAllMode m);
MAllMode m_all_mode_from_string(const std::string& s);

double m_all(std::span<const double> scores, std::span<const GroupScore> groups, MAllMode mode);

struct Interval {
  double lower = 0.0;
  double median = 0.0;
  double upper = 0.0;
};

// Linear-interpolation percentile (q in [0, 1]) of unsorted values.
double percentile(std::vector<double> values, double q);
Interval interval_of(const std::vector<double>& values);

struct BootstrapResult {
  std::vector<std::optional<Interval>> groups;  // nullopt when every resample left the group empty
  std::optional<Interval> gap;
  std::optional<Interval> es;
  std::size_t n_resamples = 0;
  std::size_t skipped = 0;  // resamples whose gap was undefined
  double skip_rate() const { return n_resamples ? static_cast<double>(skipped) / static_cast<double>(n_resamples) : 0.0; }
};

constexpr std::size_t kDefaultResamples = 1000;

// Percent-scale statistics (scores are multiplied by 100). Each resample
// draws N indices uniformly with replacement from one mt19937_64 stream.
// Groups unflagged on the full data must all be non-empty for a resample's
// gap and ES to count; otherwise the resample is skipped for those.
BootstrapResult bootstrap_ci(std::span<const double> scores, std::span<const std::size_t> groups,
                             const std::vector<std::string>& group_names, std::size_t n_resamples,
                             std::uint64_t seed, std::size_t min_count = kDefaultMinCount,
                             MAllMode mode = MAllMode::kSampleMean);

struct SliceGap {
  std::vector<std::size_t> key;  // control-attribute groups
  std::size_t count = 0;
  std::optional<double> gap;  // nullopt when fewer than two target groups qualify
};

struct CrossSectional {
  std::vector<SliceGap> slices;
  double aggregate = 0.0;  // count-weighted mean over valid slices
};

// attributes[i] holds every schema attribute's group for pair i.
CrossSectional cross_sectional_gaps(std::span<const double> scores,
                                    const std::vector<std::vector<std::size_t>>& attributes,
                                    const AttributeSchema& schema, std::size_t target,
                                    std::span<const std::size_t> controls, std::size_t min_count = kDefaultMinCount);

struct CounterfactualResult {
  double gap = 0.0;
  std::size_t matched = 0;
  std::size_t total = 0;
  std::vector<std::optional<std::size_t>> partner;  // per pair
  double unmatched_fraction() const {
    return total ? static_cast<double>(total - matched) / static_cast<double>(total) : 0.0;
  }
};

double cosine(std::span<const double> a, std::span<const double> b);

// Nearest cross-group neighbour with an identical label set and cosine
// similarity >= threshold (ties to the lower index). Throws DataError when
// nothing matches or a latent/label set is missing.
CounterfactualResult counterfactual_gap(std::span<const ScoredPair> pairs, std::span<const double> scores,
                                        std::size_t attribute, double threshold = 0.7);

nlohmann::json pair_to_json(const ScoredPair& p, const AttributeSchema& schema);
ScoredPair pair_from_json(const nlohmann::json& j, const AttributeSchema& schema);
void write_predictions(const std::filesystem::path& path, std::span<const ScoredPair> pairs,
                       const AttributeSchema& schema);
std::vector<ScoredPair> read_predictions(const std::filesystem::path& path, const AttributeSchema& schema);

struct ReportOptions {
  std::vector<Metric> metrics = {Metric::kBleu1, Metric::kBleu4, Metric::kRougeL, Metric::kDiagnosis};
  std::vector<std::string> attributes;  // empty: all
  std::size_t min_count = kDefaultMinCount;
  std::size_t n_resamples = kDefaultResamples;
  std::uint64_t seed = 0;
  MAllMode m_all_mode = MAllMode::kSampleMean;
  std::vector<Tokens> lexicon;
};

struct FairnessReport {
  std::string metric;
  std::string attribute;
  std::vector<GroupScore> groups;  // percent
  double m_all = 0.0;
  double gap = 0.0;  // NaN when fewer than two groups meet min_count
  double es = 0.0;
  std::optional<BootstrapResult> ci;
};

void to_json(nlohmann::json& j, const FairnessReport& r);

std::vector<FairnessReport> build_reports(std::span<const ScoredPair> pairs, const AttributeSchema& schema,
                                          const ReportOptions& options);
// Summary markdown: one row per metric, overall / gap / ES columns
// per attribute, then per-group tables.
std::string render_markdown(const std::vector<FairnessReport>& reports);

}  // namespace mifair
