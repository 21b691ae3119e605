#include "mifair/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <random>
#include <sstream>

#include "mifair/error.hpp"

namespace mifair {

// ---------------------------------------------------------------- text metrics

namespace {

std::map<Tokens, std::size_t> ngram_counts(std::span<const std::size_t> s, std::size_t k) {
  std::map<Tokens, std::size_t> out;
  if (s.size() < k) return out;
  for (std::size_t i = 0; i + k <= s.size(); ++i) ++out[Tokens(s.begin() + i, s.begin() + i + k)];
  return out;
}

}  // namespace

BleuScore bleu_score(std::span<const std::size_t> candidate, std::span<const std::size_t> reference, std::size_t n) {
  if (n < 1 || n > 4) throw ConfigError("bleu: order must lie in 1..4");
  BleuScore out;
  if (candidate.empty()) {
    out.empty_candidate = true;
    return out;
  }
  double log_sum = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    const auto cand = ngram_counts(candidate, k);
    const auto ref = ngram_counts(reference, k);
    const std::size_t total = candidate.size() >= k ? candidate.size() - k + 1 : 0;
    std::size_t matched = 0;
    for (const auto& [gram, c] : cand) {
      auto it = ref.find(gram);
      if (it != ref.end()) matched += std::min(c, it->second);
    }
    double p;
    const std::size_t ref_total = reference.size() >= k ? reference.size() - k + 1 : 0;
    if (total == 0 && ref_total == 0) {
      p = 1.0;  // neither side has grams of this order
    } else if (matched > 0) {
      p = static_cast<double>(matched) / static_cast<double>(total);
    } else {
      out.smoothed = true;
      p = 1.0 / (2.0 * static_cast<double>(std::max<std::size_t>(total, 1)));
    }
    log_sum += std::log(p);
  }
  double value = std::exp(log_sum / static_cast<double>(n));
  if (candidate.size() < reference.size()) {
    value *= std::exp(1.0 - static_cast<double>(reference.size()) / static_cast<double>(candidate.size()));
  }
  out.value = value;
  return out;
}

double bleu_n(std::span<const std::size_t> candidate, std::span<const std::size_t> reference, std::size_t n) {
  return bleu_score(candidate, reference, n).value;
}

std::size_t lcs_length(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::span<const std::size_t> candidate, std::span<const std::size_t> reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

std::optional<std::size_t> predicted_class(std::span<const std::size_t> generated, const std::vector<Tokens>& lexicon) {
  if (lexicon.empty()) throw ConfigError("diagnosis: empty lexicon");
  for (std::size_t t : generated) {
    for (std::size_t c = 0; c < lexicon.size(); ++c) {
      if (std::find(lexicon[c].begin(), lexicon[c].end(), t) != lexicon[c].end()) return c;
    }
  }
  return std::nullopt;
}

double diagnosis_correct(const ScoredPair& pair, const std::vector<Tokens>& lexicon) {
  if (!pair.labels) throw DataError("diagnosis: pair " + pair.id + " has no label set");
  const auto c = predicted_class(pair.generated, lexicon);
  if (!c) return 0.0;
  return std::find(pair.labels->begin(), pair.labels->end(), *c) != pair.labels->end() ? 1.0 : 0.0;
}

double diagnosis_accuracy(std::span<const ScoredPair> pairs, const std::vector<Tokens>& lexicon) {
  if (lexicon.empty()) throw ConfigError("diagnosis: empty lexicon");
  if (pairs.empty()) throw DataError("diagnosis: no pairs");
  double hits = 0.0;
  for (const ScoredPair& p : pairs) hits += diagnosis_correct(p, lexicon);
  return hits / static_cast<double>(pairs.size());
}

std::string to_string(Metric m) {
  switch (m) {
    case Metric::kBleu1: return "bleu1";
    case Metric::kBleu4: return "bleu4";
    case Metric::kRougeL: return "rougeL";
    case Metric::kDiagnosis: return "diagnosis";
  }
  return "bleu1";
}

Metric metric_from_string(const std::string& s) {
  if (s == "bleu1") return Metric::kBleu1;
  if (s == "bleu4") return Metric::kBleu4;
  if (s == "rougeL") return Metric::kRougeL;
  if (s == "diagnosis") return Metric::kDiagnosis;
  throw ConfigError("unknown metric '" + s + "'");
}

std::vector<double> pair_scores(std::span<const ScoredPair> pairs, Metric metric, const std::vector<Tokens>& lexicon) {
  std::vector<double> out;
  out.reserve(pairs.size());
  for (const ScoredPair& p : pairs) {
    if (p.reference.empty()) throw DataError("pair " + p.id + ": empty reference");
    switch (metric) {
      case Metric::kBleu1: out.push_back(bleu_n(p.generated, p.reference, 1)); break;
      case Metric::kBleu4: out.push_back(bleu_n(p.generated, p.reference, 4)); break;
      case Metric::kRougeL: out.push_back(rouge_l(p.generated, p.reference)); break;
      case Metric::kDiagnosis: out.push_back(diagnosis_correct(p, lexicon)); break;
    }
  }
  return out;
}

// ---------------------------------------------------------------- groups

std::vector<GroupScore> group_scores(std::span<const double> scores, std::span<const std::size_t> groups,
                                     const std::vector<std::string>& group_names, std::size_t min_count) {
  if (scores.size() != groups.size()) throw ShapeError("group_scores: one group per score required");
  std::vector<double> sum(group_names.size(), 0.0);
  std::vector<std::size_t> count(group_names.size(), 0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (groups[i] >= group_names.size()) {
      throw DataError("group_scores: unknown group index " + std::to_string(groups[i]));
    }
    sum[groups[i]] += scores[i];
    ++count[groups[i]];
  }
  std::vector<GroupScore> out;
  for (std::size_t g = 0; g < group_names.size(); ++g) {
    const double mean = count[g] ? sum[g] / static_cast<double>(count[g]) : std::numeric_limits<double>::quiet_NaN();
    out.push_back({group_names[g], mean, count[g], count[g] < min_count});
  }
  return out;
}

double fairness_gap(std::span<const GroupScore> groups) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t used = 0;
  for (const GroupScore& g : groups) {
    if (g.flagged || g.count == 0) continue;
    lo = std::min(lo, g.mean);
    hi = std::max(hi, g.mean);
    ++used;
  }
  if (used < 2) throw DataError("fairness_gap: fewer than two groups meet the minimum count");
  return hi - lo;
}

double es_metric(double m_all, double gap) {
  if (!(gap >= 0.0)) throw ConfigError("es_metric: gap must be >= 0");
  return m_all / (1.0 + gap);
}

std::string to_string(MAllMode m) { return m == MAllMode::kSampleMean ? "sample-mean" : "group-mean"; }

MAllMode m_all_mode_from_string(const std::string& s) {
  if (s == "sample-mean") return MAllMode::kSampleMean;
  if (s == "group-mean") return MAllMode::kGroupMean;
  throw ConfigError("unknown M_all mode '" + s + "'");
}

double m_all(std::span<const double> scores, std::span<const GroupScore> groups, MAllMode mode) {
  if (mode == MAllMode::kSampleMean) {
    if (scores.empty()) throw DataError("m_all: no scores");
    double s = 0.0;
    for (double x : scores) s += x;
    return s / static_cast<double>(scores.size());
  }
  double s = 0.0;
  std::size_t n = 0;
  for (const GroupScore& g : groups) {
    if (g.flagged || g.count == 0) continue;
    s += g.mean;
    ++n;
  }
  if (n == 0) throw DataError("m_all: no group meets the minimum count");
  return s / static_cast<double>(n);
}

// ---------------------------------------------------------------- bootstrap

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw DataError("percentile: no values");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

Interval interval_of(const std::vector<double>& values) {
  return {percentile(values, 0.025), percentile(values, 0.5), percentile(values, 0.975)};
}

BootstrapResult bootstrap_ci(std::span<const double> scores, std::span<const std::size_t> groups,
                             const std::vector<std::string>& group_names, std::size_t n_resamples,
                             std::uint64_t seed, std::size_t min_count, MAllMode mode) {
  if (n_resamples < 1) throw ConfigError("bootstrap: n_resamples must be >= 1");
  if (scores.empty()) throw DataError("bootstrap: no scores");
  if (scores.size() != groups.size()) throw ShapeError("bootstrap: one group per score required");
  const std::size_t n = scores.size(), ng = group_names.size();
  const std::vector<GroupScore> full = group_scores(scores, groups, group_names, min_count);

  std::vector<std::vector<double>> group_vals(ng);
  std::vector<double> gaps, ess;
  std::size_t skipped = 0;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<double> sum(ng), rs(n);
  std::vector<std::size_t> cnt(ng), rg(n);
  for (std::size_t r = 0; r < n_resamples; ++r) {
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(cnt.begin(), cnt.end(), 0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = pick(rng);
      rs[i] = 100.0 * scores[k];
      rg[i] = groups[k];
      sum[groups[k]] += rs[i];
      ++cnt[groups[k]];
      total += rs[i];
    }
    bool defined = true;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo, gsum = 0.0;
    std::size_t used = 0;
    for (std::size_t g = 0; g < ng; ++g) {
      if (cnt[g] > 0) group_vals[g].push_back(sum[g] / static_cast<double>(cnt[g]));
      if (full[g].flagged) continue;
      if (cnt[g] == 0) {
        defined = false;
        continue;
      }
      const double m = sum[g] / static_cast<double>(cnt[g]);
      lo = std::min(lo, m);
      hi = std::max(hi, m);
      gsum += m;
      ++used;
    }
    if (!defined || used < 2) {
      ++skipped;
      continue;
    }
    const double gap = hi - lo;
    const double all = mode == MAllMode::kSampleMean ? total / static_cast<double>(n) : gsum / static_cast<double>(used);
    gaps.push_back(gap);
    ess.push_back(es_metric(all, gap));
  }

  BootstrapResult out;
  out.n_resamples = n_resamples;
  out.skipped = skipped;
  for (const auto& v : group_vals) {
    out.groups.push_back(v.empty() ? std::nullopt : std::optional<Interval>(interval_of(v)));
  }
  if (!gaps.empty()) {
    out.gap = interval_of(gaps);
    out.es = interval_of(ess);
  }
  return out;
}

// ---------------------------------------------------------------- cross-sectional

CrossSectional cross_sectional_gaps(std::span<const double> scores,
                                    const std::vector<std::vector<std::size_t>>& attributes,
                                    const AttributeSchema& schema, std::size_t target,
                                    std::span<const std::size_t> controls, std::size_t min_count) {
  if (scores.size() != attributes.size()) throw ShapeError("cross_sectional: one attribute row per score required");
  if (target >= schema.size()) throw ConfigError("cross_sectional: unknown target attribute");
  for (std::size_t c : controls) {
    if (c >= schema.size() || c == target) throw ConfigError("cross_sectional: bad control attribute");
  }
  std::map<std::vector<std::size_t>, std::vector<std::size_t>> slices;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (attributes[i].size() != schema.size()) throw DataError("cross_sectional: pair missing attributes");
    std::vector<std::size_t> key;
    for (std::size_t c : controls) key.push_back(attributes[i][c]);
    slices[key].push_back(i);
  }
  CrossSectional out;
  double weighted = 0.0;
  std::size_t weight = 0;
  for (const auto& [key, idx] : slices) {
    std::vector<double> s;
    std::vector<std::size_t> g;
    for (std::size_t i : idx) {
      s.push_back(scores[i]);
      g.push_back(attributes[i][target]);
    }
    const auto gs = group_scores(s, g, schema.at(target).groups, min_count);
    SliceGap sg{key, idx.size(), std::nullopt};
    const auto usable = std::count_if(gs.begin(), gs.end(), [](const GroupScore& x) { return !x.flagged; });
    if (usable >= 2) {
      sg.gap = fairness_gap(gs);
      weighted += static_cast<double>(idx.size()) * *sg.gap;
      weight += idx.size();
    }
    out.slices.push_back(std::move(sg));
  }
  if (weight == 0) throw DataError("cross_sectional: no slice has two target groups meeting the minimum count");
  out.aggregate = weighted / static_cast<double>(weight);
  return out;
}

// ---------------------------------------------------------------- counterfactual

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

CounterfactualResult counterfactual_gap(std::span<const ScoredPair> pairs, std::span<const double> scores,
                                        std::size_t attribute, double threshold) {
  if (pairs.size() != scores.size()) throw ShapeError("counterfactual: one score per pair required");
  for (const ScoredPair& p : pairs) {
    if (!p.latent) throw DataError("counterfactual: pair " + p.id + " has no latent");
    if (!p.labels) throw DataError("counterfactual: pair " + p.id + " has no label set");
    if (attribute >= p.attributes.size()) throw DataError("counterfactual: pair " + p.id + " lacks the attribute");
  }
  CounterfactualResult out;
  out.total = pairs.size();
  out.partner.assign(pairs.size(), std::nullopt);
  double diff = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::vector<std::size_t> li = *pairs[i].labels;
    std::sort(li.begin(), li.end());
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < pairs.size(); ++j) {
      if (j == i || pairs[j].attributes[attribute] == pairs[i].attributes[attribute]) continue;
      std::vector<std::size_t> lj = *pairs[j].labels;
      std::sort(lj.begin(), lj.end());
      if (li != lj) continue;
      const double c = cosine(*pairs[i].latent, *pairs[j].latent);
      if (c >= threshold && c > best) {
        best = c;
        out.partner[i] = j;
      }
    }
    if (out.partner[i]) {
      ++out.matched;
      diff += std::abs(scores[i] - scores[*out.partner[i]]);
    }
  }
  if (out.matched == 0) {
    throw DataError("counterfactual: no pair found a match at threshold " + std::to_string(threshold) +
                    " (coverage 0 of " + std::to_string(out.total) + ")");
  }
  out.gap = diff / static_cast<double>(out.matched);
  return out;
}

// ---------------------------------------------------------------- predictions

nlohmann::json pair_to_json(const ScoredPair& p, const AttributeSchema& schema) {
  nlohmann::json attrs = nlohmann::json::object();
  for (std::size_t a = 0; a < schema.size(); ++a) attrs[schema.at(a).name] = schema.at(a).groups.at(p.attributes.at(a));
  nlohmann::json j{{"id", p.id}, {"generated", p.generated}, {"reference", p.reference}, {"attributes", attrs}};
  if (p.latent) j["latent"] = *p.latent;
  if (p.labels) j["labels"] = *p.labels;
  return j;
}

ScoredPair pair_from_json(const nlohmann::json& j, const AttributeSchema& schema) {
  ScoredPair p;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k != "id" && k != "generated" && k != "reference" && k != "attributes" && k != "latent" && k != "labels") {
        throw DataError("unknown key '" + k + "'");
      }
    }
    j.at("id").get_to(p.id);
    j.at("generated").get_to(p.generated);
    j.at("reference").get_to(p.reference);
    const auto& attrs = j.at("attributes");
    for (const Attribute& a : schema.attributes) {
      if (!attrs.contains(a.name)) throw DataError("missing attribute '" + a.name + "'");
      const auto g = a.group_index(attrs.at(a.name).get<std::string>());
      if (!g) throw DataError("unknown group for '" + a.name + "'");
      p.attributes.push_back(*g);
    }
    if (j.contains("latent")) p.latent = j.at("latent").get<std::vector<double>>();
    if (j.contains("labels")) p.labels = j.at("labels").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(e.what());
  }
  if (p.reference.empty()) throw DataError("pair " + p.id + ": empty reference");
  return p;
}

void write_predictions(const std::filesystem::path& path, std::span<const ScoredPair> pairs,
                       const AttributeSchema& schema) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const ScoredPair& p : pairs) out << pair_to_json(p, schema).dump() << '\n';
}

std::vector<ScoredPair> read_predictions(const std::filesystem::path& path, const AttributeSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<ScoredPair> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(pair_from_json(nlohmann::json::parse(line), schema));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": malformed JSON (" + e.what() + ")");
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (out.empty()) throw DataError(path.string() + ": no predictions");
  return out;
}

// ---------------------------------------------------------------- reports

namespace {

nlohmann::json interval_json(const Interval& i) {
  return nlohmann::json{{"lower", i.lower}, {"median", i.median}, {"upper", i.upper}};
}

nlohmann::json number_or_null(double x) { return std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x); }

}  // namespace

void to_json(nlohmann::json& j, const FairnessReport& r) {
  nlohmann::json groups = nlohmann::json::array();
  for (std::size_t g = 0; g < r.groups.size(); ++g) {
    const GroupScore& s = r.groups[g];
    nlohmann::json e{{"group", s.group}, {"mean", number_or_null(s.mean)}, {"count", s.count}, {"flagged", s.flagged}};
    if (r.ci && r.ci->groups[g]) e["ci"] = interval_json(*r.ci->groups[g]);
    groups.push_back(e);
  }
  j = nlohmann::json{{"metric", r.metric}, {"attribute", r.attribute}, {"groups", groups},
                     {"m_all", r.m_all},   {"gap", r.gap},             {"es", r.es}};
  if (r.ci) {
    nlohmann::json ci{{"n_resamples", r.ci->n_resamples},
                      {"skipped", r.ci->skipped},
                      {"skip_rate", r.ci->skip_rate()}};
    ci["gap"] = r.ci->gap ? interval_json(*r.ci->gap) : nlohmann::json(nullptr);
    ci["es"] = r.ci->es ? interval_json(*r.ci->es) : nlohmann::json(nullptr);
    j["ci"] = ci;
  }
}

std::vector<FairnessReport> build_reports(std::span<const ScoredPair> pairs, const AttributeSchema& schema,
                                          const ReportOptions& options) {
  if (pairs.empty()) throw DataError("report: no predictions");
  std::vector<std::size_t> attrs;
  if (options.attributes.empty()) {
    for (std::size_t a = 0; a < schema.size(); ++a) attrs.push_back(a);
  } else {
    for (const std::string& name : options.attributes) attrs.push_back(schema.require(name));
  }
  std::vector<FairnessReport> out;
  for (Metric metric : options.metrics) {
    std::vector<double> scores = pair_scores(pairs, metric, options.lexicon);
    std::vector<double> pct(scores.size());
    std::transform(scores.begin(), scores.end(), pct.begin(), [](double x) { return 100.0 * x; });
    for (std::size_t a : attrs) {
      std::vector<std::size_t> groups;
      for (const ScoredPair& p : pairs) groups.push_back(p.attributes.at(a));
      FairnessReport r;
      r.metric = to_string(metric);
      r.attribute = schema.at(a).name;
      r.groups = group_scores(pct, groups, schema.at(a).groups, options.min_count);
      r.m_all = m_all(pct, r.groups, options.m_all_mode);
      const auto eligible = std::count_if(r.groups.begin(), r.groups.end(),
                                          [](const GroupScore& g) { return !g.flagged && g.count > 0; });
      if (eligible < 2) {
        // No gap to report for this attribute; NaN renders as "-".
        r.gap = r.es = std::numeric_limits<double>::quiet_NaN();
        out.push_back(std::move(r));
        continue;
      }
      r.gap = fairness_gap(r.groups);
      r.es = es_metric(r.m_all, r.gap);
      if (options.n_resamples > 0) {
        r.ci = bootstrap_ci(scores, groups, schema.at(a).groups, options.n_resamples, options.seed, options.min_count,
                            options.m_all_mode);
      }
      out.push_back(std::move(r));
    }
  }
  return out;
}

namespace {

std::string fmt(double x) {
  if (std::isnan(x)) return "-";
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << x;
  return s.str();
}

std::string fmt_ci(const std::optional<Interval>& i) {
  if (!i) return "-";
  return fmt(i->median) + " [" + fmt(i->lower) + ", " + fmt(i->upper) + "]";
}

}  // namespace

std::string render_markdown(const std::vector<FairnessReport>& reports) {
  std::vector<std::string> metrics, attrs;
  for (const FairnessReport& r : reports) {
    if (std::find(metrics.begin(), metrics.end(), r.metric) == metrics.end()) metrics.push_back(r.metric);
    if (std::find(attrs.begin(), attrs.end(), r.attribute) == attrs.end()) attrs.push_back(r.attribute);
  }
  auto find = [&](const std::string& m, const std::string& a) -> const FairnessReport* {
    for (const FairnessReport& r : reports) {
      if (r.metric == m && r.attribute == a) return &r;
    }
    return nullptr;
  };
  std::ostringstream md;
  md << "## Equity-scaled summary\n\n| Metric | Overall |";
  for (const std::string& a : attrs) md << " Gap (" << a << ") | ES (" << a << ") |";
  md << "\n|---|---|";
  for (std::size_t i = 0; i < attrs.size(); ++i) md << "---|---|";
  md << "\n";
  for (const std::string& m : metrics) {
    const FairnessReport* first = nullptr;
    for (const std::string& a : attrs) {
      if ((first = find(m, a))) break;
    }
    md << "| " << m << " | " << (first ? fmt(first->m_all) : "-") << " |";
    for (const std::string& a : attrs) {
      const FairnessReport* r = find(m, a);
      md << " " << (r ? fmt(r->gap) : "-") << " | " << (r ? fmt(r->es) : "-") << " |";
    }
    md << "\n";
  }
  for (const FairnessReport& r : reports) {
    md << "\n### " << r.metric << " by " << r.attribute << "\n\n| Group | N | Mean | 95% CI (median [2.5, 97.5]) |\n"
       << "|---|---|---|---|\n";
    for (std::size_t g = 0; g < r.groups.size(); ++g) {
      const GroupScore& s = r.groups[g];
      md << "| " << s.group << (s.flagged ? " (low N)" : "") << " | " << s.count << " | " << fmt(s.mean) << " | "
         << (r.ci ? fmt_ci(r.ci->groups[g]) : "-") << " |\n";
    }
    md << "| gap | | " << fmt(r.gap) << " | " << (r.ci ? fmt_ci(r.ci->gap) : "-") << " |\n";
    md << "| ES | | " << fmt(r.es) << " | " << (r.ci ? fmt_ci(r.ci->es) : "-") << " |\n";
    if (r.ci && r.ci->skipped > 0) {
      md << "\nBootstrap resamples skipped for the gap: " << r.ci->skipped << " of " << r.ci->n_resamples << "\n";
    }
  }
  return md.str();
}

}  // namespace mifair
