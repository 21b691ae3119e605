#include "mifair/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "mifair/error.hpp"

namespace mifair {

// ---------------------------------------------------------------- tokens

std::vector<std::size_t> TokenLayout::instruction() const {
  std::vector<std::size_t> u(kInstructionLength);
  std::iota(u.begin(), u.end(), kInstructionBegin);
  return u;
}

std::size_t TokenLayout::shared_token(std::size_t slot) const {
  return kInstructionBegin + kInstructionLength + slot;
}

std::size_t TokenLayout::finding_token(std::size_t finding, std::size_t slot) const {
  return kInstructionBegin + kInstructionLength + 3 + 3 * finding + slot;
}

std::vector<std::size_t> TokenLayout::standard_template(std::size_t finding) const {
  return {shared_token(0),          finding_token(finding, 0), finding_token(finding, 1),
          shared_token(1),          finding_token(finding, 2), shared_token(2)};
}

std::size_t TokenLayout::vocab_needed() const { return finding_token(n_findings, 0); }

std::vector<std::vector<std::size_t>> TokenLayout::lexicon() const {
  std::vector<std::vector<std::size_t>> lex(n_findings);
  for (std::size_t c = 0; c < n_findings; ++c) {
    lex[c] = {finding_token(c, 0), finding_token(c, 1), finding_token(c, 2)};
  }
  return lex;
}

// ---------------------------------------------------------------- dataset

AttributeSchema Dataset::counted_schema() const {
  AttributeSchema s = schema;
  for (auto& attr : s.attributes) attr.counts.assign(attr.groups.size(), 0);
  for (const Sample& x : samples) {
    for (std::size_t a = 0; a < s.size(); ++a) ++s.attributes[a].counts[x.attributes[a]];
  }
  return s;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out{schema, {}};
  out.samples.reserve(indices.size());
  for (std::size_t i : indices) out.samples.push_back(samples.at(i));
  return out;
}

Dataset Dataset::with_split(const std::string& tag) const {
  Dataset out{schema, {}};
  for (const Sample& s : samples) {
    if (s.split == tag) out.samples.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------- config

void SynthConfig::validate() const {
  schema.validate();
  const std::size_t n_attr = schema.size();
  if (n_samples == 0) throw ConfigError("synth: n_samples must be positive");
  if (n_findings < 1) throw ConfigError("synth: n_findings must be positive");
  if (marginals.size() != n_attr || leakage.size() != n_attr || phrasing_bias.size() != n_attr) {
    throw ConfigError("synth: marginals, leakage and phrasing_bias need one entry per attribute");
  }
  for (std::size_t a = 0; a < n_attr; ++a) {
    const auto& m = marginals[a];
    if (m.size() != schema.at(a).group_count()) {
      throw ConfigError("synth: marginals of '" + schema.at(a).name + "' do not match its groups");
    }
    double total = 0.0;
    for (double p : m) {
      if (!(p >= 0.0)) throw ConfigError("synth: negative marginal for '" + schema.at(a).name + "'");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("synth: marginals of '" + schema.at(a).name + "' must sum to 1");
    if (!(leakage[a] >= 0.0 && leakage[a] <= 1.0)) throw ConfigError("synth: leakage must lie in [0, 1]");
    if (!(phrasing_bias[a] >= 0.0 && phrasing_bias[a] <= 1.0)) {
      throw ConfigError("synth: phrasing_bias must lie in [0, 1]");
    }
  }
  if (!(noise >= 0.0)) throw ConfigError("synth: noise must be >= 0");
  std::size_t rows = n_findings;
  for (const auto& attr : schema.attributes) rows += attr.group_count();
  if (feature_dim < rows) {
    throw ConfigError("synth: feature_dim " + std::to_string(feature_dim) + " cannot embed " + std::to_string(rows) +
                      " orthogonal one-hot directions");
  }
}

namespace {

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    if (!known) throw ConfigError(std::string(what) + ": unknown key '" + k + "'");
  }
}

}  // namespace

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"n_samples", c.n_samples},   {"schema", c.schema},
                     {"marginals", c.marginals},   {"n_findings", c.n_findings},
                     {"feature_dim", c.feature_dim}, {"leakage", c.leakage},
                     {"phrasing_bias", c.phrasing_bias}, {"noise", c.noise},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  reject_unknown(j,
                 {"n_samples", "schema", "marginals", "n_findings", "feature_dim", "leakage", "phrasing_bias",
                  "noise", "seed"},
                 "synth config");
  try {
    if (j.contains("n_samples")) j.at("n_samples").get_to(c.n_samples);
    if (j.contains("schema")) j.at("schema").get_to(c.schema);
    if (j.contains("marginals")) j.at("marginals").get_to(c.marginals);
    if (j.contains("n_findings")) j.at("n_findings").get_to(c.n_findings);
    if (j.contains("feature_dim")) j.at("feature_dim").get_to(c.feature_dim);
    if (j.contains("leakage")) j.at("leakage").get_to(c.leakage);
    if (j.contains("phrasing_bias")) j.at("phrasing_bias").get_to(c.phrasing_bias);
    if (j.contains("noise")) j.at("noise").get_to(c.noise);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth config: ") + e.what());
  }
}

std::string config_hash(const SynthConfig& config) {
  const std::string canonical = nlohmann::json(config).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : canonical) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

// ---------------------------------------------------------------- generator

FeatureProjections make_projections(const SynthConfig& config) {
  config.validate();
  const std::size_t d = config.feature_dim;
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<std::vector<double>> basis;
  auto next_row = [&]() {
    // Gram-Schmidt against the rows drawn so far; d >= total rows is checked.
    for (;;) {
      std::vector<double> v(d);
      for (double& x : v) x = gauss(rng);
      for (const auto& b : basis) {
        const double dot = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
        for (std::size_t i = 0; i < d; ++i) v[i] -= dot * b[i];
      }
      const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
      if (norm < 1e-6) continue;
      for (double& x : v) x /= norm;
      basis.push_back(v);
      return v;
    }
  };

  FeatureProjections p;
  for (std::size_t c = 0; c < config.n_findings; ++c) p.finding_rows.push_back(next_row());
  p.group_rows.resize(config.schema.size());
  p.variants.resize(config.schema.size());
  for (std::size_t a = 0; a < config.schema.size(); ++a) {
    const std::size_t groups = config.schema.at(a).group_count();
    for (std::size_t g = 0; g < groups; ++g) p.group_rows[a].push_back(next_row());
    for (std::size_t g = 0; g < groups; ++g) {
      std::vector<std::size_t> perm(TokenLayout::kTemplateLength);
      std::iota(perm.begin(), perm.end(), 0);
      if (g > 0) {
        const std::vector<std::size_t> identity = perm;
        do {
          std::shuffle(perm.begin(), perm.end(), rng);
        } while (perm == identity);
      }
      p.variants[a].push_back(perm);
    }
  }
  return p;
}

double variant_probability(const SynthConfig& config, std::size_t attribute, std::size_t group) {
  return group == 0 ? 0.0 : config.phrasing_bias.at(attribute);
}

namespace {

std::vector<double> feature_vector(const SynthConfig& config, const FeatureProjections& p, std::size_t finding,
                                   const std::vector<std::size_t>& groups) {
  std::vector<double> x = p.finding_rows[finding];
  for (std::size_t a = 0; a < groups.size(); ++a) {
    const auto& row = p.group_rows[a][groups[a]];
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += config.leakage[a] * row[i];
  }
  return x;
}

std::string sample_id(std::size_t i) {
  std::ostringstream os;
  os << 's';
  os.width(6);
  os.fill('0');
  os << i;
  return os.str();
}

}  // namespace

SynthResult synth_generate(const SynthConfig& config) {
  config.validate();
  const FeatureProjections proj = make_projections(config);
  const TokenLayout layout{config.n_findings};
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> finding_dist(0, config.n_findings - 1);
  std::vector<std::discrete_distribution<std::size_t>> group_dist;
  for (const auto& m : config.marginals) group_dist.emplace_back(m.begin(), m.end());

  Dataset ds{config.schema, {}};
  for (auto& attr : ds.schema.attributes) attr.counts.clear();
  ds.samples.reserve(config.n_samples);
  for (std::size_t i = 0; i < config.n_samples; ++i) {
    Sample s;
    s.id = sample_id(i);
    s.attributes.resize(config.schema.size());
    for (std::size_t a = 0; a < config.schema.size(); ++a) s.attributes[a] = group_dist[a](rng);
    const std::size_t finding = finding_dist(rng);
    s.features = feature_vector(config, proj, finding, s.attributes);
    for (double& x : s.features) x += config.noise * gauss(rng);
    s.reference = layout.standard_template(finding);
    for (std::size_t a = 0; a < config.schema.size(); ++a) {
      // Always draw so the stream does not depend on which variants fire.
      const double u = unit(rng);
      if (u < variant_probability(config, a, s.attributes[a])) {
        const auto& perm = proj.variants[a][s.attributes[a]];
        std::vector<std::size_t> reordered(s.reference.size());
        for (std::size_t k = 0; k < perm.size(); ++k) reordered[k] = s.reference[perm[k]];
        s.reference = std::move(reordered);
      }
    }
    s.labels = {finding};
    ds.samples.push_back(std::move(s));
  }

  std::optional<std::vector<double>> mi;
  if (config.noise == 0.0) mi = true_mi_oracle(config);
  DatasetManifest manifest = build_manifest(ds, config.n_findings, config_hash(config), std::move(mi));
  return {std::move(ds), std::move(manifest)};
}

std::vector<double> true_mi_oracle(const SynthConfig& config) {
  config.validate();
  if (config.noise != 0.0) throw ConfigError("true_mi_oracle: defined only for noiseless configurations");
  const FeatureProjections proj = make_projections(config);
  const std::size_t n_attr = config.schema.size();

  // Enumerate every (finding, group tuple) with its probability and the
  // feature vector it produces; identical vectors form one x-cell.
  struct Atom {
    std::vector<double> x;
    std::vector<std::size_t> groups;
    double p;
  };
  std::vector<Atom> atoms;
  std::vector<std::size_t> groups(n_attr, 0);
  for (;;) {
    double pg = 1.0;
    for (std::size_t a = 0; a < n_attr; ++a) pg *= config.marginals[a][groups[a]];
    for (std::size_t c = 0; c < config.n_findings; ++c) {
      atoms.push_back({feature_vector(config, proj, c, groups), groups, pg / static_cast<double>(config.n_findings)});
    }
    std::size_t a = 0;
    while (a < n_attr && ++groups[a] == config.schema.at(a).group_count()) groups[a++] = 0;
    if (a == n_attr) break;
  }

  std::map<std::vector<double>, std::size_t> cell_of;
  std::vector<std::size_t> atom_cell(atoms.size());
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    auto [it, inserted] = cell_of.emplace(atoms[i].x, cell_of.size());
    atom_cell[i] = it->second;
  }
  const std::size_t n_cells = cell_of.size();

  std::vector<double> mi(n_attr, 0.0);
  for (std::size_t a = 0; a < n_attr; ++a) {
    const std::size_t n_groups = config.schema.at(a).group_count();
    std::vector<double> joint(n_cells * n_groups, 0.0), px(n_cells, 0.0), pa(n_groups, 0.0);
    for (std::size_t i = 0; i < atoms.size(); ++i) {
      joint[atom_cell[i] * n_groups + atoms[i].groups[a]] += atoms[i].p;
      px[atom_cell[i]] += atoms[i].p;
      pa[atoms[i].groups[a]] += atoms[i].p;
    }
    double total = 0.0;
    for (std::size_t x = 0; x < n_cells; ++x) {
      for (std::size_t g = 0; g < n_groups; ++g) {
        const double pj = joint[x * n_groups + g];
        if (pj > 0.0) total += pj * std::log(pj / (px[x] * pa[g]));
      }
    }
    mi[a] = std::max(total, 0.0);
  }
  return mi;
}

// ---------------------------------------------------------------- manifest

DatasetManifest build_manifest(const Dataset& dataset, std::size_t n_findings, std::string hash,
                               std::optional<std::vector<double>> true_mi) {
  DatasetManifest m;
  m.schema = dataset.counted_schema();
  m.n_samples = dataset.size();
  m.n_findings = n_findings;
  m.cell_counts.resize(m.schema.size());
  for (std::size_t a = 0; a < m.schema.size(); ++a) {
    m.cell_counts[a].assign(m.schema.at(a).group_count(), std::vector<std::size_t>(n_findings, 0));
  }
  for (const Sample& s : dataset.samples) {
    for (std::size_t a = 0; a < m.schema.size(); ++a) {
      for (std::size_t c : s.labels) {
        if (c < n_findings) ++m.cell_counts[a][s.attributes[a]][c];
      }
    }
  }
  m.config_hash = std::move(hash);
  m.true_mi = std::move(true_mi);
  return m;
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = nlohmann::json{{"schema", m.schema},
                     {"n_samples", m.n_samples},
                     {"n_findings", m.n_findings},
                     {"cell_counts", m.cell_counts},
                     {"config_hash", m.config_hash}};
  j["true_mi"] = m.true_mi ? nlohmann::json(*m.true_mi) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  j.at("schema").get_to(m.schema);
  j.at("n_samples").get_to(m.n_samples);
  j.at("n_findings").get_to(m.n_findings);
  j.at("cell_counts").get_to(m.cell_counts);
  j.at("config_hash").get_to(m.config_hash);
  if (j.contains("true_mi") && !j.at("true_mi").is_null()) {
    m.true_mi = j.at("true_mi").get<std::vector<double>>();
  } else {
    m.true_mi.reset();
  }
}

// ---------------------------------------------------------------- jsonl io

nlohmann::json sample_to_json(const Sample& s, const AttributeSchema& schema) {
  nlohmann::json attrs = nlohmann::json::object();
  for (std::size_t a = 0; a < schema.size(); ++a) attrs[schema.at(a).name] = schema.at(a).groups[s.attributes[a]];
  nlohmann::json j{{"id", s.id},
                   {"features", s.features},
                   {"attributes", attrs},
                   {"reference", s.reference},
                   {"labels", s.labels}};
  if (!s.split.empty()) j["split"] = s.split;
  return j;
}

void write_jsonl(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const Sample& s : dataset.samples) out << sample_to_json(s, dataset.schema).dump() << '\n';
}

IngestResult ingest_jsonl(const std::filesystem::path& path, const AttributeSchema& schema, std::size_t vocab_size) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  IngestResult result;
  result.dataset.schema = schema;
  for (auto& attr : result.dataset.schema.attributes) attr.counts.clear();
  std::set<std::string> seen_ids;
  std::size_t records = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++records;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + "malformed JSON (" + e.what() + ")");
    }
    try {
      Sample s;
      s.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
      if (!seen_ids.insert(s.id).second) throw DataError(where + "duplicate id '" + s.id + "'");
      j.at("features").get_to(s.features);
      j.at("reference").get_to(s.reference);
      if (j.contains("labels")) j.at("labels").get_to(s.labels);
      if (j.contains("split")) j.at("split").get_to(s.split);
      if (s.reference.empty()) throw DataError(where + "empty reference");
      for (std::size_t t : s.reference) {
        if (t >= vocab_size) throw DataError(where + "token " + std::to_string(t) + " >= vocab size");
      }
      const auto& attrs = j.at("attributes");
      bool missing = false;
      for (std::size_t a = 0; a < schema.size(); ++a) {
        const auto& attr = schema.at(a);
        if (!attrs.contains(attr.name) || attrs.at(attr.name).is_null()) {
          missing = true;
          break;
        }
        const auto label = attrs.at(attr.name).get<std::string>();
        const auto g = attr.group_index(label);
        if (!g) throw DataError(where + "label '" + label + "' not in groups of '" + attr.name + "'");
        s.attributes.push_back(*g);
      }
      if (missing) {
        ++result.dropped;
        continue;
      }
      result.dataset.samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + "invalid record (" + e.what() + ")");
    }
  }
  if (records == 0) throw DataError(path.string() + ": empty dataset file");
  if (2 * result.dropped > records) {
    throw DataError(path.string() + ": " + std::to_string(result.dropped) + " of " + std::to_string(records) +
                    " records lack a schema attribute");
  }
  const std::size_t feature_dim = result.dataset.samples.front().features.size();
  for (const Sample& s : result.dataset.samples) {
    if (s.features.size() != feature_dim) throw DataError(path.string() + ": inconsistent feature lengths");
  }
  return result;
}

// ---------------------------------------------------------------- split

SplitResult split(const Dataset& dataset, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("split: fraction must lie in (0, 1)");
  std::map<std::vector<std::size_t>, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < dataset.size(); ++i) cells[dataset.samples[i].attributes].push_back(i);

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order;
  order.reserve(dataset.size());
  for (auto& [key, members] : cells) {
    std::shuffle(members.begin(), members.end(), rng);
    order.insert(order.end(), members.begin(), members.end());
  }

  SplitResult out{Dataset{dataset.schema, {}}, Dataset{dataset.schema, {}}};
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto before = static_cast<long long>(std::floor(static_cast<double>(k) * train_fraction));
    const auto after = static_cast<long long>(std::floor(static_cast<double>(k + 1) * train_fraction));
    Sample s = dataset.samples[order[k]];
    if (after > before) {
      s.split = "train";
      out.train.samples.push_back(std::move(s));
    } else {
      s.split = "test";
      out.test.samples.push_back(std::move(s));
    }
  }
  auto by_id = [](const Sample& a, const Sample& b) { return a.id < b.id; };
  std::sort(out.train.samples.begin(), out.train.samples.end(), by_id);
  std::sort(out.test.samples.begin(), out.test.samples.end(), by_id);
  return out;
}

}  // namespace mifair
