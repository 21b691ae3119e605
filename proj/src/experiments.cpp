#include "mifair/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

#include "mifair/error.hpp"
#include "mifair/fairness.hpp"
#include "mifair/grad_check.hpp"

namespace mifair {

namespace {

void strict_keys(const nlohmann::json& j, std::initializer_list<const char*> keys, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* x) { return k == x; }) == keys.end()) {
      throw ConfigError(std::string(what) + ": unknown key '" + k + "'");
    }
  }
}

template <class T>
void get_opt(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace

void to_json(nlohmann::json& j, const GradCheckConfig& c) {
  j = {{"n_configs", c.n_configs}, {"seed", c.seed},           {"epsilon", c.epsilon},
       {"tolerance", c.tolerance}, {"batch_size", c.batch_size}};
}

void from_json(const nlohmann::json& j, GradCheckConfig& c) {
  strict_keys(j, {"n_configs", "seed", "epsilon", "tolerance", "batch_size"}, "grad_check config");
  get_opt(j, "n_configs", c.n_configs);
  get_opt(j, "seed", c.seed);
  get_opt(j, "epsilon", c.epsilon);
  get_opt(j, "tolerance", c.tolerance);
  get_opt(j, "batch_size", c.batch_size);
  if (c.n_configs == 0) throw ConfigError("grad_check: n_configs must be positive");
  if (c.batch_size < 2) throw ConfigError("grad_check: batch_size must be at least 2");
  if (!(c.epsilon > 0.0 && c.epsilon <= 1e-2)) throw ConfigError("grad_check: epsilon must lie in (0, 1e-2]");
  if (!(c.tolerance > 0.0)) throw ConfigError("grad_check: tolerance must be positive");
}

// ---------------------------------------------------------------- gradient checks

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& c : cases) {
    for (const auto& t : c.terms) m = std::max(m, t.max_rel_error);
  }
  return m;
}

double GradCheckReport::max_rel_error(const std::string& term) const {
  double m = 0.0;
  for (const auto& c : cases) {
    for (const auto& t : c.terms) {
      if (t.term == term) m = std::max(m, t.max_rel_error);
    }
  }
  return m;
}

bool GradCheckReport::stop_gradients_hold() const {
  return std::all_of(cases.begin(), cases.end(), [](const GradCheckCase& c) { return c.dim_phi_zero && c.dac_model_zero; });
}

bool GradCheckReport::passed() const {
  return !cases.empty() && max_rel_error() <= tolerance && stop_gradients_hold();
}

void to_json(nlohmann::json& j, const GradCheckReport& r) {
  j = nlohmann::json::object();
  j["tolerance"] = r.tolerance;
  j["passed"] = r.passed();
  j["stop_gradients_hold"] = r.stop_gradients_hold();
  nlohmann::json terms = nlohmann::json::object();
  for (const char* t : {"lm", "dac", "dim", "total"}) terms[t] = r.max_rel_error(t);
  j["max_rel_error"] = terms;
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : r.cases) {
    nlohmann::json jc{{"seed", c.seed}, {"dim_phi_zero", c.dim_phi_zero}, {"dac_model_zero", c.dac_model_zero}};
    for (const auto& t : c.terms) {
      jc["terms"].push_back(
          {{"term", t.term}, {"wrt", t.wrt}, {"max_rel_error", t.max_rel_error}, {"coordinates", t.coordinates}});
    }
    cases.push_back(jc);
  }
  j["cases"] = cases;
}

namespace {

struct ToyProblem {
  ModelState state;
  DacSet dac;
  AttributeSchema schema;
  std::vector<std::vector<double>> features;
  std::vector<std::vector<std::size_t>> references;
  std::vector<std::vector<std::size_t>> labels;
  std::vector<std::vector<double>> class_weight;
  LossWeights weights;
  std::size_t n_model = 0;  // leading params that belong to theta/psi
};

ToyProblem make_toy(std::uint64_t seed, std::size_t batch) {
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 17);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.2, 1.5);

  ModelConfig mc;
  mc.n_layers = 2;
  mc.d_model = 8;
  mc.n_heads = 2;
  mc.vocab_size = 12;
  mc.max_seq = 14;
  mc.feature_dim = 5;
  mc.n_feature_tokens = 2;
  mc.lora_rank = 2;
  mc.init_seed = seed + 1;

  ToyProblem p;
  p.state = init_model(mc);
  for (auto& t : p.state.adapters) {
    for (double& v : t.value.data()) v = 0.3 * g(rng);
  }
  for (auto& t : p.state.projector) {
    for (double& v : t.value.data()) v += 0.3 * g(rng);
  }
  p.schema.attributes = {{"gender", {"male", "female"}, {}}, {"age", {"young", "mid", "old"}, {}}};
  p.dac = init_dac(p.schema, mc.d_model, 6, seed + 2);

  std::uniform_int_distribution<std::size_t> len(2, 5), tok(2, mc.vocab_size - 1);
  p.labels.assign(p.schema.size(), {});
  for (std::size_t i = 0; i < batch; ++i) {
    std::vector<double> f(mc.feature_dim);
    for (double& v : f) v = g(rng);
    p.features.push_back(f);
    std::vector<std::size_t> r(len(rng));
    for (auto& t : r) t = tok(rng);
    p.references.push_back(r);
    for (std::size_t a = 0; a < p.schema.size(); ++a) {
      p.labels[a].push_back((i + seed + a) % p.schema.at(a).group_count());
    }
  }
  // Some heads carry input statistics, some do not.
  if (seed % 2 == 0) {
    Tensor hs = Tensor::zeros({4, mc.d_model});
    for (double& v : hs.data()) v = g(rng);
    for (DacHead& h : p.dac.heads) update_dac_statistics(h, hs);
  }
  std::uniform_int_distribution<std::size_t> cnt(1, 9);
  for (std::size_t a = 0; a < p.schema.size(); ++a) {
    std::vector<std::size_t> counts(p.schema.at(a).group_count());
    for (auto& c : counts) c = cnt(rng);
    p.class_weight.push_back(class_weights(counts));
  }
  p.weights = LossWeights{u(rng), u(rng), u(rng), {{"age", u(rng)}}};
  p.n_model = p.state.projector.size() + p.state.adapters.size();
  return p;
}

struct Built {
  Var lm;
  Var h;
  std::vector<BoundHead> heads;  // leaves from params when given
};

// Model outputs with theta/psi taken from p[0..n_model); heads from
// p[n_model..] when `heads_from_params`, else constants.
Built build(Tape& tape, const ToyProblem& prob, std::span<const Var> p, bool model_from_params,
            bool heads_from_params) {
  BoundModel m = bind(tape, prob.state, {false, false});
  std::size_t k = 0;
  if (model_from_params) {
    for (auto& v : m.projector) v = p[k++];
    for (auto& v : m.adapters) v = p[k++];
  }
  std::vector<const std::vector<double>*> f;
  std::vector<const std::vector<std::size_t>*> r;
  for (std::size_t i = 0; i < prob.features.size(); ++i) {
    f.push_back(&prob.features[i]);
    r.push_back(&prob.references[i]);
  }
  TeacherForced tf = teacher_forced(m, f, r);
  Built b{tf.loss.per_sample_mean, pooled(m, tf.forward), bind_dac(tape, prob.dac, false)};
  if (heads_from_params) {
    k = prob.n_model;
    for (BoundHead& h : b.heads) {
      h.w1 = p[k++];
      h.b1 = p[k++];
      h.w2 = p[k++];
      h.b2 = p[k++];
    }
  }
  return b;
}

std::vector<Tensor> model_tensors(const ToyProblem& p) {
  std::vector<Tensor> out;
  for (const auto& t : p.state.projector) out.push_back(t.value);
  for (const auto& t : p.state.adapters) out.push_back(t.value);
  return out;
}

std::vector<Tensor> head_tensors(const ToyProblem& p) {
  std::vector<Tensor> out;
  for (const DacHead& h : p.dac.heads) {
    for (const Tensor* t : {&h.w1, &h.b1, &h.w2, &h.b2}) out.push_back(*t);
  }
  return out;
}

bool all_zero(const Gradients& g, std::span<const Var> vars) {
  for (Var v : vars) {
    const Tensor t = g.of(v);
    for (double x : t.data()) {
      if (x != 0.0) return false;
    }
  }
  return true;
}

GradCheckCase check_case(std::uint64_t seed, const GradCheckConfig& cfg) {
  const ToyProblem prob = make_toy(seed, cfg.batch_size);
  const LossWeights unit{1.0, 1.0, 1.0, {}};
  const std::vector<Tensor> theta = model_tensors(prob);
  const std::vector<Tensor> phi = head_tensors(prob);
  std::vector<Tensor> all = theta;
  all.insert(all.end(), phi.begin(), phi.end());

  // Base-point pooled states, the detached input of L_DAC.
  Tensor h0;
  {
    Tape t(false);
    h0 = build(t, prob, {}, false, false).h.value();
  }

  GradCheckCase out;
  out.seed = seed;
  auto record = [&](const char* term, const char* wrt, const GradCheckResult& r) {
    out.terms.push_back({term, wrt, r.max_rel_error, r.coordinates});
  };

  ScalarFn lm = [&](Tape& t, std::span<const Var> p) { return build(t, prob, p, true, false).lm; };
  record("lm", "theta+psi", grad_check(lm, theta, cfg.epsilon));

  // build() reads heads after the model slots; pass dummies in front.
  ScalarFn dac_heads_only = [&](Tape& t, std::span<const Var> p) {
    std::vector<Var> full(prob.n_model, Var{});
    full.insert(full.end(), p.begin(), p.end());
    Built b = build(t, prob, full, false, true);
    return weighted_dac(b.heads, t.constant(h0), prob.labels, prob.class_weight, prob.schema, unit);
  };
  record("dac", "phi", grad_check(dac_heads_only, phi, cfg.epsilon));

  ScalarFn dim = [&](Tape& t, std::span<const Var> p) {
    Built b = build(t, prob, p, true, false);
    return weighted_dim(b.heads, b.h, prob.labels, prob.schema, unit);
  };
  record("dim", "theta+psi", grad_check(dim, theta, cfg.epsilon));

  // Total: backward through the real objective; differences of the same
  // objective with the detached parts frozen at the base point.
  ScalarFn total = [&](Tape& t, std::span<const Var> p) {
    Built b = build(t, prob, p, true, true);
    return total_loss(b.lm, b.h, b.heads, prob.labels, prob.class_weight, prob.schema, prob.weights).total;
  };
  ScalarFn total_fd = [&](Tape& t, std::span<const Var> p) {
    Built b = build(t, prob, p, true, true);
    const std::vector<BoundHead> frozen = bind_dac(t, prob.dac, false);
    Var v = scale(b.lm, prob.weights.lambda_lm);
    v = add(v, weighted_dim(frozen, b.h, prob.labels, prob.schema, prob.weights));
    return add(v, weighted_dac(b.heads, t.constant(h0), prob.labels, prob.class_weight, prob.schema, prob.weights));
  };
  record("total", "all", grad_check(total, total_fd, all, cfg.epsilon));

  // Stop-gradient contracts on one tape with every parameter a leaf.
  {
    Tape t;
    std::vector<Var> leaves;
    for (const Tensor& x : all) leaves.push_back(t.leaf(x));
    Built b = build(t, prob, leaves, true, true);
    const std::span<const Var> model_leaves(leaves.data(), prob.n_model);
    const std::span<const Var> head_leaves(leaves.data() + prob.n_model, leaves.size() - prob.n_model);
    const Gradients gd = t.backward(weighted_dim(b.heads, b.h, prob.labels, prob.schema, unit));
    out.dim_phi_zero = all_zero(gd, head_leaves) &&
                       std::none_of(head_leaves.begin(), head_leaves.end(), [&](Var v) { return gd.reached(v); });
    const Gradients ga =
        t.backward(weighted_dac(b.heads, b.h, prob.labels, prob.class_weight, prob.schema, unit));
    out.dac_model_zero = all_zero(ga, model_leaves) &&
                         std::none_of(model_leaves.begin(), model_leaves.end(), [&](Var v) { return ga.reached(v); });
  }
  return out;
}

}  // namespace

GradCheckReport run_grad_check_suite(const GradCheckConfig& config) {
  GradCheckReport r;
  r.tolerance = config.tolerance;
  for (std::size_t i = 0; i < config.n_configs; ++i) r.cases.push_back(check_case(config.seed + i, config));
  return r;
}

// ---------------------------------------------------------------- MI oracle

void to_json(nlohmann::json& j, const MiOracleConfig& c) {
  j = {{"n_joints", c.n_joints}, {"max_cells", c.max_cells}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, MiOracleConfig& c) {
  strict_keys(j, {"n_joints", "max_cells", "seed"}, "mi_oracle config");
  get_opt(j, "n_joints", c.n_joints);
  get_opt(j, "max_cells", c.max_cells);
  get_opt(j, "seed", c.seed);
  if (c.max_cells < 2) throw ConfigError("mi_oracle: max_cells must be at least 2");
}

void to_json(nlohmann::json& j, const MiOracleReport& r) {
  j = nlohmann::json::object();
  j["min_slack"] = r.min_slack;
  j["passed"] = r.passed();
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& x : r.rows) {
    rows.push_back({{"cells", x.cells}, {"groups", x.groups}, {"mi", x.mi}, {"bound", x.bound}});
  }
  j["rows"] = rows;
}

MiOracleReport run_mi_oracle(const MiOracleConfig& config) {
  MiOracleReport r;
  auto add_row = [&](const Tensor& joint) {
    const MiOracleRow row{joint.rows(), joint.cols(), exact_mi(joint), club_bound_exact(joint, exact_conditional(joint))};
    r.min_slack = r.rows.empty() ? row.bound - row.mi : std::min(r.min_slack, row.bound - row.mi);
    r.rows.push_back(row);
  };
  add_row(Tensor::from_rows({{0.4, 0.1}, {0.1, 0.4}}));

  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> dim(2, config.max_cells);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  while (r.rows.size() < config.n_joints + 1) {
    const std::size_t rows = dim(rng), cols = dim(rng);
    Tensor joint = Tensor::zeros({rows, cols});
    double total = 0.0;
    for (double& v : joint.data()) {
      v = u(rng) < 0.2 ? 0.0 : std::pow(u(rng), 3.0);
      total += v;
    }
    if (total == 0.0) continue;
    for (double& v : joint.data()) v /= total;
    add_row(joint);
  }
  return r;
}

// ---------------------------------------------------------------- benchmark

BenchmarkConfig with_seed(BenchmarkConfig config, std::uint64_t seed) {
  config.data.seed = seed;
  config.model.init_seed = 1234 + seed;
  config.train.seed = seed;
  config.probe.seed = seed;
  return config;
}

const ProbeResult& BenchmarkResult::probe(const std::string& attribute) const {
  for (const auto& p : probes) {
    if (p.attribute == attribute) return p;
  }
  throw ConfigError("no probe for attribute '" + attribute + "'");
}

void to_json(nlohmann::json& j, const BenchmarkResult& r) {
  j = {{"seed", r.seed}, {"bleu1", r.bleu1}, {"target_gap", r.target_gap},
       {"checksum_unchanged", r.checksum_unchanged}, {"seconds", r.seconds}};
  for (const auto& g : r.target_groups) {
    j["target_groups"].push_back({{"group", g.group}, {"mean", g.mean}, {"count", g.count}, {"flagged", g.flagged}});
  }
  for (const auto& p : r.probes) {
    j["probes"].push_back(
        {{"attribute", p.attribute}, {"accuracy", p.accuracy}, {"chance", p.chance}, {"majority", p.majority}});
  }
}

BenchmarkResult run_benchmark(const BenchmarkConfig& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const SynthResult data = synth_generate(c.data);
  const SplitResult sp = split(data.dataset, c.train_fraction, c.data.seed);
  ModelState init = init_model(c.model);
  const std::string before = frozen_checksum(init);
  const TrainResult tr = train_run(c.train, std::move(init), sp.train);

  BenchmarkResult r;
  r.seed = c.data.seed;
  r.checksum_unchanged = frozen_checksum(tr.state) == before;
  r.probes = probe_leakage(tr.state, sp.train, sp.test, c.probe);

  const std::size_t max_new = c.max_new ? c.max_new : c.model.max_seq - c.model.prompt_length();
  const std::vector<ScoredPair> pairs = predict(tr.state, sp.test, max_new, false);
  const std::vector<double> scores = pair_scores(pairs, Metric::kBleu1);
  double total = 0.0;
  for (double s : scores) total += s;
  r.bleu1 = total / static_cast<double>(scores.size());

  const std::size_t a = sp.test.schema.require(c.target_attribute);
  std::vector<std::size_t> groups;
  for (const auto& p : pairs) groups.push_back(p.attributes.at(a));
  r.target_groups = group_scores(scores, groups, sp.test.schema.at(a).groups);
  r.target_gap = fairness_gap(r.target_groups);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

namespace {

BenchmarkConfig benchmark_common() {
  BenchmarkConfig c;
  c.train.epochs = 5;
  c.train.stage1_epochs = 1;
  return c;
}

}  // namespace

BenchmarkConfig benchmark_baseline() {
  BenchmarkConfig c = benchmark_common();
  c.train.loss.lambda_dim = 0.0;
  c.train.loss.lambda_dac = 0.0;
  return c;
}

BenchmarkConfig benchmark_fair() {
  BenchmarkConfig c = benchmark_common();
  c.train.loss.lambda_dim = 1.0;
  c.train.loss.lambda_dac = 1.0;
  c.train.schedule = Schedule::kJoint;
  return c;
}

BenchmarkConfig benchmark_frozen() {
  BenchmarkConfig c = benchmark_fair();
  c.train.schedule = Schedule::kPretrainDacThenFreeze;
  return c;
}

double median(std::vector<double> values) {
  if (values.empty()) throw DataError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace mifair
