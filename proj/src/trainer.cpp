#include "mifair/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "mifair/error.hpp"

namespace mifair {

// ---------------------------------------------------------------- enums

std::string to_string(Schedule s) { return s == Schedule::kJoint ? "joint" : "pretrain-dac-then-freeze"; }

std::string to_string(Baseline b) {
  switch (b) {
    case Baseline::kNone: return "none";
    case Baseline::kReweight: return "reweight";
    case Baseline::kResample: return "resample";
  }
  return "none";
}

std::string to_string(OptimizerKind o) { return o == OptimizerKind::kAdam ? "adam" : "sgd"; }

std::string to_string(Phase p) {
  switch (p) {
    case Phase::kStage1: return "stage1";
    case Phase::kDacPretrain: return "dac_pretrain";
    case Phase::kJoint: return "joint";
    case Phase::kFrozenDac: return "frozen_dac";
  }
  return "joint";
}

Schedule schedule_from_string(const std::string& s) {
  if (s == "joint") return Schedule::kJoint;
  if (s == "pretrain-dac-then-freeze") return Schedule::kPretrainDacThenFreeze;
  throw ConfigError("unknown schedule '" + s + "'");
}

Baseline baseline_from_string(const std::string& s) {
  if (s == "none") return Baseline::kNone;
  if (s == "reweight") return Baseline::kReweight;
  if (s == "resample") return Baseline::kResample;
  throw ConfigError("unknown baseline '" + s + "'");
}

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "sgd") return OptimizerKind::kSgd;
  throw ConfigError("unknown optimizer '" + s + "'");
}

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (loss.lambda_dim > 0.0 && batch_size < 2) throw ConfigError("train: batch_size must be >= 2 when lambda_dim > 0");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("train: learning_rate must be finite and >= 0");
  }
  if (dac_learning_rate && (!(*dac_learning_rate >= 0.0) || !std::isfinite(*dac_learning_rate))) {
    throw ConfigError("train: dac_learning_rate must be finite and >= 0");
  }
  if (dac_steps == 0) throw ConfigError("train: dac_steps must be positive");
  if (dac_hidden == 0) throw ConfigError("train: dac_hidden must be positive");
  if (baseline != Baseline::kNone && baseline_attributes.empty()) {
    throw ConfigError("train: the baseline needs at least one attribute");
  }
  loss.validate();
}

namespace {

constexpr const char* kTrainKeys[] = {"epochs",        "batch_size",          "learning_rate",  "optimizer", "dac_learning_rate", "dac_steps", "clip_dim",
                                      "seed",          "schedule",            "dac_pretrain_epochs",
                                      "stage1_epochs", "baseline",            "baseline_attributes",
                                      "dac_hidden",    "loss",                "checkpoint_path", "log_path"};

}  // namespace

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"dac_learning_rate", c.dac_learning_rate ? nlohmann::json(*c.dac_learning_rate) : nlohmann::json()},
                     {"dac_steps", c.dac_steps},
                     {"clip_dim", c.clip_dim},
                     {"optimizer", to_string(c.optimizer)},
                     {"seed", c.seed},
                     {"schedule", to_string(c.schedule)},
                     {"dac_pretrain_epochs", c.dac_pretrain_epochs},
                     {"stage1_epochs", c.stage1_epochs},
                     {"baseline", to_string(c.baseline)},
                     {"baseline_attributes", c.baseline_attributes},
                     {"dac_hidden", c.dac_hidden},
                     {"loss", c.loss},
                     {"checkpoint_path", c.checkpoint_path},
                     {"log_path", c.log_path}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config: expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(std::begin(kTrainKeys), std::end(kTrainKeys), k) == std::end(kTrainKeys)) {
      throw ConfigError("train config: unknown key '" + k + "'");
    }
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("epochs", c.epochs);
    get("batch_size", c.batch_size);
    get("learning_rate", c.learning_rate);
    get("seed", c.seed);
    get("dac_steps", c.dac_steps);
    get("clip_dim", c.clip_dim);
    if (j.contains("dac_learning_rate")) {
      const auto& v = j.at("dac_learning_rate");
      c.dac_learning_rate = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
    }
    get("dac_pretrain_epochs", c.dac_pretrain_epochs);
    get("stage1_epochs", c.stage1_epochs);
    get("baseline_attributes", c.baseline_attributes);
    get("dac_hidden", c.dac_hidden);
    get("checkpoint_path", c.checkpoint_path);
    get("log_path", c.log_path);
    if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
    if (j.contains("schedule")) c.schedule = schedule_from_string(j.at("schedule").get<std::string>());
    if (j.contains("baseline")) c.baseline = baseline_from_string(j.at("baseline").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  if (j.contains("loss")) j.at("loss").get_to(c.loss);
}

// ---------------------------------------------------------------- optimizer

void Optimizer::step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size()) throw ShapeError("optimizer: one gradient per parameter required");
  ++t_;
  if (kind_ == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr_ * grads[i][k];
    }
    return;
  }
  if (m_.empty()) {
    for (Tensor* p : params) {
      m_.push_back(Tensor::zeros(p->shape()));
      v_.push_back(Tensor::zeros(p->shape()));
    }
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = grads[i][k];
      m_[i][k] = b1 * m_[i][k] + (1.0 - b1) * g;
      v_[i][k] = b2 * v_[i][k] + (1.0 - b2) * g * g;
      p[k] -= lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps);
    }
  }
}

// ---------------------------------------------------------------- log

void to_json(nlohmann::json& j, const StepRecord& r) {
  j = nlohmann::json{{"type", "step"},
                     {"step", r.step},
                     {"epoch", r.epoch},
                     {"phase", to_string(r.phase)},
                     {"batch", r.batch},
                     {"lm", r.lm},
                     {"dac", r.dac},
                     {"dim", r.dim},
                     {"grad_norm_model", r.grad_norm_model},
                     {"grad_norm_dac", r.grad_norm_dac},
                     {"aborted", r.aborted}};
  if (!r.diagnostic.empty()) j["diagnostic"] = r.diagnostic;
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = nlohmann::json{{"type", "epoch"}, {"epoch", r.epoch}, {"phase", to_string(r.phase)},
                     {"steps", r.steps}, {"aborted", r.aborted},        {"lm", r.lm},
                     {"dac", r.dac},     {"dim", r.dim}};
  if (r.eval_lm) j["eval_lm"] = *r.eval_lm;
}

void write_log_jsonl(const std::filesystem::path& path, const TrainLog& log) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << nlohmann::json{{"type", "header"}, {"frozen_checksum_before", log.checksum_before}}.dump() << "\n";
  std::size_t e = 0;
  for (const StepRecord& s : log.steps) {
    // Epoch summaries follow their last step.
    while (e < log.epochs.size() && log.epochs[e].epoch < s.epoch) out << nlohmann::json(log.epochs[e++]).dump() << "\n";
    out << nlohmann::json(s).dump() << "\n";
  }
  while (e < log.epochs.size()) out << nlohmann::json(log.epochs[e++]).dump() << "\n";
  out << nlohmann::json{{"type", "footer"}, {"frozen_checksum_after", log.checksum_after}}.dump() << "\n";
}

// ---------------------------------------------------------------- step

namespace {

std::vector<Tensor*> model_params(ModelState& state, bool adapters) {
  std::vector<Tensor*> out;
  for (NamedTensor& t : state.projector) out.push_back(&t.value);
  if (adapters) {
    for (NamedTensor& t : state.adapters) out.push_back(&t.value);
  }
  return out;
}

std::vector<Var> model_vars(const BoundModel& m, bool adapters) {
  std::vector<Var> out(m.projector);
  if (adapters) out.insert(out.end(), m.adapters.begin(), m.adapters.end());
  return out;
}

std::vector<Tensor*> dac_params(DacSet& dac) {
  std::vector<Tensor*> out;
  for (DacHead& h : dac.heads) {
    for (Tensor* t : {&h.w1, &h.b1, &h.w2, &h.b2}) out.push_back(t);
  }
  return out;
}

std::vector<Var> dac_vars(const std::vector<BoundHead>& heads) {
  std::vector<Var> out;
  for (const BoundHead& h : heads) {
    for (Var v : {h.w1, h.b1, h.w2, h.b2}) out.push_back(v);
  }
  return out;
}

std::vector<Tensor> collect(const Gradients& g, const std::vector<Var>& vars, double& norm) {
  std::vector<Tensor> out;
  double sq = 0.0;
  for (Var v : vars) {
    out.push_back(g.of(v));
    for (double x : out.back().data()) sq += x * x;
  }
  norm = std::sqrt(sq);
  return out;
}

bool finite(Var v) { return std::isfinite(v.value().item()); }

}  // namespace

Trainer::Trainer(const TrainConfig& config, StepContext context)
    : config_(config),
      ctx_(context),
      model_opt_(config.optimizer, config.learning_rate),
      dac_opt_(config.optimizer, config.dac_learning_rate.value_or(config.learning_rate)),
      stage1_opt_(config.optimizer, config.learning_rate) {
  if (!ctx_.schema || !ctx_.weights || !ctx_.class_weight) throw ConfigError("trainer: incomplete step context");
}

StepRecord Trainer::step(ModelState& state, DacSet& dac, std::span<const Sample* const> batch, Phase phase,
                         std::span<const double> sample_weights) {
  StepRecord rec;
  rec.step = steps_++;
  rec.phase = phase;
  rec.batch = batch.size();
  try {
    run_step(rec, state, dac, batch, phase, sample_weights);
  } catch (const NumericError& e) {
    // Tensor ops refuse non-finite results; the step is dropped, not the run.
    rec.aborted = true;
    rec.diagnostic = e.what();
  }
  return rec;
}

void Trainer::run_step(StepRecord& rec, ModelState& state, DacSet& dac, std::span<const Sample* const> batch,
                       Phase phase, std::span<const double> sample_weights) {
  const LossWeights& w = *ctx_.weights;
  const AttributeSchema& schema = *ctx_.schema;
  const bool dim_phase = (phase == Phase::kJoint || phase == Phase::kFrozenDac) && w.lambda_dim > 0.0;
  if (dim_phase && batch.size() < 2) throw ShapeError("train_step: batch size must be >= 2 when lambda_dim > 0");

  std::vector<const std::vector<double>*> features;
  std::vector<const std::vector<std::size_t>*> references;
  std::vector<std::vector<std::size_t>> labels(schema.size());
  for (const Sample* s : batch) {
    features.push_back(&s->features);
    references.push_back(&s->reference);
    for (std::size_t a = 0; a < schema.size(); ++a) labels[a].push_back(s->attributes.at(a));
  }

  Tape tape;
  const bool train_model = phase != Phase::kDacPretrain;
  const bool with_adapters = phase == Phase::kJoint || phase == Phase::kFrozenDac;
  BoundModel bm = bind(tape, state, Trainable{train_model, with_adapters});
  TeacherForced tf = teacher_forced(bm, features, references, sample_weights);
  Var lm = tf.loss.per_sample_mean;
  rec.lm = lm.value().item();
  if (!finite(lm)) {
    rec.aborted = true;
    rec.diagnostic = "non-finite language-model loss";
    return;
  }

  if (phase == Phase::kStage1) {
    const Gradients g = tape.backward(lm);
    const std::vector<Tensor> grads = collect(g, model_vars(bm, false), rec.grad_norm_model);
    stage1_opt_.step(model_params(state, false), grads);
    return;
  }

  Var h = pooled(bm, tf.forward);
  LossBreakdown bd;

  // Head phase: h detached inside dac_loss, so only phi receives gradient.
  const bool dac_phase = (phase == Phase::kJoint || phase == Phase::kDacPretrain) && w.lambda_dac > 0.0;
  if (dac_phase) {
    for (DacHead& head : dac.heads) update_dac_statistics(head, h.value());
    const std::size_t repeats = phase == Phase::kJoint ? config_.dac_steps : 1;
    for (std::size_t r = 0; r < repeats; ++r) {
      const std::vector<BoundHead> heads = bind_dac(tape, dac, true);
      Var obj = weighted_dac(heads, h, labels, *ctx_.class_weight, schema, w, &bd);
      if (r == 0) rec.dac = bd.dac;
      if (!finite(obj)) {
        rec.aborted = true;
        rec.diagnostic = "non-finite DAC loss";
        return;
      }
      const Gradients g = tape.backward(obj);
      const std::vector<Tensor> grads = collect(g, dac_vars(heads), rec.grad_norm_dac);
      dac_opt_.step(dac_params(dac), grads);
    }
  }
  if (phase == Phase::kDacPretrain) return;

  // Model phase against the (possibly just updated) heads, bound as constants.
  Var obj = scale(lm, w.lambda_lm);
  if (dim_phase) {
    const std::vector<BoundHead> heads = bind_dac(tape, dac, false);
    obj = add(obj, weighted_dim(heads, h, labels, schema, w, &bd, config_.clip_dim));
    rec.dim = bd.dim;
  }
  if (!finite(obj)) {
    rec.aborted = true;
    rec.diagnostic = dac_phase ? "non-finite model objective after the head update" : "non-finite model objective";
    return;
  }
  const Gradients g = tape.backward(obj);
  const std::vector<Tensor> grads = collect(g, model_vars(bm, true), rec.grad_norm_model);
  model_opt_.step(model_params(state, true), grads);
  return;
}

// ---------------------------------------------------------------- dataset helpers

void check_dataset(const Dataset& dataset, const ModelConfig& model) {
  if (dataset.empty()) throw DataError("dataset is empty");
  dataset.schema.validate();
  const std::size_t max_ref = model.max_seq - model.prompt_length();
  for (const Sample& s : dataset.samples) {
    if (s.attributes.size() != dataset.schema.size()) {
      throw DataError("sample " + s.id + ": expected " + std::to_string(dataset.schema.size()) + " attributes");
    }
    for (std::size_t a = 0; a < s.attributes.size(); ++a) {
      if (s.attributes[a] >= dataset.schema.at(a).group_count()) {
        throw DataError("sample " + s.id + ": group index out of range for " + dataset.schema.at(a).name);
      }
    }
    if (s.features.size() != model.feature_dim) {
      throw DataError("sample " + s.id + ": feature length " + std::to_string(s.features.size()) + ", model expects " +
                      std::to_string(model.feature_dim));
    }
    if (s.reference.empty()) throw DataError("sample " + s.id + ": empty reference");
    if (s.reference.size() > max_ref) throw DataError("sample " + s.id + ": reference longer than max_seq allows");
    for (std::size_t t : s.reference) {
      if (t >= model.vocab_size) throw DataError("sample " + s.id + ": token outside the vocabulary");
    }
  }
}

std::vector<std::vector<std::size_t>> attribute_labels(const Dataset& dataset) {
  std::vector<std::vector<std::size_t>> out(dataset.schema.size());
  for (const Sample& s : dataset.samples) {
    for (std::size_t a = 0; a < out.size(); ++a) out[a].push_back(s.attributes.at(a));
  }
  return out;
}

namespace {

std::vector<std::size_t> group_counts(const Dataset& dataset, std::size_t a) {
  std::vector<std::size_t> counts(dataset.schema.at(a).group_count(), 0);
  for (const Sample& s : dataset.samples) ++counts.at(s.attributes.at(a));
  return counts;
}

}  // namespace

std::vector<double> reweight_factors(const Dataset& dataset, std::span<const std::string> attributes) {
  if (dataset.empty()) throw DataError("reweight: dataset is empty");
  const double n = static_cast<double>(dataset.size());
  std::vector<double> m(dataset.size(), 1.0);
  for (const std::string& name : attributes) {
    const std::size_t a = dataset.schema.require(name);
    const std::vector<std::size_t> counts = group_counts(dataset, a);
    const double groups = static_cast<double>(counts.size());
    for (std::size_t g = 0; g < counts.size(); ++g) {
      if (counts[g] == 0) throw DataError("reweight: group '" + dataset.schema.at(a).groups[g] + "' is empty");
    }
    for (std::size_t i = 0; i < m.size(); ++i) {
      m[i] *= n / (groups * static_cast<double>(counts[dataset.samples[i].attributes[a]]));
    }
  }
  const double mean = std::accumulate(m.begin(), m.end(), 0.0) / n;
  for (double& x : m) x /= mean;
  return m;
}

std::vector<std::size_t> resample_indices(const Dataset& dataset, const std::string& attribute, std::uint64_t seed) {
  if (dataset.empty()) throw DataError("resample: dataset is empty");
  const std::size_t a = dataset.schema.require(attribute);
  const std::size_t groups = dataset.schema.at(a).group_count();
  std::vector<std::vector<std::size_t>> members(groups);
  for (std::size_t i = 0; i < dataset.size(); ++i) members[dataset.samples[i].attributes[a]].push_back(i);
  for (std::size_t g = 0; g < groups; ++g) {
    if (members[g].empty()) throw DataError("resample: group '" + dataset.schema.at(a).groups[g] + "' is empty");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  out.reserve(dataset.size());
  const std::size_t base = dataset.size() / groups, extra = dataset.size() % groups;
  for (std::size_t g = 0; g < groups; ++g) {
    std::uniform_int_distribution<std::size_t> pick(0, members[g].size() - 1);
    const std::size_t count = base + (g < extra ? 1 : 0);
    for (std::size_t k = 0; k < count; ++k) out.push_back(members[g][pick(rng)]);
  }
  return out;
}

// ---------------------------------------------------------------- run

namespace {

double eval_loss(const ModelState& state, const Dataset& eval) {
  double total = 0.0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t b = 0; b < eval.size(); b += kChunk) {
    const std::size_t e = std::min(eval.size(), b + kChunk);
    std::vector<const std::vector<double>*> f;
    std::vector<const std::vector<std::size_t>*> r;
    for (std::size_t i = b; i < e; ++i) {
      f.push_back(&eval.samples[i].features);
      r.push_back(&eval.samples[i].reference);
    }
    Tape tape(false);
    BoundModel bm = bind(tape, state, Trainable{false, false});
    total += teacher_forced(bm, f, r).loss.total.value().item();
  }
  return total / static_cast<double>(eval.size());
}

}  // namespace

TrainResult train_run(const TrainConfig& config, ModelState initial, const Dataset& train, const Dataset* eval) {
  config.validate();
  check_dataset(train, initial.config);
  if (eval) check_dataset(*eval, initial.config);
  const LossWeights& w = config.loss;
  for (const auto& [name, value] : w.attribute) train.schema.require(name);
  for (const std::string& name : config.baseline_attributes) {
    if (config.baseline != Baseline::kNone) train.schema.require(name);
  }

  const AttributeSchema& schema = train.schema;
  std::vector<std::vector<double>> cw;
  for (std::size_t a = 0; a < schema.size(); ++a) {
    const std::vector<std::size_t> counts = group_counts(train, a);
    if (w.lambda_dac > 0.0) {
      cw.push_back(class_weights(counts));
    } else {
      cw.emplace_back(counts.size(), 1.0);
    }
  }

  TrainResult res{std::move(initial), {}, {}};
  res.dac = init_dac(schema, res.state.config.d_model, config.dac_hidden, config.seed ^ 0xdac0dac0dac0ULL);
  res.log.checksum_before = frozen_checksum(res.state);

  Trainer trainer(config, StepContext{&schema, &w, &cw});
  std::mt19937_64 rng(config.seed);
  std::vector<double> multipliers;
  if (config.baseline == Baseline::kReweight) multipliers = reweight_factors(train, config.baseline_attributes);

  std::size_t epoch = 0;
  auto run_epoch = [&](Phase phase) {
    std::vector<std::size_t> order;
    if (config.baseline == Baseline::kResample) {
      order = resample_indices(train, config.baseline_attributes.front(), config.seed + 7919 * (epoch + 1));
    } else {
      order.resize(train.size());
      std::iota(order.begin(), order.end(), 0);
    }
    std::shuffle(order.begin(), order.end(), rng);

    EpochRecord er;
    er.epoch = epoch;
    er.phase = phase;
    const std::size_t n_attr = schema.size();
    er.dac.assign(n_attr, 0.0);
    er.dim.assign(n_attr, 0.0);
    std::size_t n_dac = 0, n_dim = 0;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      const std::size_t e = std::min(order.size(), b + config.batch_size);
      // A trailing single sample cannot form a negative pair.
      if (e - b < 2 && config.batch_size >= 2) break;
      std::vector<const Sample*> batch;
      std::vector<double> sw;
      for (std::size_t k = b; k < e; ++k) {
        batch.push_back(&train.samples[order[k]]);
        if (!multipliers.empty()) sw.push_back(multipliers[order[k]]);
      }
      StepRecord rec = trainer.step(res.state, res.dac, batch, phase, sw);
      rec.epoch = epoch;
      ++er.steps;
      if (rec.aborted) {
        ++er.aborted;
      } else {
        er.lm += rec.lm;
        if (!rec.dac.empty()) {
          ++n_dac;
          for (std::size_t a = 0; a < n_attr; ++a) er.dac[a] += rec.dac[a];
        }
        if (!rec.dim.empty()) {
          ++n_dim;
          for (std::size_t a = 0; a < n_attr; ++a) er.dim[a] += rec.dim[a];
        }
      }
      res.log.steps.push_back(std::move(rec));
    }
    const std::size_t ok = er.steps - er.aborted;
    if (ok > 0) er.lm /= static_cast<double>(ok);
    for (double& x : er.dac) x = n_dac ? x / static_cast<double>(n_dac) : 0.0;
    for (double& x : er.dim) x = n_dim ? x / static_cast<double>(n_dim) : 0.0;
    if (n_dac == 0) er.dac.clear();
    if (n_dim == 0) er.dim.clear();
    if (eval) er.eval_lm = eval_loss(res.state, *eval);
    res.log.epochs.push_back(std::move(er));
    ++epoch;
  };

  if (config.epochs > 0) {
    for (std::size_t e = 0; e < config.stage1_epochs; ++e) run_epoch(Phase::kStage1);
    if (config.schedule == Schedule::kPretrainDacThenFreeze) {
      for (std::size_t e = 0; e < config.dac_pretrain_epochs; ++e) run_epoch(Phase::kDacPretrain);
      for (std::size_t e = 0; e < config.epochs; ++e) run_epoch(Phase::kFrozenDac);
    } else {
      for (std::size_t e = 0; e < config.epochs; ++e) run_epoch(Phase::kJoint);
    }
  }

  res.log.checksum_after = frozen_checksum(res.state);
  if (res.log.checksum_after != res.log.checksum_before) throw NumericError("training modified the frozen backbone");
  return res;
}

// ---------------------------------------------------------------- probing

Tensor pooled_states(const ModelState& state, const Dataset& dataset, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("pooled_states: batch_size must be positive");
  const std::size_t d = state.config.d_model;
  Tensor out = Tensor::zeros({dataset.size(), d});
  for (std::size_t b = 0; b < dataset.size(); b += batch_size) {
    const std::size_t e = std::min(dataset.size(), b + batch_size);
    std::vector<const std::vector<double>*> f;
    std::vector<const std::vector<std::size_t>*> r;
    for (std::size_t i = b; i < e; ++i) {
      f.push_back(&dataset.samples[i].features);
      r.push_back(&dataset.samples[i].reference);
    }
    Tape tape(false);
    BoundModel bm = bind(tape, state, Trainable{false, false});
    TeacherForced tf = teacher_forced(bm, f, r);
    const Tensor h = pooled(bm, tf.forward).value();
    std::copy(h.data().begin(), h.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * d));
  }
  return out;
}

namespace {

Tensor rows_of(const Tensor& m, std::span<const std::size_t> idx) {
  Tensor out = Tensor::zeros({idx.size(), m.cols()});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out.at(r, c) = m.at(idx[r], c);
  }
  return out;
}

double accuracy(const DacHead& head, const Tensor& h, std::span<const std::size_t> labels) {
  const Tensor p = dac_forward(head, h);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::span<const double> row(p.data().data() + i * p.cols(), p.cols());
    if (greedy_pick(row) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

void require_two_classes(std::span<const std::size_t> labels, const std::string& attr, const char* split) {
  if (labels.empty()) throw DataError(std::string("probe: empty ") + split + " split");
  for (std::size_t l : labels) {
    if (l != labels.front()) return;
  }
  throw DataError("probe: " + std::string(split) + " split holds a single class for " + attr);
}

}  // namespace

std::vector<ProbeResult> probe_states(const Tensor& train_h, const std::vector<std::vector<std::size_t>>& train_labels,
                                      const Tensor& test_h, const std::vector<std::vector<std::size_t>>& test_labels,
                                      const AttributeSchema& schema, const ProbeConfig& config) {
  if (train_h.cols() != test_h.cols()) throw ShapeError("probe: train and test states differ in width");
  if (train_labels.size() != schema.size() || test_labels.size() != schema.size()) {
    throw ShapeError("probe: one label vector per attribute required");
  }
  if (!(config.validation_fraction >= 0.0 && config.validation_fraction < 1.0)) {
    throw ConfigError("probe: validation_fraction must lie in [0, 1)");
  }
  const std::size_t d = train_h.cols();

  // Standardize with train statistics.
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (std::size_t i = 0; i < train_h.rows(); ++i) {
    for (std::size_t c = 0; c < d; ++c) mean[c] += train_h.at(i, c);
  }
  for (double& m : mean) m /= static_cast<double>(train_h.rows());
  for (std::size_t i = 0; i < train_h.rows(); ++i) {
    for (std::size_t c = 0; c < d; ++c) sd[c] += std::pow(train_h.at(i, c) - mean[c], 2);
  }
  for (double& s : sd) {
    s = std::sqrt(s / static_cast<double>(train_h.rows()));
    if (s < 1e-12) s = 1.0;
  }
  auto standardize = [&](const Tensor& h) {
    Tensor out = h;
    for (std::size_t i = 0; i < h.rows(); ++i) {
      for (std::size_t c = 0; c < d; ++c) out.at(i, c) = (h.at(i, c) - mean[c]) / sd[c];
    }
    return out;
  };
  const Tensor tr = standardize(train_h);
  const Tensor te = standardize(test_h);

  std::vector<std::size_t> order(tr.rows());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_val = static_cast<std::size_t>(config.validation_fraction * static_cast<double>(order.size()));
  std::vector<std::size_t> fit_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::sort(fit_idx.begin(), fit_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  const Tensor fit_h = rows_of(tr, fit_idx);
  const Tensor val_h = rows_of(tr, val_idx);

  std::vector<ProbeResult> out;
  for (std::size_t a = 0; a < schema.size(); ++a) {
    const Attribute& attr = schema.at(a);
    require_two_classes(train_labels[a], attr.name, "train");
    require_two_classes(test_labels[a], attr.name, "test");
    std::vector<std::size_t> fit_y, val_y;
    for (std::size_t i : fit_idx) fit_y.push_back(train_labels[a][i]);
    for (std::size_t i : val_idx) val_y.push_back(train_labels[a][i]);

    AttributeSchema one;
    one.attributes = {attr};
    DacHead head = init_dac(one, d, config.hidden, config.seed + 101 * (a + 1)).heads.front();
    DacHead best = head;
    double best_val = -1.0;
    const std::vector<double> unit(attr.group_count(), 1.0);
    Optimizer opt(OptimizerKind::kAdam, config.learning_rate);
    for (std::size_t s = 0; s <= config.steps; ++s) {
      if (!val_y.empty() && (s % 10 == 0 || s == config.steps)) {
        const double v = accuracy(head, val_h, val_y);
        if (v > best_val) {
          best_val = v;
          best = head;
        }
      }
      if (s == config.steps) break;
      Tape tape;
      const BoundHead bh{tape.leaf(head.w1), tape.leaf(head.b1), tape.leaf(head.w2), tape.leaf(head.b2), {}, {}};
      Var loss = dac_loss(bh, tape.constant(fit_h), fit_y, unit);
      const Gradients g = tape.backward(loss);
      const std::vector<Tensor> grads = {g.of(bh.w1), g.of(bh.b1), g.of(bh.w2), g.of(bh.b2)};
      Tensor* params[] = {&head.w1, &head.b1, &head.w2, &head.b2};
      opt.step(params, grads);
    }
    if (val_y.empty()) best = head;

    ProbeResult r;
    r.attribute = attr.name;
    r.accuracy = accuracy(best, te, test_labels[a]);
    r.chance = 1.0 / static_cast<double>(attr.group_count());
    std::vector<std::size_t> counts(attr.group_count(), 0);
    for (std::size_t l : train_labels[a]) ++counts.at(l);
    const std::size_t major =
        static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    r.majority = static_cast<double>(std::count(test_labels[a].begin(), test_labels[a].end(), major)) /
                 static_cast<double>(test_labels[a].size());
    out.push_back(r);
  }
  return out;
}

std::vector<ProbeResult> probe_leakage(const ModelState& state, const Dataset& train, const Dataset& test,
                                       const ProbeConfig& config) {
  return probe_states(pooled_states(state, train), attribute_labels(train), pooled_states(state, test),
                      attribute_labels(test), train.schema, config);
}

std::vector<ScoredPair> predict(const ModelState& state, const Dataset& dataset, std::size_t max_new,
                                bool with_latent, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("predict: batch_size must be positive");
  std::vector<ScoredPair> out;
  out.reserve(dataset.size());
  const Tensor h = with_latent ? pooled_states(state, dataset, batch_size) : Tensor();
  for (std::size_t b = 0; b < dataset.size(); b += batch_size) {
    const std::size_t e = std::min(dataset.size(), b + batch_size);
    std::vector<const std::vector<double>*> f;
    for (std::size_t i = b; i < e; ++i) f.push_back(&dataset.samples[i].features);
    std::vector<std::vector<std::size_t>> gen = generate(state, f, max_new);
    for (std::size_t i = b; i < e; ++i) {
      const Sample& s = dataset.samples[i];
      ScoredPair p{s.id, std::move(gen[i - b]), s.reference, s.attributes, std::nullopt, s.labels};
      if (with_latent) {
        const std::size_t d = h.cols();
        p.latent = std::vector<double>(h.data().begin() + static_cast<std::ptrdiff_t>(i * d),
                                       h.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

// ---------------------------------------------------------------- checkpoint

namespace {
constexpr const char* kCheckpointFormat = "mifair-checkpoint";
constexpr int kCheckpointVersion = 1;
}  // namespace

nlohmann::json checkpoint_to_json(const ModelState& state, const DacSet& dac, std::uint64_t seed) {
  return nlohmann::json{{"format", kCheckpointFormat},
                        {"version", kCheckpointVersion},
                        {"seed", seed},
                        {"model", model_to_json(state)},
                        {"dac", dac}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat) throw DataError("checkpoint: unknown format");
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw DataError("checkpoint: unsupported version " + j.at("version").dump());
    }
    Checkpoint c{model_from_json(j.at("model")), j.at("dac").get<DacSet>(), j.at("seed").get<std::uint64_t>()};
    for (const DacHead& h : c.dac.heads) {
      if (h.w1.cols() != c.state.config.d_model) throw DataError("checkpoint: DAC head width differs from d_model");
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const ModelState& state, const DacSet& dac,
                     std::uint64_t seed) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << checkpoint_to_json(state, dac, seed).dump() << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace mifair
