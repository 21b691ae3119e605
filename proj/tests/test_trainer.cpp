#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "doctest.h"
#include "mifair/data.hpp"
#include "mifair/error.hpp"
#include "mifair/grad_check.hpp"
#include "mifair/trainer.hpp"

using namespace mifair;

namespace {

ModelConfig toy_model() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_feature_tokens = 2;
  c.lora_rank = 2;
  c.init_seed = 5;
  return c;
}

Dataset toy_data(std::size_t n, std::uint64_t seed) {
  SynthConfig s;
  s.n_samples = n;
  s.seed = seed;
  return synth_generate(s).dataset;
}

// Two-group dataset with the given counts on one attribute.
Dataset grouped(std::vector<std::size_t> counts) {
  Dataset d;
  std::vector<std::string> names;
  for (std::size_t g = 0; g < counts.size(); ++g) names.push_back("g" + std::to_string(g));
  d.schema.attributes = {{"a", names, {}}, {"b", {"x", "y"}, {}}};
  std::size_t id = 0;
  for (std::size_t g = 0; g < counts.size(); ++g) {
    for (std::size_t k = 0; k < counts[g]; ++k) {
      d.samples.push_back({"s" + std::to_string(id), {}, {g, id % 2}, {2}, {}, ""});
      ++id;
    }
  }
  return d;
}

std::vector<const Sample*> batch_of(const Dataset& d, std::size_t n) {
  std::vector<const Sample*> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(&d.samples[i]);
  return out;
}

std::vector<Tensor> trainable(const ModelState& s) {
  std::vector<Tensor> out;
  for (const auto& t : s.projector) out.push_back(t.value);
  for (const auto& t : s.adapters) out.push_back(t.value);
  return out;
}

std::vector<Tensor> head_weights(const DacSet& d) {
  std::vector<Tensor> out;
  for (const DacHead& h : d.heads) {
    for (const Tensor* t : {&h.w1, &h.b1, &h.w2, &h.b2}) out.push_back(*t);
  }
  return out;
}

void randomize(ModelState& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 0.2);
  for (auto& t : s.adapters) {
    for (double& v : t.value.data()) v = g(rng);
  }
}

struct Fixture {
  Dataset data = toy_data(40, 3);
  ModelState state = init_model(toy_model());
  DacSet dac;
  std::vector<std::vector<double>> cw;
  Fixture() {
    randomize(state, 9);
    dac = init_dac(data.schema, state.config.d_model, 6, 4);
    for (std::size_t a = 0; a < data.schema.size(); ++a) {
      std::vector<std::size_t> counts(data.schema.at(a).group_count(), 0);
      for (const Sample& s : data.samples) ++counts[s.attributes[a]];
      for (auto& c : counts) c = std::max<std::size_t>(c, 1);
      cw.push_back(class_weights(counts));
    }
  }
};

// Per-sample-mean LM loss gradient w.r.t. projector and adapters.
std::vector<Tensor> lm_gradient(const ModelState& s, std::span<const Sample* const> batch) {
  Tape tape;
  BoundModel m = bind(tape, s, {true, true});
  std::vector<const std::vector<double>*> f;
  std::vector<const std::vector<std::size_t>*> r;
  for (const Sample* x : batch) {
    f.push_back(&x->features);
    r.push_back(&x->reference);
  }
  const Gradients g = tape.backward(teacher_forced(m, f, r).loss.per_sample_mean);
  std::vector<Tensor> out;
  for (Var v : m.projector) out.push_back(g.of(v));
  for (Var v : m.adapters) out.push_back(g.of(v));
  return out;
}

}  // namespace

TEST_CASE("train config") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  const nlohmann::json j = c;
  CHECK(nlohmann::json(j.get<TrainConfig>()) == j);

  nlohmann::json bad = j;
  bad["momentum"] = 0.9;
  CHECK_THROWS_AS(bad.get<TrainConfig>(), ConfigError);
  bad = j;
  bad["schedule"] = "alternating";
  CHECK_THROWS_AS(bad.get<TrainConfig>(), ConfigError);

  c.loss.lambda_dim = 1.0;
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.loss.lambda_dim = 0.0;
  CHECK_NOTHROW(c.validate());
  c.learning_rate = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  CHECK(schedule_from_string("pretrain-dac-then-freeze") == Schedule::kPretrainDacThenFreeze);
  CHECK(to_string(Baseline::kResample) == "resample");
  CHECK_THROWS_AS(optimizer_from_string("rmsprop"), ConfigError);
}

TEST_CASE("train_step contracts") {
  Fixture fx;
  const AttributeSchema& schema = fx.data.schema;
  const auto batch = batch_of(fx.data, 6);

  SUBCASE("fairness lambdas at zero: phi bit-identical, theta/psi follow the LM gradient") {
    TrainConfig c;
    c.optimizer = OptimizerKind::kSgd;
    c.learning_rate = 0.05;
    const LossWeights w{1.0, 0.0, 0.0, {}};
    Trainer t(c, {&schema, &w, &fx.cw});
    const DacSet before = fx.dac;
    const ModelState s0 = fx.state;
    const std::vector<Tensor> g = lm_gradient(s0, batch);
    const StepRecord rec = t.step(fx.state, fx.dac, batch, Phase::kJoint);
    CHECK_FALSE(rec.aborted);
    CHECK(nlohmann::json(fx.dac) == nlohmann::json(before));
    const std::vector<Tensor> p0 = trainable(s0), p1 = trainable(fx.state);
    for (std::size_t i = 0; i < p0.size(); ++i) {
      for (std::size_t k = 0; k < p0[i].size(); ++k) CHECK(p1[i][k] == p0[i][k] - 0.05 * g[i][k]);
    }
    CHECK(frozen_checksum(fx.state) == frozen_checksum(s0));
  }

  SUBCASE("zero learning rate leaves every trained weight unchanged") {
    for (OptimizerKind kind : {OptimizerKind::kSgd, OptimizerKind::kAdam}) {
      TrainConfig c;
      c.optimizer = kind;
      c.learning_rate = 0.0;
      const LossWeights w{1.0, 1.0, 1.0, {}};
      Trainer t(c, {&schema, &w, &fx.cw});
      const ModelState s0 = fx.state;
      const std::vector<Tensor> h0 = head_weights(fx.dac);
      const StepRecord rec = t.step(fx.state, fx.dac, batch, Phase::kJoint);
      CHECK_FALSE(rec.aborted);
      CHECK(model_to_json(fx.state) == model_to_json(s0));
      const std::vector<Tensor> h1 = head_weights(fx.dac);
      for (std::size_t i = 0; i < h0.size(); ++i) CHECK(h1[i] == h0[i]);
    }
  }

  SUBCASE("SGD deltas equal eta times finite-difference-verified gradients") {
    TrainConfig c;
    c.optimizer = OptimizerKind::kSgd;
    c.learning_rate = 0.1;
    c.dac_steps = 1;
    c.clip_dim = false;
    const LossWeights w{0.8, 0.6, 0.7, {{"age", 0.5}}};
    Trainer t(c, {&schema, &w, &fx.cw});
    const ModelState s0 = fx.state;
    const DacSet d0 = fx.dac;

    std::vector<const std::vector<double>*> f;
    std::vector<const std::vector<std::size_t>*> r;
    std::vector<std::vector<std::size_t>> labels(schema.size());
    for (const Sample* x : batch) {
      f.push_back(&x->features);
      r.push_back(&x->reference);
      for (std::size_t a = 0; a < schema.size(); ++a) labels[a].push_back(x->attributes[a]);
    }
    Tensor h0;
    {
      Tape tape(false);
      BoundModel m = bind(tape, s0, {false, false});
      h0 = pooled(m, teacher_forced(m, f, r).forward).value();
    }
    DacSet d_stats = d0;
    for (DacHead& h : d_stats.heads) update_dac_statistics(h, h0);

    // Phase 2: phi on the detached states.
    ScalarFn dac_obj = [&](Tape& tape, std::span<const Var> p) {
      std::vector<BoundHead> heads = bind_dac(tape, d_stats, false);
      for (std::size_t a = 0; a < heads.size(); ++a) {
        heads[a].w1 = p[4 * a];
        heads[a].b1 = p[4 * a + 1];
        heads[a].w2 = p[4 * a + 2];
        heads[a].b2 = p[4 * a + 3];
      }
      return weighted_dac(heads, tape.constant(h0), labels, fx.cw, schema, w);
    };
    const std::vector<Tensor> phi0 = head_weights(d0);
    CHECK(grad_check(dac_obj, phi0, 1e-5).max_rel_error <= 1e-4);
    std::vector<Tensor> g_phi;
    {
      Tape tape;
      std::vector<Var> leaves;
      for (const Tensor& x : phi0) leaves.push_back(tape.leaf(x));
      const Gradients g = tape.backward(dac_obj(tape, leaves));
      for (Var v : leaves) g_phi.push_back(g.of(v));
    }

    const StepRecord rec = t.step(fx.state, fx.dac, batch, Phase::kJoint);
    REQUIRE_FALSE(rec.aborted);
    const std::vector<Tensor> phi1 = head_weights(fx.dac);
    for (std::size_t i = 0; i < phi0.size(); ++i) {
      for (std::size_t k = 0; k < phi0[i].size(); ++k) CHECK(phi1[i][k] == phi0[i][k] - 0.1 * g_phi[i][k]);
    }

    // Phase 3: theta/psi against the updated heads.
    ScalarFn model_obj = [&](Tape& tape, std::span<const Var> p) {
      BoundModel m = bind(tape, s0, {false, false});
      std::size_t k = 0;
      for (auto& v : m.projector) v = p[k++];
      for (auto& v : m.adapters) v = p[k++];
      TeacherForced tf = teacher_forced(m, f, r);
      const std::vector<BoundHead> heads = bind_dac(tape, fx.dac, false);
      return add(scale(tf.loss.per_sample_mean, w.lambda_lm),
                 weighted_dim(heads, pooled(m, tf.forward), labels, schema, w));
    };
    const std::vector<Tensor> theta0 = trainable(s0);
    CHECK(grad_check(model_obj, theta0, 1e-5).max_rel_error <= 1e-4);
    std::vector<Tensor> g_theta;
    {
      Tape tape;
      std::vector<Var> leaves;
      for (const Tensor& x : theta0) leaves.push_back(tape.leaf(x));
      const Gradients g = tape.backward(model_obj(tape, leaves));
      for (Var v : leaves) g_theta.push_back(g.of(v));
    }
    const std::vector<Tensor> theta1 = trainable(fx.state);
    for (std::size_t i = 0; i < theta0.size(); ++i) {
      for (std::size_t k = 0; k < theta0[i].size(); ++k) {
        CHECK(std::abs(theta1[i][k] - (theta0[i][k] - 0.1 * g_theta[i][k])) <= 1e-14);
      }
    }
    CHECK(rec.dac.size() == schema.size());
    CHECK(rec.dim.size() == schema.size());
    CHECK(rec.grad_norm_model > 0.0);
    CHECK(rec.grad_norm_dac > 0.0);
  }

  SUBCASE("frozen-DAC and pretraining phases touch one side only") {
    TrainConfig c;
    const LossWeights w{1.0, 1.0, 1.0, {}};
    Trainer t(c, {&schema, &w, &fx.cw});
    const DacSet d0 = fx.dac;
    const ModelState s0 = fx.state;
    t.step(fx.state, fx.dac, batch, Phase::kFrozenDac);
    CHECK(nlohmann::json(fx.dac) == nlohmann::json(d0));
    CHECK(model_to_json(fx.state) != model_to_json(s0));

    const ModelState s1 = fx.state;
    t.step(fx.state, fx.dac, batch, Phase::kDacPretrain);
    CHECK(model_to_json(fx.state) == model_to_json(s1));
    CHECK(head_weights(fx.dac)[0] != head_weights(d0)[0]);
  }

  SUBCASE("stage 1 moves the projector only") {
    TrainConfig c;
    const LossWeights w{1.0, 0.0, 0.0, {}};
    Trainer t(c, {&schema, &w, &fx.cw});
    const ModelState s0 = fx.state;
    t.step(fx.state, fx.dac, batch, Phase::kStage1);
    for (std::size_t i = 0; i < s0.adapters.size(); ++i) CHECK(fx.state.adapters[i].value == s0.adapters[i].value);
    CHECK(fx.state.projector[0].value != s0.projector[0].value);
  }

  SUBCASE("non-finite loss aborts the step with a diagnostic") {
    TrainConfig c;
    const LossWeights w{1.0, 1.0, 1.0, {}};
    Trainer t(c, {&schema, &w, &fx.cw});
    fx.state.projector[0].value[0] = std::nan("");
    const ModelState s0 = fx.state;
    const DacSet d0 = fx.dac;
    const StepRecord rec = t.step(fx.state, fx.dac, batch, Phase::kJoint);
    CHECK(rec.aborted);
    CHECK_FALSE(rec.diagnostic.empty());
    CHECK(head_weights(fx.dac)[0] == head_weights(d0)[0]);
    CHECK(fx.state.adapters[0].value == s0.adapters[0].value);
  }
}

TEST_CASE("train_run") {
  const Dataset data = toy_data(40, 1);
  TrainConfig c;
  c.epochs = 1;
  c.batch_size = 8;
  c.loss.lambda_dim = 1.0;
  c.loss.lambda_dac = 1.0;
  c.seed = 3;

  SUBCASE("zero epochs returns the initial state and an empty log") {
    c.epochs = 0;
    const ModelState init = init_model(toy_model());
    const TrainResult r = train_run(c, init, data);
    CHECK(model_to_json(r.state) == model_to_json(init));
    CHECK(r.log.steps.empty());
    CHECK(r.log.epochs.empty());
  }
  SUBCASE("identical seeds give identical checkpoints and logs; the backbone is untouched") {
    const TrainResult a = train_run(c, init_model(toy_model()), data);
    const TrainResult b = train_run(c, init_model(toy_model()), data);
    CHECK(checkpoint_to_json(a.state, a.dac, 3).dump() == checkpoint_to_json(b.state, b.dac, 3).dump());
    REQUIRE(a.log.steps.size() == b.log.steps.size());
    for (std::size_t i = 0; i < a.log.steps.size(); ++i) {
      CHECK(nlohmann::json(a.log.steps[i]) == nlohmann::json(b.log.steps[i]));
      CHECK(a.log.steps[i].step == i);
    }
    CHECK(a.log.checksum_before == a.log.checksum_after);
    CHECK(a.log.checksum_after == frozen_checksum(init_model(toy_model())));
    // stage 1 + 1 joint epoch, 5 batches each
    CHECK(a.log.epochs.size() == 2);
    CHECK(a.log.steps.size() == 10);
  }
  SUBCASE("the frozen schedule pretrains the heads first") {
    c.schedule = Schedule::kPretrainDacThenFreeze;
    c.dac_pretrain_epochs = 2;
    const TrainResult r = train_run(c, init_model(toy_model()), data);
    REQUIRE(r.log.epochs.size() == 4);
    CHECK(r.log.epochs[1].phase == Phase::kDacPretrain);
    CHECK(r.log.epochs[3].phase == Phase::kFrozenDac);
    CHECK(r.log.checksum_before == r.log.checksum_after);
  }
  SUBCASE("baselines run and keep the backbone") {
    for (Baseline b : {Baseline::kReweight, Baseline::kResample}) {
      c.baseline = b;
      c.loss = LossWeights{};
      const TrainResult r = train_run(c, init_model(toy_model()), data);
      CHECK(r.log.checksum_before == r.log.checksum_after);
    }
  }
  SUBCASE("a trailing single sample is dropped") {
    c.batch_size = 13;  // 40 = 3 * 13 + 1
    c.stage1_epochs = 0;
    const TrainResult r = train_run(c, init_model(toy_model()), data);
    CHECK(r.log.steps.size() == 3);
  }
  SUBCASE("dataset and schema mismatches fail before any step") {
    Dataset bad = data;
    bad.samples[3].features.pop_back();
    CHECK_THROWS_AS(train_run(c, init_model(toy_model()), bad), DataError);
    c.loss.attribute = {{"height", 1.0}};
    CHECK_THROWS_AS(train_run(c, init_model(toy_model()), data), ConfigError);
  }
  SUBCASE("log file") {
    const TrainResult r = train_run(c, init_model(toy_model()), data);
    const auto path = std::filesystem::temp_directory_path() / "mifair_test_log.jsonl";
    write_log_jsonl(path, r.log);
    std::ifstream in(path);
    std::string line;
    std::vector<nlohmann::json> lines;
    while (std::getline(in, line)) lines.push_back(nlohmann::json::parse(line));
    std::filesystem::remove(path);
    REQUIRE(lines.size() == r.log.steps.size() + r.log.epochs.size() + 2);
    CHECK(lines.front()["type"] == "header");
    CHECK(lines.back()["type"] == "footer");
    CHECK(lines[1]["type"] == "step");
  }
}

TEST_CASE("reweight_factors") {
  const std::vector<std::string> a{"a"};
  SUBCASE("balanced groups give ones") {
    for (double m : reweight_factors(grouped({20, 20, 20}), a)) CHECK(std::abs(m - 1.0) < 1e-12);
    const std::vector<std::string> both{"a", "b"};
    for (double m : reweight_factors(grouped({10, 10}), both)) CHECK(std::abs(m - 1.0) < 1e-12);
  }
  SUBCASE("75/25 gives 2/3 and 2 with mean one") {
    const Dataset d = grouped({75, 25});
    const std::vector<double> m = reweight_factors(d, a);
    double sum = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      CHECK(std::abs(m[i] - (d.samples[i].attributes[0] == 0 ? 2.0 / 3.0 : 2.0)) < 1e-12);
      sum += m[i];
    }
    CHECK(std::abs(sum - 100.0) < 1e-9);
  }
  SUBCASE("two attributes multiply, then renormalize") {
    const Dataset d = grouped({30, 10});
    const std::vector<std::string> both{"a", "b"};
    const std::vector<double> m = reweight_factors(d, both);
    double sum = 0.0;
    for (double x : m) sum += x;
    CHECK(std::abs(sum - 40.0) < 1e-9);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(reweight_factors(grouped({5, 0}), a), DataError);
    const std::vector<std::string> unknown{"zz"};
    CHECK_THROWS_AS(reweight_factors(grouped({5, 5}), unknown), ConfigError);
  }
  SUBCASE("unit multipliers leave the weighted LM loss unchanged") {
    const Dataset d = toy_data(8, 2);
    ModelState s = init_model(toy_model());
    std::vector<const std::vector<double>*> f;
    std::vector<const std::vector<std::size_t>*> r;
    for (const Sample& x : d.samples) {
      f.push_back(&x.features);
      r.push_back(&x.reference);
    }
    const std::vector<double> ones(d.size(), 1.0);
    Tape tape(false);
    BoundModel m = bind(tape, s, {false, false});
    const double plain = teacher_forced(m, f, r).loss.per_sample_mean.value().item();
    const double weighted = teacher_forced(m, f, r, ones).loss.per_sample_mean.value().item();
    CHECK(std::abs(plain - weighted) < 1e-9);
  }
}

TEST_CASE("resample_indices") {
  auto counts_of = [](const Dataset& d, const std::vector<std::size_t>& idx) {
    std::map<std::size_t, std::size_t> c;
    for (std::size_t i : idx) ++c[d.samples[i].attributes[0]];
    return c;
  };
  SUBCASE("90/10 becomes 50/50") {
    const Dataset d = grouped({90, 10});
    const auto idx = resample_indices(d, "a", 7);
    CHECK(idx.size() == 100);
    const auto c = counts_of(d, idx);
    CHECK(c.at(0) == 50);
    CHECK(c.at(1) == 50);
  }
  SUBCASE("uneven totals stay within one") {
    const Dataset d = grouped({40, 3, 8});
    const auto c = counts_of(d, resample_indices(d, "a", 1));
    CHECK(c.at(0) == 17);
    CHECK(c.at(1) == 17);
    CHECK(c.at(2) == 17);
    const Dataset e = grouped({50, 3});
    const auto ce = counts_of(e, resample_indices(e, "a", 1));
    CHECK(std::max(ce.at(0), ce.at(1)) - std::min(ce.at(0), ce.at(1)) <= 1);
  }
  SUBCASE("deterministic per seed") {
    const Dataset d = grouped({30, 12});
    CHECK(resample_indices(d, "a", 4) == resample_indices(d, "a", 4));
    CHECK(resample_indices(d, "a", 4) != resample_indices(d, "a", 5));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(resample_indices(grouped({4, 0}), "a", 0), DataError);
    CHECK_THROWS_AS(resample_indices(grouped({4, 4}), "c", 0), ConfigError);
  }
}

TEST_CASE("probe_states") {
  AttributeSchema schema;
  schema.attributes = {{"g", {"u", "v"}, {}}, {"k", {"p", "q", "r"}, {}}};
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 1.0);
  auto labels_for = [&](std::size_t count) {
    std::vector<std::vector<std::size_t>> l(2);
    for (std::size_t i = 0; i < count; ++i) {
      l[0].push_back(rng() % 2);
      l[1].push_back(rng() % 3);
    }
    return l;
  };
  const auto ytr = labels_for(600), yte = labels_for(1000);

  SUBCASE("pure noise stays near the majority rate") {
    auto noise = [&](std::size_t rows) {
      Tensor t = Tensor::zeros({rows, 8});
      for (double& v : t.data()) v = n(rng);
      return t;
    };
    const auto r = probe_states(noise(600), ytr, noise(1000), yte, schema, ProbeConfig{});
    REQUIRE(r.size() == 2);
    for (const auto& p : r) CHECK(std::abs(p.accuracy - p.majority) <= 0.05);
    CHECK(r[0].chance == 0.5);
    CHECK(std::abs(r[1].chance - 1.0 / 3.0) < 1e-15);
  }
  SUBCASE("one-hot attributes are recovered") {
    auto onehot = [&](const std::vector<std::vector<std::size_t>>& y) {
      Tensor t = Tensor::zeros({y[0].size(), 5});
      for (std::size_t i = 0; i < y[0].size(); ++i) {
        t.at(i, y[0][i]) = 1.0;
        t.at(i, 2 + y[1][i]) = 1.0;
      }
      return t;
    };
    const auto r = probe_states(onehot(ytr), ytr, onehot(yte), yte, schema, ProbeConfig{});
    for (const auto& p : r) CHECK(p.accuracy >= 0.99);
    const auto again = probe_states(onehot(ytr), ytr, onehot(yte), yte, schema, ProbeConfig{});
    for (std::size_t a = 0; a < 2; ++a) CHECK(again[a].accuracy == r[a].accuracy);
  }
  SUBCASE("a single-class split is an error") {
    auto y = ytr;
    std::fill(y[0].begin(), y[0].end(), 1);
    CHECK_THROWS_AS(probe_states(Tensor::zeros({600, 3}), y, Tensor::zeros({1000, 3}), yte, schema, ProbeConfig{}),
                    DataError);
  }
}

TEST_CASE("probe_leakage and predict on a model") {
  const Dataset data = toy_data(60, 4);
  const SplitResult sp = split(data, 0.5, 4);
  const ModelState s = init_model(toy_model());
  const auto r = probe_leakage(s, sp.train, sp.test, ProbeConfig{8, 20});
  CHECK(r.size() == data.schema.size());
  const auto pairs = predict(s, sp.test, 5);
  REQUIRE(pairs.size() == sp.test.size());
  CHECK(pairs[0].id == sp.test.samples[0].id);
  CHECK(pairs[0].generated.size() <= 5);
  REQUIRE(pairs[0].latent.has_value());
  CHECK(pairs[0].latent->size() == s.config.d_model);
  const auto pairs2 = predict(s, sp.test, 5, false, 7);
  CHECK(pairs2[3].generated == pairs[3].generated);
  CHECK_FALSE(pairs2[3].latent.has_value());
}

TEST_CASE("checkpoint round trip") {
  ModelState s = init_model(toy_model());
  randomize(s, 2);
  DacSet d = init_dac(AttributeSchema::default_schema(), s.config.d_model, 6, 1);
  Tensor h = Tensor::zeros({3, s.config.d_model});
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = std::sin(static_cast<double>(i));
  update_dac_statistics(d.heads[1], h);
  const auto path = std::filesystem::temp_directory_path() / "mifair_test_ckpt.json";
  save_checkpoint(path, s, d, 42);
  const Checkpoint c = load_checkpoint(path);
  std::filesystem::remove(path);
  CHECK(c.seed == 42);
  CHECK(checkpoint_to_json(c.state, c.dac, c.seed).dump() == checkpoint_to_json(s, d, 42).dump());
  CHECK(frozen_checksum(c.state) == frozen_checksum(s));

  nlohmann::json j = checkpoint_to_json(s, d, 1);
  j["version"] = 9;
  CHECK_THROWS_AS(checkpoint_from_json(j), DataError);
  j = checkpoint_to_json(s, d, 1);
  j.erase("dac");
  CHECK_THROWS_AS(checkpoint_from_json(j), DataError);
}
