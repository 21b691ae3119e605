#include <cmath>
#include <random>

#include "doctest.h"
#include "mifair/error.hpp"
#include "mifair/fairness.hpp"
#include "mifair/grad_check.hpp"

using namespace mifair;

namespace {

AttributeSchema two_attributes() {
  AttributeSchema s;
  s.attributes = {{"gender", {"male", "female"}, {}}, {"age", {"young", "mid", "old"}, {}}};
  return s;
}

// Head whose logits are log(probs) regardless of h: zero first layer and a
// bias-only second layer.
DacHead constant_head(std::size_t d, const std::vector<double>& probs) {
  DacHead h{"x", Tensor::zeros({1, d}), Tensor::zeros({1, 1}), Tensor::zeros({probs.size(), 1}),
            Tensor::zeros({1, probs.size()})};
  for (std::size_t g = 0; g < probs.size(); ++g) h.b2[g] = std::log(probs[g]);
  return h;
}

BoundHead bind_one(Tape& tape, const DacHead& h, bool trainable) {
  auto put = [&](const Tensor& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
  return {put(h.w1), put(h.b1), put(h.w2), put(h.b2)};
}

Tensor random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::normal_distribution<double> g(0.0, 1.0);
  Tensor t = Tensor::zeros({r, c});
  for (double& v : t.data()) v = g(rng);
  return t;
}

}  // namespace

TEST_CASE("dac_forward") {
  SUBCASE("zero-weight head is uniform") {
    DacHead h{"x", Tensor::zeros({32, 4}), Tensor::zeros({1, 32}), Tensor::zeros({3, 32}), Tensor::zeros({1, 3})};
    const Tensor p = dac_forward(h, Tensor::from_rows({{1, -2, 3, 0.5}}));
    for (double v : p.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("one hidden unit, hand evaluated") {
    // hidden = gelu(2 * h0), logits = [hidden, -hidden].
    DacHead h{"x", Tensor::zeros({1, 3}), Tensor::zeros({1, 1}), Tensor::matrix(2, 1, {1, -1}), Tensor::zeros({1, 2})};
    h.w1[0] = 2.0;
    const Tensor p = dac_forward(h, Tensor::row({1, 0, 0}));
    const double x = 2.0;
    const double gx = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
    const double p0 = std::exp(gx) / (std::exp(gx) + std::exp(-gx));
    CHECK(std::abs(p[0] - p0) < 1e-12);
    CHECK(std::abs(p[1] - (1.0 - p0)) < 1e-12);
    CHECK(dac_forward(h, Tensor::row({1, 0, 0})) == p);
  }
  SUBCASE("floored and normalized") {
    DacHead h = constant_head(4, {1.0 - 1e-20, 1e-20});
    const Tensor p = dac_forward(h, Tensor::zeros({2, 4}));
    CHECK(p[1] == kLogFloor);
  }
  SUBCASE("shape error") {
    const DacSet set = init_dac(two_attributes(), 8, 32, 1);
    CHECK_THROWS_AS(dac_forward(set.heads[0], Tensor::zeros({1, 7})), ShapeError);
  }
}

TEST_CASE("class weights are inverse frequency with mean one") {
  const std::size_t counts[] = {75, 25};
  const auto w = class_weights(counts);
  CHECK(std::abs(w[0] - 0.5) < 1e-15);
  CHECK(std::abs(w[1] - 1.5) < 1e-15);
  const std::size_t balanced[] = {10, 10, 10};
  for (double x : class_weights(balanced)) CHECK(std::abs(x - 1.0) < 1e-15);
  const std::size_t empty[] = {10, 0};
  CHECK_THROWS_AS(class_weights(empty), ConfigError);
}

TEST_CASE("dac_loss examples") {
  Tape tape;
  SUBCASE("uniform head over four balanced classes") {
    const DacHead h = constant_head(3, {0.25, 0.25, 0.25, 0.25});
    const std::size_t labels[] = {0, 1, 2, 3};
    const double w[] = {1, 1, 1, 1};
    Var loss = dac_loss(bind_one(tape, h, true), tape.constant(Tensor::zeros({4, 3})), labels, w);
    CHECK(std::abs(loss.value().item() - std::log(4.0)) < 1e-12);
  }
  SUBCASE("certain head gives zero") {
    const DacHead h = constant_head(3, {1.0, 1e-300});
    const std::size_t labels[] = {0, 0};
    const double w[] = {1, 1};
    Var loss = dac_loss(bind_one(tape, h, true), tape.constant(Tensor::zeros({2, 3})), labels, w);
    CHECK(std::abs(loss.value().item()) < 1e-12);
    CHECK(loss.value().item() >= 0.0);
  }
  SUBCASE("two samples at 0.9 and 0.5 on gold") {
    // Sample 0 sees h = 0, sample 1 sees h = 1 through a bias-free unit.
    DacHead h{"x", Tensor::matrix(1, 1, {1.0}), Tensor::zeros({1, 1}), Tensor::zeros({2, 1}), Tensor::zeros({1, 2})};
    // logits(h=0) = b2 -> p(gold 0) = 0.9; logits(h=1) = b2 + w2 * gelu(1).
    h.b2[0] = std::log(0.9);
    h.b2[1] = std::log(0.1);
    const double g1 = 0.5 * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * 1.044715));
    // Choose w2 so that p(class 1 | h=1) = 0.5: log(0.9) + w0 g1 == log(0.1) + w1 g1.
    h.w2[0] = 0.0;
    h.w2[1] = (std::log(0.9) - std::log(0.1)) / g1;
    const std::size_t labels[] = {0, 1};
    const double w[] = {1, 1};
    Var loss = dac_loss(bind_one(tape, h, true), tape.constant(Tensor::matrix(2, 1, {0.0, 1.0})), labels, w);
    CHECK(std::abs(loss.value().item() + (std::log(0.9) + std::log(0.5)) / 2.0) < 1e-12);
  }
  SUBCASE("label outside the group set") {
    const DacHead h = constant_head(3, {0.5, 0.5});
    const std::size_t labels[] = {0, 2};
    const double w[] = {1, 1};
    CHECK_THROWS_AS(dac_loss(bind_one(tape, h, true), tape.constant(Tensor::zeros({2, 3})), labels, w), DataError);
  }
}

TEST_CASE("dim_loss examples") {
  Tape tape;
  // Rows are h_1, h_2; columns a_1, a_2. Labels: sample i has a_i.
  auto estimate = [&](double p11, double p21, double p12, double p22) {
    const Tensor lp = Tensor::from_rows({{std::log(p11), std::log(p21)}, {std::log(p12), std::log(p22)}});
    const std::size_t labels[] = {0, 1};
    return club_batch_estimate(tape.constant(lp), labels).value().item();
  };
  SUBCASE("listed probabilities") {
    // phi(a1|h1)=0.9, phi(a2|h2)=0.8, phi(a1|h2)=0.3, phi(a2|h1)=0.4
    const double expected = (std::log(0.9) + std::log(0.8)) / 2.0 - (std::log(0.3) + std::log(0.4)) / 2.0;
    CHECK(std::abs(estimate(0.9, 0.4, 0.3, 0.8) - expected) < 1e-15);
    CHECK(std::abs(expected - 0.8959) < 1e-4);
  }
  SUBCASE("positives at one, negatives at 0.1") {
    CHECK(std::abs(estimate(1.0, 0.1, 0.1, 1.0) + std::log(0.1)) < 1e-15);
  }
  SUBCASE("through a head equals the estimate on its log-probabilities") {
    std::mt19937_64 rng(2);
    const DacSet dac = init_dac(two_attributes(), 4, 32, 3);
    const Tensor h = random_matrix(rng, 3, 4);
    const std::size_t labels[] = {1, 0, 2};
    const BoundHead head = bind_one(tape, dac.heads[1], false);
    const Tensor p = dac_forward(dac.heads[1], h);
    double pos = 0.0, neg = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        if (i == j) pos += std::log(p.at(i, labels[i]));
        else neg += std::log(p.at(j, labels[i]));
      }
    }
    CHECK(std::abs(dim_loss(head, tape.constant(h), labels).value().item() - (pos / 3.0 - neg / 6.0)) < 1e-12);
  }
  SUBCASE("head that ignores h gives exactly zero") {
    std::mt19937_64 rng(3);
    const DacHead h = constant_head(5, {0.2, 0.5, 0.3});
    const std::size_t labels[] = {0, 2, 1, 1, 0};
    Var loss = dim_loss(bind_one(tape, h, false), tape.constant(random_matrix(rng, 5, 5)), labels);
    CHECK(std::abs(loss.value().item()) < 1e-15);
  }
  SUBCASE("batch of one is an error") {
    const DacHead h = constant_head(3, {0.5, 0.5});
    const std::size_t labels[] = {0};
    CHECK_THROWS_AS(dim_loss(bind_one(tape, h, false), tape.constant(Tensor::zeros({1, 3})), labels), ShapeError);
  }
}

TEST_CASE("stop-gradient contracts hold exactly") {
  std::mt19937_64 rng(5);
  const AttributeSchema schema = two_attributes();
  const DacSet dac = init_dac(schema, 6, 32, 9);
  Tape tape;
  Var h_leaf = tape.leaf(random_matrix(rng, 4, 6));
  Var h = scale(h_leaf, 1.5);
  const auto heads = bind_dac(tape, dac, true);
  const std::size_t labels[] = {0, 1, 1, 0};
  const double w[] = {1.0, 1.0};

  const Gradients g_dim = tape.backward(dim_loss(heads[0], h, labels));
  for (Var p : {heads[0].w1, heads[0].b1, heads[0].w2, heads[0].b2}) {
    CHECK_FALSE(g_dim.reached(p));
    const Tensor gp = g_dim.of(p);
    for (double v : gp.data()) CHECK(v == 0.0);
  }
  CHECK(g_dim.reached(h_leaf));

  const Gradients g_dac = tape.backward(dac_loss(heads[0], h, labels, w));
  CHECK_FALSE(g_dac.reached(h_leaf));
  const Tensor gh = g_dac.of(h_leaf);
  for (double v : gh.data()) CHECK(v == 0.0);
  CHECK(g_dac.reached(heads[0].w1));
}

TEST_CASE("dac and dim gradients match finite differences") {
  std::mt19937_64 rng(8);
  const AttributeSchema schema = two_attributes();
  const DacSet dac = init_dac(schema, 5, 32, 4);
  const Tensor h0 = random_matrix(rng, 4, 5);
  const std::size_t labels[] = {2, 0, 1, 2};
  const double w[] = {0.7, 1.6, 0.7};
  const DacHead& head = dac.heads[1];

  ScalarFn dac_fn = [&](Tape& tape, std::span<const Var> p) {
    return dac_loss({p[0], p[1], p[2], p[3]}, tape.constant(h0), labels, w);
  };
  const Tensor phi[] = {head.w1, head.b1, head.w2, head.b2};
  CHECK(grad_check(dac_fn, phi, 1e-5).max_rel_error <= 1e-6);

  ScalarFn dim_fn = [&](Tape& tape, std::span<const Var> p) {
    return dim_loss(bind_one(tape, head, false), p[0], labels);
  };
  const Tensor hs[] = {h0};
  CHECK(grad_check(dim_fn, hs, 1e-5).max_rel_error <= 1e-6);
}

TEST_CASE("club bound: worked examples") {
  SUBCASE("2x2 dependent joint") {
    const Tensor joint = Tensor::from_rows({{0.4, 0.1}, {0.1, 0.4}});
    const Tensor q = exact_conditional(joint);
    CHECK(std::abs(q.at(0, 0) - 0.8) < 1e-15);
    const double bound = club_bound_exact(joint, q);
    const double mi = exact_mi(joint);
    CHECK(std::abs(bound - 0.4159) < 1e-4);
    CHECK(std::abs(mi - 0.1927) < 1e-4);
    CHECK(bound >= mi);
    // Hand enumeration of both quantities.
    const double hand_bound = (0.8 * std::log(0.8) + 0.2 * std::log(0.2)) - 0.5 * (std::log(0.8) + std::log(0.2));
    const double hand_mi = 0.8 * std::log(0.4 / 0.25) + 0.2 * std::log(0.1 / 0.25);
    CHECK(std::abs(bound - hand_bound) < 1e-15);
    CHECK(std::abs(mi - hand_mi) < 1e-15);
  }
  SUBCASE("independent joint") {
    const Tensor joint = Tensor::from_rows({{0.12, 0.28}, {0.18, 0.42}});
    CHECK(std::abs(club_bound_exact(joint, exact_conditional(joint))) < 1e-15);
    CHECK(exact_mi(joint) < 1e-15);
  }
  SUBCASE("perfectly dependent joint with floored conditional") {
    const Tensor joint = Tensor::from_rows({{0.5, 0.0}, {0.0, 0.5}});
    const double bound = club_bound_exact(joint, exact_conditional(joint));
    CHECK(std::isfinite(bound));
    CHECK(std::abs(bound - 0.5 * (-std::log(1e-12))) < 1e-9);
    CHECK(bound >= exact_mi(joint));
  }
  SUBCASE("zero q under positive mass") {
    const Tensor joint = Tensor::from_rows({{0.25, 0.25}, {0.25, 0.25}});
    CHECK_THROWS_AS(club_bound_exact(joint, Tensor::from_rows({{1.0, 0.0}, {0.5, 0.5}})), NumericError);
  }
}

TEST_CASE("single-draw negatives average to the batch estimate") {
  // One x' per sample, drawn uniformly from the others; its expectation is
  // the all-pairs average.
  std::mt19937_64 rng(8);
  const DacSet dac = init_dac(two_attributes(), 4, 16, 4);
  const Tensor h = random_matrix(rng, 6, 4);
  const std::size_t labels[] = {0, 1, 2, 2, 1, 0};
  const Tensor p = dac_forward(dac.heads[1], h);
  Tape tape(false);
  const double batch = dim_loss(bind_one(tape, dac.heads[1], false), tape.constant(h), labels).value().item();
  std::uniform_int_distribution<std::size_t> other(0, 4);
  double sum = 0.0, sum_sq = 0.0;
  const int draws = 20000;
  for (int d = 0; d < draws; ++d) {
    double v = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
      std::size_t j = other(rng);
      if (j >= i) ++j;
      v += std::log(p.at(i, labels[i])) - std::log(p.at(j, labels[i]));
    }
    v /= 6.0;
    sum += v;
    sum_sq += v * v;
  }
  const double mean = sum / draws;
  const double se = std::sqrt((sum_sq / draws - mean * mean) / draws);
  CHECK(std::abs(mean - batch) < 4.0 * se + 1e-12);
}

TEST_CASE("club bound upper-bounds exact MI on random joints") {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> dim(2, 8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t r = dim(rng), c = dim(rng);
    Tensor joint = Tensor::zeros({r, c});
    double total = 0.0;
    for (double& v : joint.data()) {
      v = u(rng) < 0.2 ? 0.0 : std::pow(u(rng), 3.0);
      total += v;
    }
    if (total == 0.0) continue;
    for (double& v : joint.data()) v /= total;
    const double gap = club_bound_exact(joint, exact_conditional(joint)) - exact_mi(joint);
    CHECK(gap >= -1e-12);
  }
}

TEST_CASE("loss weights") {
  LossWeights w;
  CHECK_NOTHROW(w.validate());
  w.lambda_lm = 0.0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = LossWeights{};
  w.lambda_dim = -1.0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = LossWeights{1.0, 0.5, 0.2, {{"race", 0.2}, {"age", 0.6}, {"gender", 0.1}}};
  CHECK(w.weight("age") == 0.6);
  CHECK(w.weight("other") == 1.0);
  nlohmann::json j = w;
  CHECK(nlohmann::json(j.get<LossWeights>()) == j);
  j["lambda_mi"] = 1.0;
  CHECK_THROWS_AS(j.get<LossWeights>(), ConfigError);
}

TEST_CASE("total loss") {
  std::mt19937_64 rng(12);
  const AttributeSchema schema = two_attributes();
  const DacSet dac = init_dac(schema, 6, 32, 2);
  const std::vector<std::vector<std::size_t>> labels{{0, 1, 1}, {2, 0, 1}};
  const std::vector<std::vector<double>> cw{{1.0, 1.0}, {0.8, 1.2, 1.0}};

  SUBCASE("fairness lambdas at zero give lambda_lm L_LM exactly") {
    Tape tape;
    Var lm = tape.leaf(Tensor::scalar(3.25));
    Var h = tape.leaf(random_matrix(rng, 3, 6));
    const auto heads = bind_dac(tape, dac, true);
    const TotalLoss t = total_loss(lm, h, heads, labels, cw, schema, LossWeights{0.5, 0.0, 0.0, {}});
    CHECK(t.total.value().item() == 0.5 * 3.25);
    CHECK(total_loss(lm, h, {}, labels, cw, schema, LossWeights{0.5, 0.0, 0.0, {}}).total.value().item() ==
          0.5 * 3.25);
  }
  SUBCASE("random batch equals independently computed terms") {
    Tape tape;
    Var lm = tape.leaf(Tensor::scalar(2.0));
    Var h = tape.leaf(random_matrix(rng, 3, 6));
    const auto heads = bind_dac(tape, dac, true);
    const LossWeights w{0.7, 0.3, 0.2, {{"age", 0.6}}};
    const TotalLoss t = total_loss(lm, h, heads, labels, cw, schema, w);
    double expected = 0.7 * 2.0;
    for (std::size_t a = 0; a < 2; ++a) {
      const double wa = a == 1 ? 0.6 : 1.0;
      expected += 0.3 * wa * dim_loss(heads[a], h, labels[a]).value().item();
      expected += 0.2 * wa * dac_loss(heads[a], h, labels[a], cw[a]).value().item();
    }
    CHECK(std::abs(t.total.value().item() - expected) < 1e-12);
    CHECK(std::abs(t.breakdown.total - t.total.value().item()) < 1e-12);
    CHECK(std::abs(t.model_objective.value().item() + t.dac_objective.value().item() - t.total.value().item()) <
          1e-12);
  }
  SUBCASE("unit terms over two attributes sum to five") {
    // All terms hand-set to 1 through the breakdown arithmetic.
    LossBreakdown b;
    b.lm = 1.0;
    b.dim = {1.0, 1.0};
    b.dac = {1.0, 1.0};
    const LossWeights w{1.0, 1.0, 1.0, {}};
    double t = w.lambda_lm * b.lm;
    for (std::size_t a = 0; a < 2; ++a) t += w.lambda_dim * b.dim[a] + w.lambda_dac * b.dac[a];
    CHECK(t == 5.0);
  }
}

TEST_CASE("dac input statistics") {
  std::mt19937_64 rng(5);
  DacSet set = init_dac(two_attributes(), 4, 8, 3);
  DacHead& head = set.heads[0];
  const Tensor a = Tensor::from_rows({{1, 2, 0, -1}, {3, 2, 4, 1}});
  update_dac_statistics(head, a);
  REQUIRE(head.norm_updates == 1);
  CHECK(head.norm_mean == Tensor::row({2, 2, 2, 0}));
  CHECK(head.norm_inv_std[0] == doctest::Approx(1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-14));
  CHECK(head.norm_inv_std[1] == doctest::Approx(1.0 / std::sqrt(1e-5)).epsilon(1e-14));
  CHECK(head.norm_inv_std[2] == doctest::Approx(1.0 / std::sqrt(4.0 + 1e-5)).epsilon(1e-14));

  SUBCASE("later batches blend with momentum") {
    update_dac_statistics(head, Tensor::from_rows({{0, 0, 0, 0}, {0, 0, 0, 0}}), 0.75);
    CHECK(head.norm_mean[0] == doctest::Approx(1.5).epsilon(1e-14));
    // variance 0.75 * 1 + 0.25 * 0
    CHECK(head.norm_inv_std[0] == doctest::Approx(1.0 / std::sqrt(0.75 + 1e-5)).epsilon(1e-12));
  }
  SUBCASE("forward equals the plain head on standardized input") {
    DacHead plain = head;
    plain.norm_mean = Tensor{};
    plain.norm_inv_std = Tensor{};
    plain.norm_updates = 0;
    const Tensor h = random_matrix(rng, 3, 4);
    Tensor z = h;
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t c = 0; c < 4; ++c) z.at(i, c) = (h.at(i, c) - head.norm_mean[c]) * head.norm_inv_std[c];
    }
    const Tensor p = dac_forward(head, h), q = dac_forward(plain, z);
    for (std::size_t k = 0; k < p.size(); ++k) CHECK(std::abs(p[k] - q[k]) < 1e-12);
  }
  SUBCASE("statistics survive JSON") {
    const nlohmann::json j = set;
    const DacSet back = j.get<DacSet>();
    CHECK(back.heads[0].norm_mean == head.norm_mean);
    CHECK(back.heads[0].norm_inv_std == head.norm_inv_std);
    CHECK(back.heads[0].norm_updates == 1);
    CHECK(back.heads[1].norm_mean.empty());
  }
  SUBCASE("width mismatch") {
    CHECK_THROWS_AS(update_dac_statistics(head, Tensor::zeros({2, 3})), ShapeError);
  }
}

TEST_CASE("weighted_dim clipping") {
  // A head that is confidently wrong gives a negative estimate.
  AttributeSchema schema;
  schema.attributes = {{"gender", {"male", "female"}, {}}};
  DacHead head{"gender", Tensor::zeros({1, 2}), Tensor::zeros({1, 1}), Tensor::matrix(2, 1, {-3, 3}),
               Tensor::zeros({1, 2})};
  head.w1[0] = 1.0;
  const DacSet set{{head}};
  Tape tape;
  Var h = tape.leaf(Tensor::from_rows({{2, 0}, {-2, 0}, {1, 0}}));
  const auto heads = bind_dac(tape, set, false);
  const std::vector<std::vector<std::size_t>> labels{{0, 1, 0}};
  const LossWeights w{1.0, 1.0, 1.0, {}};
  LossBreakdown raw, clipped;
  const double v = weighted_dim(heads, h, labels, schema, w, &raw).value().item();
  REQUIRE(v < 0.0);
  CHECK(weighted_dim(heads, h, labels, schema, w, &clipped, true).value().item() == 0.0);
  CHECK(clipped.dim[0] == v);
}
