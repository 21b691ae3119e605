#include "mifair/fairness.hpp"

#include <cmath>
#include <random>

#include "mifair/error.hpp"

namespace mifair {

DacSet init_dac(const AttributeSchema& schema, std::size_t d_model, std::size_t hidden, std::uint64_t seed) {
  if (hidden == 0 || d_model == 0) throw ConfigError("dac: sizes must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto normal = [&](std::size_t r, std::size_t c) {
    Tensor t = Tensor::zeros({r, c});
    const double std = 1.0 / std::sqrt(static_cast<double>(c));
    for (double& v : t.data()) v = std * gauss(rng);
    return t;
  };
  DacSet set;
  for (const Attribute& attr : schema.attributes) {
    const std::size_t g = attr.group_count();
    set.heads.push_back({attr.name, normal(hidden, d_model), Tensor::zeros({1, hidden}), normal(g, hidden),
                         Tensor::zeros({1, g})});
  }
  return set;
}

namespace {

void bind_statistics(Tape& tape, const DacHead& h, BoundHead& b) {
  if (h.norm_mean.empty()) return;
  const std::size_t d = h.norm_mean.size();
  Tensor shift = h.norm_mean;
  for (double& v : shift.data()) v = -v;
  Tensor diag = Tensor::zeros({d, d});
  for (std::size_t i = 0; i < d; ++i) diag.at(i, i) = h.norm_inv_std[i];
  b.shift = tape.constant(std::move(shift));
  b.diag = tape.constant(std::move(diag));
}

}  // namespace

std::vector<BoundHead> bind_dac(Tape& tape, const DacSet& dac, bool trainable) {
  auto put = [&](const Tensor& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
  std::vector<BoundHead> out;
  for (const DacHead& h : dac.heads) {
    BoundHead b{put(h.w1), put(h.b1), put(h.w2), put(h.b2), {}, {}};
    bind_statistics(tape, h, b);
    out.push_back(b);
  }
  return out;
}

void update_dac_statistics(DacHead& head, const Tensor& h, double momentum) {
  const std::size_t n = h.rows(), d = h.cols();
  if (n == 0) return;
  if (d != head.w1.cols()) throw ShapeError("update_dac_statistics: width mismatch");
  std::vector<double> mean(d, 0.0), var(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) mean[c] += h.at(i, c);
  }
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) var[c] += (h.at(i, c) - mean[c]) * (h.at(i, c) - mean[c]);
  }
  for (double& v : var) v /= static_cast<double>(n);
  if (head.norm_updates == 0 || head.norm_mean.empty()) {
    head.norm_mean = Tensor::row(mean);
    head.norm_inv_std = Tensor::zeros({1, d});
    for (std::size_t c = 0; c < d; ++c) head.norm_inv_std[c] = 1.0 / std::sqrt(var[c] + 1e-5);
  } else {
    for (std::size_t c = 0; c < d; ++c) {
      const double old_var = 1.0 / (head.norm_inv_std[c] * head.norm_inv_std[c]) - 1e-5;
      const double v = momentum * old_var + (1.0 - momentum) * var[c];
      head.norm_mean[c] = momentum * head.norm_mean[c] + (1.0 - momentum) * mean[c];
      head.norm_inv_std[c] = 1.0 / std::sqrt(std::max(v, 0.0) + 1e-5);
    }
  }
  ++head.norm_updates;
}

Var dac_logits(const BoundHead& head, Var h) {
  Var x = head.shift.tape ? matmul(add(h, head.shift), head.diag) : h;
  Var hidden = gelu(add(matmul_nt(x, head.w1), head.b1));
  return add(matmul_nt(hidden, head.w2), head.b2);
}

Tensor dac_forward(const DacHead& head, const Tensor& h) {
  if (h.cols() != head.w1.cols()) {
    throw ShapeError("dac_forward: expected " + std::to_string(head.w1.cols()) + "-wide states, got " +
                     shape_string(h.shape()));
  }
  Tape tape(false);
  BoundHead b{tape.constant(head.w1), tape.constant(head.b1), tape.constant(head.w2), tape.constant(head.b2), {}, {}};
  bind_statistics(tape, head, b);
  Tensor p = softmax_rows(dac_logits(b, tape.constant(Tensor::matrix(h.rows(), h.cols(), h.values())))).value();
  for (double& v : p.data()) v = std::max(v, kLogFloor);
  return p;
}

std::vector<double> class_weights(std::span<const std::size_t> counts) {
  if (counts.empty()) throw ConfigError("class_weights: no classes");
  std::vector<double> w;
  double total = 0.0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) throw ConfigError("class_weights: class " + std::to_string(c) + " has no samples");
    w.push_back(1.0 / static_cast<double>(counts[c]));
    total += w.back();
  }
  const double mean = total / static_cast<double>(w.size());
  for (double& x : w) x /= mean;
  return w;
}

namespace {

void check_labels(std::span<const std::size_t> labels, std::size_t groups, std::size_t batch, const char* what) {
  if (labels.size() != batch) throw ShapeError(std::string(what) + ": one label per sample required");
  for (std::size_t a : labels) {
    if (a >= groups) {
      throw DataError(std::string(what) + ": label " + std::to_string(a) + " outside " + std::to_string(groups) +
                      " groups");
    }
  }
}

}  // namespace

Var dac_loss(const BoundHead& head, Var h, std::span<const std::size_t> labels, std::span<const double> weights) {
  const std::size_t b = h.value().rows(), g = head.w2.value().rows();
  check_labels(labels, g, b, "dac_loss");
  if (weights.size() != g) throw ShapeError("dac_loss: one class weight per group required");
  Var logp = log(softmax_rows(dac_logits(head, stop_gradient(h))));
  std::vector<std::size_t> flat;
  std::vector<double> w;
  for (std::size_t i = 0; i < b; ++i) {
    flat.push_back(i * g + labels[i]);
    w.push_back(weights[labels[i]]);
  }
  Var picked = mul(gather(logp, flat), h.tape->constant(Tensor::row(std::move(w))));
  return scale(sum(picked), -1.0 / static_cast<double>(b));
}

Var club_batch_estimate(Var log_probs, std::span<const std::size_t> labels) {
  const std::size_t b = log_probs.value().rows(), g = log_probs.value().cols();
  if (b < 2) throw ShapeError("dim_loss: batch size must be >= 2 for the negative-pair term");
  check_labels(labels, g, b, "dim_loss");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < b; ++i) {
    pos.push_back(i * g + labels[i]);
    for (std::size_t j = 0; j < b; ++j) {
      if (j != i) neg.push_back(j * g + labels[i]);
    }
  }
  Var positive = scale(sum(gather(log_probs, pos)), 1.0 / static_cast<double>(b));
  Var negative = scale(sum(gather(log_probs, neg)), 1.0 / static_cast<double>(b * (b - 1)));
  return sub(positive, negative);
}

Var dim_loss(const BoundHead& head, Var h, std::span<const std::size_t> labels) {
  if (h.value().rows() < 2) throw ShapeError("dim_loss: batch size must be >= 2 for the negative-pair term");
  const BoundHead frozen{stop_gradient(head.w1), stop_gradient(head.b1), stop_gradient(head.w2),
                         stop_gradient(head.b2), head.shift, head.diag};
  return club_batch_estimate(log(softmax_rows(dac_logits(frozen, h))), labels);
}

namespace {

void check_joint(const Tensor& joint) {
  if (joint.rank() != 2 || joint.rows() == 0 || joint.cols() == 0) throw ShapeError("joint must be a matrix");
  double total = 0.0;
  for (double p : joint.data()) {
    if (!(p >= 0.0)) throw NumericError("joint has a negative or non-finite entry");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw NumericError("joint does not sum to 1");
}

std::vector<double> row_marginal(const Tensor& joint) {
  std::vector<double> m(joint.rows(), 0.0);
  for (std::size_t r = 0; r < joint.rows(); ++r) {
    for (std::size_t c = 0; c < joint.cols(); ++c) m[r] += joint.at(r, c);
  }
  return m;
}

std::vector<double> col_marginal(const Tensor& joint) {
  std::vector<double> m(joint.cols(), 0.0);
  for (std::size_t r = 0; r < joint.rows(); ++r) {
    for (std::size_t c = 0; c < joint.cols(); ++c) m[c] += joint.at(r, c);
  }
  return m;
}

}  // namespace

double club_bound_exact(const Tensor& joint, const Tensor& q) {
  check_joint(joint);
  if (q.shape() != joint.shape()) throw ShapeError("club_bound_exact: q and joint shapes differ");
  for (std::size_t r = 0; r < q.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < q.cols(); ++c) {
      if (!(q.at(r, c) >= 0.0)) throw NumericError("club_bound_exact: q has a negative entry");
      if (q.at(r, c) == 0.0 && joint.at(r, c) > 0.0) {
        throw NumericError("club_bound_exact: q is zero where the joint has mass (cell " + std::to_string(r) + "," +
                           std::to_string(c) + ")");
      }
      s += q.at(r, c);
    }
    if (std::abs(s - 1.0) > 1e-9) throw NumericError("club_bound_exact: q rows must sum to 1");
  }
  const auto ph = row_marginal(joint), pa = col_marginal(joint);
  double positive = 0.0, negative = 0.0;
  for (std::size_t r = 0; r < joint.rows(); ++r) {
    for (std::size_t c = 0; c < joint.cols(); ++c) {
      const double lq = std::log(std::max(q.at(r, c), kLogFloor));
      positive += joint.at(r, c) * lq;
      negative += ph[r] * pa[c] * lq;
    }
  }
  return positive - negative;
}

double exact_mi(const Tensor& joint) {
  check_joint(joint);
  const auto ph = row_marginal(joint), pa = col_marginal(joint);
  double mi = 0.0;
  for (std::size_t r = 0; r < joint.rows(); ++r) {
    for (std::size_t c = 0; c < joint.cols(); ++c) {
      const double p = joint.at(r, c);
      if (p > 0.0) mi += p * std::log(p / (ph[r] * pa[c]));
    }
  }
  return std::max(mi, 0.0);
}

Tensor exact_conditional(const Tensor& joint) {
  Tensor q = Tensor::zeros(joint.shape());
  const auto ph = row_marginal(joint);
  for (std::size_t r = 0; r < joint.rows(); ++r) {
    for (std::size_t c = 0; c < joint.cols(); ++c) {
      q.at(r, c) = ph[r] > 0.0 ? joint.at(r, c) / ph[r] : 1.0 / static_cast<double>(joint.cols());
    }
  }
  return q;
}

// ---------------------------------------------------------------- weights

void LossWeights::validate() const {
  for (double x : {lambda_lm, lambda_dim, lambda_dac}) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw ConfigError("loss weights must be finite and >= 0");
  }
  if (lambda_lm == 0.0 && lambda_dim == 0.0 && lambda_dac == 0.0) {
    throw ConfigError("loss weights: lambda_lm, lambda_dim and lambda_dac are all zero");
  }
  for (const auto& [name, w] : attribute) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("attribute weight for '" + name + "' must be >= 0");
  }
}

double LossWeights::weight(const std::string& name) const {
  auto it = attribute.find(name);
  return it == attribute.end() ? 1.0 : it->second;
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"lambda_lm", w.lambda_lm},
                     {"lambda_dim", w.lambda_dim},
                     {"lambda_dac", w.lambda_dac},
                     {"attribute", w.attribute}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  if (!j.is_object()) throw ConfigError("loss weights: expected an object");
  for (const auto& [k, v] : j.items()) {
    if (k != "lambda_lm" && k != "lambda_dim" && k != "lambda_dac" && k != "attribute") {
      throw ConfigError("loss weights: unknown key '" + k + "'");
    }
  }
  try {
    if (j.contains("lambda_lm")) j.at("lambda_lm").get_to(w.lambda_lm);
    if (j.contains("lambda_dim")) j.at("lambda_dim").get_to(w.lambda_dim);
    if (j.contains("lambda_dac")) j.at("lambda_dac").get_to(w.lambda_dac);
    if (j.contains("attribute")) j.at("attribute").get_to(w.attribute);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("loss weights: ") + e.what());
  }
}

// ---------------------------------------------------------------- total

namespace {

Var accumulate(Var acc, Var term, bool& have) {
  if (!have) {
    have = true;
    return term;
  }
  return add(acc, term);
}

}  // namespace

Var weighted_dac(std::span<const BoundHead> heads, Var h, const std::vector<std::vector<std::size_t>>& labels,
                 const std::vector<std::vector<double>>& class_weight, const AttributeSchema& schema,
                 const LossWeights& weights, LossBreakdown* breakdown) {
  if (heads.size() != schema.size() || labels.size() != schema.size() || class_weight.size() != schema.size()) {
    throw ShapeError("weighted_dac: one head, label vector and class-weight vector per attribute required");
  }
  Var acc{};
  bool have = false;
  if (breakdown) breakdown->dac.assign(schema.size(), 0.0);
  for (std::size_t a = 0; a < schema.size(); ++a) {
    Var term = dac_loss(heads[a], h, labels[a], class_weight[a]);
    if (breakdown) breakdown->dac[a] = term.value().item();
    acc = accumulate(acc, scale(term, weights.lambda_dac * weights.weight(schema.at(a).name)), have);
  }
  return acc;
}

Var weighted_dim(std::span<const BoundHead> heads, Var h, const std::vector<std::vector<std::size_t>>& labels,
                 const AttributeSchema& schema, const LossWeights& weights, LossBreakdown* breakdown,
                 bool clip_negative) {
  if (heads.size() != schema.size() || labels.size() != schema.size()) {
    throw ShapeError("weighted_dim: one head and label vector per attribute required");
  }
  Var acc{};
  bool have = false;
  if (breakdown) breakdown->dim.assign(schema.size(), 0.0);
  for (std::size_t a = 0; a < schema.size(); ++a) {
    Var term = dim_loss(heads[a], h, labels[a]);
    if (breakdown) breakdown->dim[a] = term.value().item();
    if (clip_negative) term = relu(term);
    acc = accumulate(acc, scale(term, weights.lambda_dim * weights.weight(schema.at(a).name)), have);
  }
  return acc;
}

TotalLoss total_loss(Var lm, Var h, std::span<const BoundHead> heads,
                     const std::vector<std::vector<std::size_t>>& labels,
                     const std::vector<std::vector<double>>& class_weight, const AttributeSchema& schema,
                     const LossWeights& weights) {
  weights.validate();
  TotalLoss out;
  out.breakdown.lm = lm.value().item();
  out.model_objective = scale(lm, weights.lambda_lm);
  if (heads.empty()) {
    if (weights.fairness_active()) throw ShapeError("total_loss: fairness terms need DAC heads");
    out.total = out.model_objective;
  } else {
    out.model_objective = add(out.model_objective, weighted_dim(heads, h, labels, schema, weights, &out.breakdown));
    out.dac_objective = weighted_dac(heads, h, labels, class_weight, schema, weights, &out.breakdown);
    out.total = add(out.model_objective, out.dac_objective);
  }
  double t = weights.lambda_lm * out.breakdown.lm;
  for (std::size_t a = 0; a < out.breakdown.dim.size(); ++a) {
    t += weights.lambda_dim * weights.weight(schema.at(a).name) * out.breakdown.dim[a];
  }
  for (std::size_t a = 0; a < out.breakdown.dac.size(); ++a) {
    t += weights.lambda_dac * weights.weight(schema.at(a).name) * out.breakdown.dac[a];
  }
  out.breakdown.total = t;
  return out;
}

// ---------------------------------------------------------------- json

void to_json(nlohmann::json& j, const DacHead& h) {
  j = nlohmann::json{{"attribute", h.attribute},
                     {"w1", NamedTensor{"w1", h.w1}},
                     {"b1", NamedTensor{"b1", h.b1}},
                     {"w2", NamedTensor{"w2", h.w2}},
                     {"b2", NamedTensor{"b2", h.b2}},
                     {"norm_updates", h.norm_updates}};
  if (!h.norm_mean.empty()) {
    j["norm_mean"] = NamedTensor{"norm_mean", h.norm_mean};
    j["norm_inv_std"] = NamedTensor{"norm_inv_std", h.norm_inv_std};
  }
}

void from_json(const nlohmann::json& j, DacHead& h) {
  j.at("attribute").get_to(h.attribute);
  h.w1 = j.at("w1").get<NamedTensor>().value;
  h.b1 = j.at("b1").get<NamedTensor>().value;
  h.w2 = j.at("w2").get<NamedTensor>().value;
  h.b2 = j.at("b2").get<NamedTensor>().value;
  if (j.contains("norm_updates")) j.at("norm_updates").get_to(h.norm_updates);
  if (j.contains("norm_mean")) {
    h.norm_mean = j.at("norm_mean").get<NamedTensor>().value;
    h.norm_inv_std = j.at("norm_inv_std").get<NamedTensor>().value;
    if (h.norm_mean.size() != h.w1.cols() || h.norm_inv_std.size() != h.w1.cols()) {
      throw DataError("dac head '" + h.attribute + "': statistics width differs from the input width");
    }
  }
  if (h.w1.rows() != h.b1.cols() || h.w2.cols() != h.w1.rows() || h.b2.cols() != h.w2.rows()) {
    throw DataError("dac head '" + h.attribute + "': inconsistent shapes");
  }
}

void to_json(nlohmann::json& j, const DacSet& d) { j = nlohmann::json{{"heads", d.heads}}; }
void from_json(const nlohmann::json& j, DacSet& d) { j.at("heads").get_to(d.heads); }

}  // namespace mifair
