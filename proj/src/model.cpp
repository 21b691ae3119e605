#include "mifair/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <random>
#include <sstream>

#include "mifair/data.hpp"
#include "mifair/error.hpp"

namespace mifair {

// ---------------------------------------------------------------- config

std::string to_string(PoolingMode m) {
  switch (m) {
    case PoolingMode::kFirst: return "first";
    case PoolingMode::kMid: return "mid";
    case PoolingMode::kLast: return "last";
    case PoolingMode::kMeanOfThree: return "mean3";
    case PoolingMode::kCustom: return "custom";
  }
  return "?";
}

std::string to_string(PoolPositions p) {
  switch (p) {
    case PoolPositions::kPrompt: return "prompt";
    case PoolPositions::kAll: return "all";
    case PoolPositions::kLast: return "last";
  }
  return "?";
}

PoolingMode pooling_mode_from_string(const std::string& s) {
  for (auto m : {PoolingMode::kFirst, PoolingMode::kMid, PoolingMode::kLast, PoolingMode::kMeanOfThree,
                 PoolingMode::kCustom}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown pooling_mode '" + s + "' (first, mid, last, mean3, custom)");
}

PoolPositions pool_positions_from_string(const std::string& s) {
  if (s == "prompt") return PoolPositions::kPrompt;
  if (s == "all") return PoolPositions::kAll;
  if (s == "last") return PoolPositions::kLast;
  throw ConfigError("unknown pool_positions '" + s + "' (prompt, all, last)");
}

void ModelConfig::validate() const {
  if (n_layers == 0 || d_model == 0 || n_heads == 0 || vocab_size < 2 || feature_dim == 0 ||
      n_feature_tokens == 0 || mlp_ratio == 0) {
    throw ConfigError("model: sizes must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
  if (lora_rank < 1) throw ConfigError("model: lora_rank must be >= 1");
  if (!std::isfinite(lora_scale)) throw ConfigError("model: lora_scale must be finite");
  if (vocab_size < TokenLayout::kInstructionBegin + TokenLayout::kInstructionLength) {
    throw ConfigError("model: vocab_size too small for the instruction tokens");
  }
  if (max_seq <= prompt_length()) throw ConfigError("model: max_seq leaves no room for targets");
  if (pooling_mode == PoolingMode::kCustom) {
    if (tapped_layers.empty()) throw ConfigError("model: custom pooling needs tapped_layers");
    for (std::size_t l : tapped_layers) {
      if (l < 1 || l > n_layers) throw ConfigError("model: tapped layer " + std::to_string(l) + " out of range");
    }
  }
}

std::vector<std::size_t> ModelConfig::tapped() const {
  const std::size_t mid = (n_layers + 1) / 2;
  std::vector<std::size_t> k;
  switch (pooling_mode) {
    case PoolingMode::kFirst: k = {1}; break;
    case PoolingMode::kMid: k = {mid}; break;
    case PoolingMode::kLast: k = {n_layers}; break;
    case PoolingMode::kMeanOfThree: k = {1, mid, n_layers}; break;
    case PoolingMode::kCustom: k = tapped_layers; break;
  }
  std::sort(k.begin(), k.end());
  k.erase(std::unique(k.begin(), k.end()), k.end());
  return k;
}

std::size_t ModelConfig::prompt_length() const { return n_feature_tokens + TokenLayout::kInstructionLength; }

namespace {

const char* const kModelKeys[] = {"n_layers",   "d_model",          "n_heads",      "vocab_size",
                                  "max_seq",    "feature_dim",      "n_feature_tokens", "lora_rank",
                                  "lora_scale", "mlp_ratio",        "pooling_mode", "tapped_layers",
                                  "pool_positions", "init_seed"};

}  // namespace

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"vocab_size", c.vocab_size},
                     {"max_seq", c.max_seq},
                     {"feature_dim", c.feature_dim},
                     {"n_feature_tokens", c.n_feature_tokens},
                     {"lora_rank", c.lora_rank},
                     {"lora_scale", c.lora_scale},
                     {"mlp_ratio", c.mlp_ratio},
                     {"pooling_mode", to_string(c.pooling_mode)},
                     {"tapped_layers", c.tapped_layers},
                     {"pool_positions", to_string(c.pool_positions)},
                     {"init_seed", c.init_seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config: expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(std::begin(kModelKeys), std::end(kModelKeys), k) == std::end(kModelKeys)) {
      throw ConfigError("model config: unknown key '" + k + "'");
    }
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("n_layers", c.n_layers);
    get("d_model", c.d_model);
    get("n_heads", c.n_heads);
    get("vocab_size", c.vocab_size);
    get("max_seq", c.max_seq);
    get("feature_dim", c.feature_dim);
    get("n_feature_tokens", c.n_feature_tokens);
    get("lora_rank", c.lora_rank);
    get("lora_scale", c.lora_scale);
    get("mlp_ratio", c.mlp_ratio);
    get("tapped_layers", c.tapped_layers);
    get("init_seed", c.init_seed);
    if (j.contains("pooling_mode")) c.pooling_mode = pooling_mode_from_string(j.at("pooling_mode").get<std::string>());
    if (j.contains("pool_positions")) {
      c.pool_positions = pool_positions_from_string(j.at("pool_positions").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

// ---------------------------------------------------------------- init

ModelState init_model(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.init_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto normal = [&](Shape shape, double std) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data()) v = std * gauss(rng);
    return t;
  };
  const std::size_t d = config.d_model, v = config.vocab_size, hidden = config.mlp_ratio * d, r = config.lora_rank;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  ModelState s;
  s.config = config;
  s.frozen.push_back({"tok_emb", normal({v, d}, 1.0)});
  s.frozen.push_back({"pos_emb", normal({config.max_seq, d}, 0.5)});
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l + 1) + ".";
    s.frozen.push_back({p + "ln1_gain", Tensor::filled({1, d}, 1.0)});
    s.frozen.push_back({p + "ln1_bias", Tensor::zeros({1, d})});
    s.frozen.push_back({p + "wq", normal({d, d}, inv_sqrt_d)});
    s.frozen.push_back({p + "wk", normal({d, d}, inv_sqrt_d)});
    s.frozen.push_back({p + "wv", normal({d, d}, inv_sqrt_d)});
    s.frozen.push_back({p + "wo", normal({d, d}, inv_sqrt_d)});
    s.frozen.push_back({p + "ln2_gain", Tensor::filled({1, d}, 1.0)});
    s.frozen.push_back({p + "ln2_bias", Tensor::zeros({1, d})});
    s.frozen.push_back({p + "w_up", normal({hidden, d}, inv_sqrt_d)});
    s.frozen.push_back({p + "b_up", Tensor::zeros({1, hidden})});
    s.frozen.push_back({p + "w_down", normal({d, hidden}, 1.0 / std::sqrt(static_cast<double>(hidden)))});
    s.frozen.push_back({p + "b_down", Tensor::zeros({1, d})});
  }
  s.frozen.push_back({"final_ln_gain", Tensor::filled({1, d}, 1.0)});
  s.frozen.push_back({"final_ln_bias", Tensor::zeros({1, d})});
  s.frozen.push_back({"head", normal({v, d}, inv_sqrt_d)});

  const std::size_t psi_out = config.n_feature_tokens * d;
  s.projector.push_back({"psi_weight", normal({psi_out, config.feature_dim},
                                               1.0 / std::sqrt(static_cast<double>(config.feature_dim)))});
  s.projector.push_back({"psi_bias", Tensor::zeros({1, psi_out})});

  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l + 1) + ".";
    s.adapters.push_back({p + "q_A", normal({r, d}, inv_sqrt_d)});
    s.adapters.push_back({p + "q_B", Tensor::zeros({d, r})});
    s.adapters.push_back({p + "v_A", normal({r, d}, inv_sqrt_d)});
    s.adapters.push_back({p + "v_B", Tensor::zeros({d, r})});
    s.adapters.push_back({p + "up_A", normal({r, d}, inv_sqrt_d)});
    s.adapters.push_back({p + "up_B", Tensor::zeros({hidden, r})});
  }
  s.instruction = TokenLayout{}.instruction();
  return s;
}

std::string frozen_checksum(const ModelState& state) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const NamedTensor& t : state.frozen) {
    mix(t.name.data(), t.name.size());
    for (std::size_t dim : t.value.shape()) mix(&dim, sizeof dim);
    mix(t.value.data().data(), t.value.size() * sizeof(double));
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

// ---------------------------------------------------------------- forward

BoundModel bind(Tape& tape, const ModelState& state, Trainable trainable) {
  BoundModel m;
  m.state = &state;
  m.tape = &tape;
  for (const auto& t : state.frozen) m.frozen.push_back(tape.constant(t.value));
  for (const auto& t : state.projector) {
    m.projector.push_back(trainable.projector ? tape.leaf(t.value) : tape.constant(t.value));
  }
  for (const auto& t : state.adapters) {
    m.adapters.push_back(trainable.adapters ? tape.leaf(t.value) : tape.constant(t.value));
  }
  return m;
}

Var project_features(const BoundModel& model, Var features_row) {
  const ModelConfig& c = model.state->config;
  if (features_row.value().size() != c.feature_dim) {
    throw ShapeError("project_features: expected " + std::to_string(c.feature_dim) + " features, got " +
                     std::to_string(features_row.value().size()));
  }
  Var flat = add(matmul_nt(reshape(features_row, {1, c.feature_dim}), model.projector[0]), model.projector[1]);
  return reshape(flat, {c.n_feature_tokens, c.d_model});
}

Var adapted_matmul(Var x, Var w, Var a, Var b, double scale_factor) {
  return add(matmul_nt(x, w), scale(matmul_nt(matmul_nt(x, a), b), scale_factor));
}

namespace {

const Tensor& causal_mask(std::size_t t) {
  static std::map<std::size_t, Tensor> cache;
  auto it = cache.find(t);
  if (it != cache.end()) return it->second;
  Tensor m = Tensor::zeros({t, t});
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i + 1; j < t; ++j) m.at(i, j) = -1e9;
  }
  return cache.emplace(t, std::move(m)).first->second;
}

}  // namespace

ForwardResult forward_decode(const BoundModel& model, std::span<const SequenceInput> batch) {
  const ModelState& st = *model.state;
  const ModelConfig& c = st.config;
  Tape& tape = *model.tape;
  if (batch.empty()) throw ShapeError("forward_decode: empty batch");
  const std::size_t n = batch.size(), d = c.d_model, prompt = c.prompt_length();

  ForwardResult out;
  out.prompt_length = prompt;
  std::vector<double> feats;
  feats.reserve(n * c.feature_dim);
  std::vector<std::size_t> token_ids, position_ids;
  std::size_t rows = 0;
  for (const SequenceInput& in : batch) {
    if (in.features.size() != c.feature_dim) {
      throw ShapeError("forward_decode: expected " + std::to_string(c.feature_dim) + " features, got " +
                       std::to_string(in.features.size()));
    }
    const std::size_t t = prompt + in.prefix.size();
    if (t > c.max_seq) {
      throw ShapeError("forward_decode: sequence length " + std::to_string(t) + " exceeds max_seq " +
                       std::to_string(c.max_seq));
    }
    feats.insert(feats.end(), in.features.begin(), in.features.end());
    token_ids.insert(token_ids.end(), st.instruction.begin(), st.instruction.end());
    for (std::size_t tok : in.prefix) {
      if (tok >= c.vocab_size) throw ShapeError("forward_decode: token " + std::to_string(tok) + " >= vocab_size");
      token_ids.push_back(tok);
    }
    for (std::size_t p = 0; p < t; ++p) position_ids.push_back(p);
    out.offsets.push_back(rows);
    out.lengths.push_back(t);
    rows += t;
  }

  // Embedding rows: psi(features) tokens, then instruction + prefix tokens.
  Var f = tape.constant(Tensor::matrix(n, c.feature_dim, std::move(feats)));
  Var psi = add(matmul_nt(f, model.projector[0]), model.projector[1]);
  Var tok = embedding(model.frozen[ModelState::kTokEmb], token_ids);
  std::vector<Var> parts;
  std::size_t tok_row = 0;
  for (std::size_t i = 0; i < n; ++i) {
    parts.push_back(reshape(slice_rows(psi, i, i + 1), {c.n_feature_tokens, d}));
    const std::size_t k = out.lengths[i] - c.n_feature_tokens;
    parts.push_back(slice_rows(tok, tok_row, tok_row + k));
    tok_row += k;
  }
  Var x = add(concat_rows(parts), embedding(model.frozen[ModelState::kPosEmb], position_ids));

  const std::vector<std::size_t> tapped = c.tapped();
  const std::size_t dh = d / c.n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    auto w = [&](ModelState::LayerSlot s) { return model.frozen[ModelState::layer_index(l, s)]; };
    auto ad = [&](ModelState::AdapterSlot s) { return model.adapters[ModelState::adapter_index(l, s)]; };

    Var a = layer_norm(x, w(ModelState::kLn1Gain), w(ModelState::kLn1Bias));
    Var q = adapted_matmul(a, w(ModelState::kWq), ad(ModelState::kQA), ad(ModelState::kQB), c.lora_scale);
    Var k = matmul_nt(a, w(ModelState::kWk));
    Var v = adapted_matmul(a, w(ModelState::kWv), ad(ModelState::kVA), ad(ModelState::kVB), c.lora_scale);

    std::vector<Var> seqs;
    seqs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t o = out.offsets[i], t = out.lengths[i];
      Var qi = slice_rows(q, o, o + t), ki = slice_rows(k, o, o + t), vi = slice_rows(v, o, o + t);
      Var mask = tape.constant(causal_mask(t));
      std::vector<Var> heads;
      heads.reserve(c.n_heads);
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        Var qh = slice_cols(qi, h * dh, (h + 1) * dh);
        Var kh = slice_cols(ki, h * dh, (h + 1) * dh);
        Var vh = slice_cols(vi, h * dh, (h + 1) * dh);
        Var p = softmax_rows(add(scale(matmul_nt(qh, kh), inv_sqrt_dh), mask));
        heads.push_back(matmul(p, vh));
      }
      seqs.push_back(c.n_heads == 1 ? heads[0] : concat_cols(heads));
    }
    Var attn = n == 1 ? seqs[0] : concat_rows(seqs);
    x = add(x, matmul_nt(attn, w(ModelState::kWo)));

    Var a2 = layer_norm(x, w(ModelState::kLn2Gain), w(ModelState::kLn2Bias));
    Var up = add(adapted_matmul(a2, w(ModelState::kWUp), ad(ModelState::kUpA), ad(ModelState::kUpB), c.lora_scale),
                 w(ModelState::kBUp));
    x = add(x, add(matmul_nt(gelu(up), w(ModelState::kWDown)), w(ModelState::kBDown)));

    if (std::find(tapped.begin(), tapped.end(), l + 1) != tapped.end()) {
      out.layers.push_back(l + 1);
      out.hidden.push_back(x);
    }
  }
  Var xf = layer_norm(x, model.frozen[st.final_ln_gain()], model.frozen[st.final_ln_bias()]);
  out.logits = matmul_nt(xf, model.frozen[st.head()]);
  return out;
}

LmLoss lm_loss(const BoundModel& model, std::span<const SequenceInput> batch, const ForwardResult& fwd,
               std::span<const double> sample_weights) {
  if (batch.empty()) throw ShapeError("lm_loss: empty batch");
  if (!sample_weights.empty() && sample_weights.size() != batch.size()) {
    throw ShapeError("lm_loss: one weight per sample required");
  }
  const std::size_t v = model.state->config.vocab_size;
  std::vector<std::size_t> flat;
  std::vector<double> weights;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& ref = batch[i].prefix;
    if (ref.empty()) throw DataError("lm_loss: sample with an empty reference");
    for (std::size_t t = 0; t <= ref.size(); ++t) {
      const std::size_t gold = t < ref.size() ? ref[t] : TokenLayout::kEos;
      flat.push_back((fwd.target_begin(i) + t) * v + gold);
      weights.push_back(sample_weights.empty() ? 1.0 : sample_weights[i]);
    }
  }
  Var logp = gather(log(softmax_rows(fwd.logits)), flat);

  LmLoss out;
  out.tokens = flat.size();
  const Tensor& lp = logp.value();
  std::size_t k = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    double s = 0.0;
    for (std::size_t t = 0; t <= batch[i].prefix.size(); ++t, ++k) s -= weights[k] * lp[k];
    out.per_sample.push_back(s);
  }
  Var weighted = sample_weights.empty() ? logp : mul(logp, model.tape->constant(Tensor::row(std::move(weights))));
  out.total = scale(sum(weighted), -1.0);
  out.per_sample_mean = scale(out.total, 1.0 / static_cast<double>(batch.size()));
  return out;
}

TeacherForced teacher_forced(const BoundModel& model, std::span<const std::vector<double>* const> features,
                             std::span<const std::vector<std::size_t>* const> references,
                             std::span<const double> sample_weights) {
  std::vector<SequenceInput> batch;
  batch.reserve(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) batch.push_back({*features[i], *references[i]});
  TeacherForced tf{forward_decode(model, batch), {}};
  tf.loss = lm_loss(model, batch, tf.forward, sample_weights);
  return tf;
}

// ---------------------------------------------------------------- pooling

Var pool_hidden(std::span<const Var> layer_states, std::span<const PoolRange> ranges) {
  if (layer_states.empty()) throw ShapeError("pool_hidden: no tapped layers");
  if (ranges.empty()) throw ShapeError("pool_hidden: no sequences");
  const std::size_t rows = layer_states[0].value().rows();
  Tensor m = Tensor::zeros({ranges.size(), rows});
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    const PoolRange& r = ranges[i];
    if (r.end <= r.begin) throw ShapeError("pool_hidden: sequence " + std::to_string(i) + " has no valid positions");
    if (r.end > rows) throw ShapeError("pool_hidden: position range exceeds the hidden states");
    const double w = 1.0 / static_cast<double>(r.end - r.begin);
    for (std::size_t p = r.begin; p < r.end; ++p) m.at(i, p) = w;
  }
  Tape& tape = *layer_states[0].tape;
  Var avg = tape.constant(std::move(m));
  Var h = matmul(avg, layer_states[0]);
  for (std::size_t l = 1; l < layer_states.size(); ++l) h = add(h, matmul(avg, layer_states[l]));
  return layer_states.size() == 1 ? h : scale(h, 1.0 / static_cast<double>(layer_states.size()));
}

std::vector<PoolRange> pool_ranges(const ModelConfig& config, const ForwardResult& fwd) {
  std::vector<PoolRange> r;
  for (std::size_t i = 0; i < fwd.offsets.size(); ++i) {
    const std::size_t len = config.pool_positions == PoolPositions::kAll ? fwd.lengths[i] : fwd.prompt_length;
    const std::size_t end = fwd.offsets[i] + len;
    r.push_back({config.pool_positions == PoolPositions::kLast ? end - 1 : fwd.offsets[i], end});
  }
  return r;
}

Var pooled(const BoundModel& model, const ForwardResult& fwd) {
  return pool_hidden(fwd.hidden, pool_ranges(model.state->config, fwd));
}

// ---------------------------------------------------------------- generation

std::size_t greedy_pick(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

std::vector<std::vector<std::size_t>> generate(const ModelState& state,
                                               std::span<const std::vector<double>* const> features,
                                               std::size_t max_new) {
  if (max_new < 1) throw ConfigError("generate: max_new must be >= 1");
  const ModelConfig& c = state.config;
  const std::size_t limit = std::min(max_new, c.max_seq - c.prompt_length());
  std::vector<std::vector<std::size_t>> out(features.size());
  std::vector<std::size_t> active(features.size());
  for (std::size_t i = 0; i < active.size(); ++i) active[i] = i;

  Tape tape(false);
  const BoundModel model = bind(tape, state, Trainable{false, false});
  while (!active.empty()) {
    std::vector<SequenceInput> batch;
    batch.reserve(active.size());
    for (std::size_t i : active) batch.push_back({*features[i], out[i]});
    const ForwardResult fwd = forward_decode(model, batch);
    const Tensor& logits = fwd.logits.value();
    std::vector<std::size_t> still;
    for (std::size_t b = 0; b < active.size(); ++b) {
      const std::size_t row = fwd.offsets[b] + fwd.lengths[b] - 1;
      const std::span<const double> r = logits.data().subspan(row * c.vocab_size, c.vocab_size);
      const std::size_t tok = greedy_pick(r);
      auto& seq = out[active[b]];
      if (tok == TokenLayout::kEos) continue;
      seq.push_back(tok);
      if (seq.size() < limit) still.push_back(active[b]);
    }
    active = std::move(still);
  }
  return out;
}

std::vector<std::size_t> generate_one(const ModelState& state, std::span<const double> features,
                                      std::size_t max_new) {
  const std::vector<double> f(features.begin(), features.end());
  const std::vector<double>* ptr[] = {&f};
  return generate(state, ptr, max_new).front();
}

// ---------------------------------------------------------------- serialization

void to_json(nlohmann::json& j, const NamedTensor& t) {
  j = nlohmann::json{{"name", t.name}, {"shape", t.value.shape()}, {"data", t.value.values()}};
}

void from_json(const nlohmann::json& j, NamedTensor& t) {
  j.at("name").get_to(t.name);
  Shape shape = j.at("shape").get<Shape>();
  std::vector<double> data = j.at("data").get<std::vector<double>>();
  if (shape_size(shape) != data.size()) throw DataError("tensor '" + t.name + "': shape does not match data");
  t.value = Tensor(std::move(shape), std::move(data));
}

nlohmann::json model_to_json(const ModelState& state) {
  return nlohmann::json{{"config", state.config},
                        {"instruction", state.instruction},
                        {"frozen", state.frozen},
                        {"projector", state.projector},
                        {"adapters", state.adapters}};
}

ModelState model_from_json(const nlohmann::json& j) {
  ModelState s;
  try {
    j.at("config").get_to(s.config);
    j.at("instruction").get_to(s.instruction);
    j.at("frozen").get_to(s.frozen);
    j.at("projector").get_to(s.projector);
    j.at("adapters").get_to(s.adapters);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model checkpoint: ") + e.what());
  }
  s.config.validate();
  const ModelState shape_ref = init_model(s.config);
  auto same = [](const std::vector<NamedTensor>& a, const std::vector<NamedTensor>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].name != b[i].name || a[i].value.shape() != b[i].value.shape()) return false;
    }
    return true;
  };
  if (!same(s.frozen, shape_ref.frozen) || !same(s.projector, shape_ref.projector) ||
      !same(s.adapters, shape_ref.adapters)) {
    throw DataError("model checkpoint: weight layout does not match its config");
  }
  return s;
}

}  // namespace mifair
