#include "mifair/tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mifair/error.hpp"

namespace mifair {

std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kMatmulNT: return "matmul_nt";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kSoftmax: return "softmax_rows";
    case OpKind::kLog: return "log";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kGelu: return "gelu";
    case OpKind::kRelu: return "relu";
    case OpKind::kEmbedding: return "embedding";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kReshape: return "reshape";
    case OpKind::kGather: return "gather";
    case OpKind::kStopGradient: return "stop_gradient";
  }
  return "?";
}

Gradients::Gradients(std::vector<Tensor> grads, std::vector<Shape> shapes)
    : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

Tensor Gradients::of(Var v) const {
  if (v.id < grads_.size() && !grads_[v.id].empty()) return grads_[v.id];
  if (v.id < shapes_.size()) return Tensor::zeros(shapes_[v.id]);
  return Tensor::zeros(v.shape());
}

bool Gradients::reached(Var v) const { return v.id < grads_.size() && !grads_[v.id].empty(); }

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), OpKind::kLeaf, track_, {}});
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), OpKind::kLeaf, false, {}});
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(OpKind op, Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  bool needs = false;
  if (track_ && op != OpKind::kStopGradient) {
    for (const Var& in : inputs) needs = needs || nodes_[in.id].requires_grad;
  }
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite output from ") + std::string(op_name(op)));
  }
  nodes_.push_back(Node{std::move(value), op, needs, needs ? std::move(fn) : BackwardFn{}});
  ++op_count_;
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor* Tape::grad_slot(Var v) {
  Node& node = nodes_[v.id];
  if (!node.requires_grad) return nullptr;
  Tensor& g = grads_[v.id];
  if (g.empty() || g.shape() != node.value.shape()) g = Tensor::zeros(node.value.shape());
  return &g;
}

Gradients Tape::backward(Var root) {
  if (root.tape != this) throw Error("backward: root was not recorded on this tape");
  if (value(root).size() != 1) {
    throw ShapeError("backward: root must be scalar, got " + shape_string(value(root).shape()));
  }
  grads_.assign(nodes_.size(), Tensor{});
  last_visits_ = 0;
  if (nodes_[root.id].requires_grad) grads_[root.id] = Tensor::filled(nodes_[root.id].value.shape(), 1.0);
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& node = nodes_[i];
    if (node.op == OpKind::kLeaf) continue;
    ++last_visits_;
    if (!node.backward || grads_[i].empty()) continue;
    node.backward(grads_[i], node.value, *this);
  }

  std::vector<Shape> shapes;
  shapes.reserve(nodes_.size());
  for (const Node& n : nodes_) shapes.push_back(n.value.shape());
  Gradients out(std::move(grads_), std::move(shapes));
  grads_.clear();
  return out;
}

namespace {

[[noreturn]] void shape_fail(std::string_view op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                   shape_string(b.shape()));
}

[[noreturn]] void shape_fail(std::string_view op, const Tensor& a, std::string_view why) {
  throw ShapeError(std::string(op) + ": " + std::string(why) + " (shape " + shape_string(a.shape()) + ")");
}

Tape& same_tape(Var a, Var b, std::string_view op) {
  if (a.tape != b.tape || a.tape == nullptr) throw Error(std::string(op) + ": operands on different tapes");
  return *a.tape;
}

void accumulate(Tensor* dst, const Tensor& src) {
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) shape_fail("matmul", av, bv);
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out = Tensor::zeros({m, n});
  gemm(av.data(), bv.data(), out.data(), m, k, n, false, false, false);
  const Var ins[] = {a, b};
  return t.record(OpKind::kMatmul, std::move(out), ins, [a, b, m, k, n](const Tensor& g, const Tensor&, Tape& tape) {
    if (Tensor* ga = tape.grad_slot(a)) gemm(g.data(), b.value().data(), ga->data(), m, n, k, false, true, true);
    if (Tensor* gb = tape.grad_slot(b)) gemm(a.value().data(), g.data(), gb->data(), k, m, n, true, false, true);
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul_nt");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols()) shape_fail("matmul_nt", av, bv);
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  Tensor out = Tensor::zeros({m, n});
  gemm(av.data(), bv.data(), out.data(), m, k, n, false, true, false);
  const Var ins[] = {a, b};
  return t.record(OpKind::kMatmulNT, std::move(out), ins,
                  [a, b, m, k, n](const Tensor& g, const Tensor&, Tape& tape) {
                    // C = A B^T: dA = G B, dB = G^T A
                    if (Tensor* ga = tape.grad_slot(a))
                      gemm(g.data(), b.value().data(), ga->data(), m, n, k, false, false, true);
                    if (Tensor* gb = tape.grad_slot(b))
                      gemm(g.data(), a.value().data(), gb->data(), n, m, k, true, false, true);
                  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b, "add");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Var ins[] = {a, b};
  if (av.shape() == bv.shape()) {
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return t.record(OpKind::kAdd, std::move(out), ins, [a, b](const Tensor& g, const Tensor&, Tape& tape) {
      if (Tensor* ga = tape.grad_slot(a)) accumulate(ga, g);
      if (Tensor* gb = tape.grad_slot(b)) accumulate(gb, g);
    });
  }
  if (av.rank() == 2 && bv.size() == av.cols() && bv.rows() == 1) {
    const std::size_t m = av.rows(), n = av.cols();
    Tensor out = av;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
    }
    return t.record(OpKind::kAdd, std::move(out), ins, [a, b, m, n](const Tensor& g, const Tensor&, Tape& tape) {
      if (Tensor* ga = tape.grad_slot(a)) accumulate(ga, g);
      if (Tensor* gb = tape.grad_slot(b)) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
        }
      }
    });
  }
  shape_fail("add", av, bv);
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) shape_fail("mul", av, bv);
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const Var ins[] = {a, b};
  return t.record(OpKind::kMul, std::move(out), ins, [a, b](const Tensor& g, const Tensor&, Tape& tape) {
    if (Tensor* ga = tape.grad_slot(a)) {
      const Tensor& bv = b.value();
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (Tensor* gb = tape.grad_slot(b)) {
      const Tensor& av = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  const Var ins[] = {a};
  return a.tape->record(OpKind::kScale, std::move(out), ins, [a, s](const Tensor& g, const Tensor&, Tape& tape) {
    if (Tensor* ga = tape.grad_slot(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
    }
  });
}

Var softmax_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  Tensor out = av;
  for (std::size_t i = 0; i < m; ++i) {
    double* r = out.data().data() + i * n;
    const double mx = *std::max_element(r, r + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      r[j] = std::exp(r[j] - mx);
      z += r[j];
    }
    for (std::size_t j = 0; j < n; ++j) r[j] /= z;
  }
  const Var ins[] = {a};
  return a.tape->record(OpKind::kSoftmax, std::move(out), ins, [a, m, n](const Tensor& g, const Tensor& y, Tape& tape) {
    Tensor* ga = tape.grad_slot(a);
    if (!ga) return;
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

Var log(Var a) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(out[i], kLogFloor));
  const Var ins[] = {a};
  return a.tape->record(OpKind::kLog, std::move(out), ins, [a](const Tensor& g, const Tensor&, Tape& tape) {
    Tensor* ga = tape.grad_slot(a);
    if (!ga) return;
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > kLogFloor) (*ga)[i] += g[i] / av[i];
    }
  });
}

Var mean(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.data()) s += v;
  const double n = static_cast<double>(av.size());
  const Var ins[] = {a};
  return a.tape->record(OpKind::kMean, Tensor::scalar(s / n), ins, [a, n](const Tensor& g, const Tensor&, Tape& tape) {
    if (Tensor* ga = tape.grad_slot(a)) {
      const double d = g[0] / n;
      for (double& v : ga->data()) v += d;
    }
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const Var ins[] = {a};
  return a.tape->record(OpKind::kSum, Tensor::scalar(s), ins, [a](const Tensor& g, const Tensor&, Tape& tape) {
    if (Tensor* ga = tape.grad_slot(a)) {
      for (double& v : ga->data()) v += g[0];
    }
  });
}

Var gelu(Var a) {
  Tensor out = a.value();
  for (double& x : out.data()) x = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  const Var ins[] = {a};
  return a.tape->record(OpKind::kGelu, std::move(out), ins, [a](const Tensor& g, const Tensor&, Tape& tape) {
    Tensor* ga = tape.grad_slot(a);
    if (!ga) return;
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = av[i];
      const double th = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      (*ga)[i] += g[i] * d;
    }
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (double& x : out.data()) x = x > 0.0 ? x : 0.0;
  const Var ins[] = {a};
  return a.tape->record(OpKind::kRelu, std::move(out), ins, [a](const Tensor& g, const Tensor&, Tape& tape) {
    Tensor* ga = tape.grad_slot(a);
    if (!ga) return;
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > 0.0) (*ga)[i] += g[i];
    }
  });
}

Var embedding(Var table, std::span<const std::size_t> ids) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) shape_fail("embedding", tv, "table must be rank 2");
  if (ids.empty()) shape_fail("embedding", tv, "empty id list");
  const std::size_t vocab = tv.rows(), d = tv.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " out of range for table " +
                       shape_string(tv.shape()));
    }
    std::copy_n(tv.data().begin() + ids[i] * d, d, out.begin() + i * d);
  }
  std::vector<std::size_t> saved(ids.begin(), ids.end());
  const Var ins[] = {table};
  return table.tape->record(OpKind::kEmbedding, Tensor::matrix(ids.size(), d, std::move(out)), ins,
                            [table, saved = std::move(saved), d](const Tensor& g, const Tensor&, Tape& tape) {
                              Tensor* gt = tape.grad_slot(table);
                              if (!gt) return;
                              for (std::size_t i = 0; i < saved.size(); ++i) {
                                for (std::size_t j = 0; j < d; ++j) (*gt)[saved[i] * d + j] += g[i * d + j];
                              }
                            });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) shape_fail("layer_norm", xv, "input must be rank 2");
  const std::size_t m = xv.rows(), n = xv.cols();
  if (gain.value().size() != n || bias.value().size() != n) shape_fail("layer_norm", xv, gain.value());
  std::vector<double> normalized(m * n);
  std::vector<double> inv_std(m);
  Tensor out = Tensor::zeros({m, n});
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xv[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double c = xv[i * n + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      normalized[i * n + j] = (xv[i * n + j] - mu) * inv_std[i];
      out[i * n + j] = normalized[i * n + j] * gv[j] + bv[j];
    }
  }
  const Var ins[] = {x, gain, bias};
  return x.tape->record(
      OpKind::kLayerNorm, std::move(out), ins,
      [x, gain, bias, m, n, normalized = std::move(normalized), inv_std = std::move(inv_std)](
          const Tensor& g, const Tensor&, Tape& tape) {
        const Tensor& gv = gain.value();
        if (Tensor* gx = tape.grad_slot(x)) {
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[i * n + j] * gv[j];
              mean_d += d;
              mean_dx += d * normalized[i * n + j];
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[i * n + j] * gv[j];
              (*gx)[i * n + j] += inv_std[i] * (d - mean_d - normalized[i * n + j] * mean_dx);
            }
          }
        }
        if (Tensor* gg = tape.grad_slot(gain)) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) (*gg)[j] += g[i * n + j] * normalized[i * n + j];
          }
        }
        if (Tensor* gb = tape.grad_slot(bias)) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
          }
        }
      });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t n = parts[0].value().cols();
  std::size_t m = 0;
  for (const Var& p : parts) {
    if (p.tape != parts[0].tape) throw Error("concat: operands on different tapes");
    if (p.value().cols() != n) shape_fail("concat", parts[0].value(), p.value());
    m += p.value().rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const Var& p : parts) out.insert(out.end(), p.value().data().begin(), p.value().data().end());
  std::vector<Var> saved(parts.begin(), parts.end());
  return parts[0].tape->record(OpKind::kConcat, Tensor::matrix(m, n, std::move(out)), parts,
                               [saved = std::move(saved)](const Tensor& g, const Tensor&, Tape& tape) {
                                 std::size_t offset = 0;
                                 for (const Var& p : saved) {
                                   const std::size_t len = p.value().size();
                                   if (Tensor* gp = tape.grad_slot(p)) {
                                     for (std::size_t i = 0; i < len; ++i) (*gp)[i] += g[offset + i];
                                   }
                                   offset += len;
                                 }
                               });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t m = parts[0].value().rows();
  std::size_t n = 0;
  for (const Var& p : parts) {
    if (p.tape != parts[0].tape) throw Error("concat: operands on different tapes");
    if (p.value().rows() != m) shape_fail("concat", parts[0].value(), p.value());
    n += p.value().cols();
  }
  Tensor out = Tensor::zeros({m, n});
  std::size_t col = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    const std::size_t w = pv.cols();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(pv.data().begin() + i * w, w, out.data().begin() + i * n + col);
    col += w;
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return parts[0].tape->record(OpKind::kConcat, std::move(out), parts,
                               [saved = std::move(saved), m, n](const Tensor& g, const Tensor&, Tape& tape) {
                                 std::size_t col = 0;
                                 for (const Var& p : saved) {
                                   const std::size_t w = p.value().cols();
                                   if (Tensor* gp = tape.grad_slot(p)) {
                                     for (std::size_t i = 0; i < m; ++i) {
                                       for (std::size_t j = 0; j < w; ++j) (*gp)[i * w + j] += g[i * n + col + j];
                                     }
                                   }
                                   col += w;
                                 }
                               });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (av.rank() != 2 || begin >= end || end > av.rows()) {
    shape_fail("slice", av, "row range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid");
  }
  const std::size_t n = av.cols();
  std::vector<double> out(av.data().begin() + begin * n, av.data().begin() + end * n);
  const Var ins[] = {a};
  return a.tape->record(OpKind::kSlice, Tensor::matrix(end - begin, n, std::move(out)), ins,
                        [a, begin, n](const Tensor& g, const Tensor&, Tape& tape) {
                          if (Tensor* ga = tape.grad_slot(a)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[begin * n + i] += g[i];
                          }
                        });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (av.rank() != 2 || begin >= end || end > av.cols()) {
    shape_fail("slice", av, "column range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid");
  }
  const std::size_t m = av.rows(), n = av.cols(), w = end - begin;
  Tensor out = Tensor::zeros({m, w});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(av.data().begin() + i * n + begin, w, out.data().begin() + i * w);
  const Var ins[] = {a};
  return a.tape->record(OpKind::kSlice, std::move(out), ins, [a, begin, m, n, w](const Tensor& g, const Tensor&, Tape& tape) {
    if (Tensor* ga = tape.grad_slot(a)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < w; ++j) (*ga)[i * n + begin + j] += g[i * w + j];
      }
    }
  });
}

Var reshape(Var a, Shape shape) {
  const Tensor& av = a.value();
  if (shape_size(shape) != av.size()) {
    throw ShapeError("reshape: cannot view " + shape_string(av.shape()) + " as " + shape_string(shape));
  }
  const Var ins[] = {a};
  return a.tape->record(OpKind::kReshape, Tensor(std::move(shape), av.values()), ins,
                        [a](const Tensor& g, const Tensor&, Tape& tape) {
                          if (Tensor* ga = tape.grad_slot(a)) accumulate(ga, g);
                        });
}

Var gather(Var a, std::span<const std::size_t> flat_indices) {
  const Tensor& av = a.value();
  if (flat_indices.empty()) shape_fail("gather", av, "empty index list");
  std::vector<double> out(flat_indices.size());
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    if (flat_indices[i] >= av.size()) {
      throw ShapeError("gather: index " + std::to_string(flat_indices[i]) + " out of range for " +
                       shape_string(av.shape()));
    }
    out[i] = av[flat_indices[i]];
  }
  std::vector<std::size_t> saved(flat_indices.begin(), flat_indices.end());
  const Var ins[] = {a};
  return a.tape->record(OpKind::kGather, Tensor::row(std::move(out)), ins,
                        [a, saved = std::move(saved)](const Tensor& g, const Tensor&, Tape& tape) {
                          if (Tensor* ga = tape.grad_slot(a)) {
                            for (std::size_t i = 0; i < saved.size(); ++i) (*ga)[saved[i]] += g[i];
                          }
                        });
}

Var stop_gradient(Var a) {
  const Var ins[] = {a};
  return a.tape->record(OpKind::kStopGradient, a.value(), ins, {});
}

}  // namespace mifair
