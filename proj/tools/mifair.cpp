// mifair command-line entry point.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mifair/data.hpp"
#include "mifair/error.hpp"
#include "mifair/experiments.hpp"
#include "mifair/metrics.hpp"
#include "mifair/model.hpp"
#include "mifair/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mifair;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

// ---------------------------------------------------------------- config

struct EvalSection {
  std::size_t max_new = 0;  // 0: up to max_seq
  std::size_t batch_size = 64;
  bool latents = true;
};

struct MatchSection {
  std::string attribute = "gender";
  double threshold = 0.7;
  Metric metric = Metric::kBleu1;
};

struct Config {
  SynthConfig data;
  double train_fraction = 0.8;
  ModelConfig model;
  TrainConfig train;
  EvalSection eval;
  ReportOptions report;
  MatchSection match;
  GradCheckConfig grad_check;
  MiOracleConfig mi_oracle;
};

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    if (!known) throw ConfigError(what + ": unknown key '" + k + "'");
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& what) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception& e) {
    throw ConfigError(what + "." + key + ": " + e.what());
  }
}

json to_json(const Config& c) {
  json metrics = json::array();
  for (Metric m : c.report.metrics) metrics.push_back(to_string(m));
  return json{{"data", c.data},
              {"split", {{"train_fraction", c.train_fraction}}},
              {"model", c.model},
              {"train", c.train},
              {"eval", {{"max_new", c.eval.max_new}, {"batch_size", c.eval.batch_size}, {"latents", c.eval.latents}}},
              {"report",
               {{"metrics", metrics},
                {"attributes", c.report.attributes},
                {"min_count", c.report.min_count},
                {"n_resamples", c.report.n_resamples},
                {"seed", c.report.seed},
                {"m_all", to_string(c.report.m_all_mode)}}},
              {"match",
               {{"attribute", c.match.attribute}, {"threshold", c.match.threshold}, {"metric", to_string(c.match.metric)}}},
              {"grad_check", c.grad_check},
              {"mi_oracle", c.mi_oracle}};
}

Config config_from_json(const json& j) {
  reject_unknown(j, {"data", "split", "model", "train", "eval", "report", "match", "grad_check", "mi_oracle"}, "config");
  Config c;
  try {
    if (j.contains("data")) j.at("data").get_to(c.data);
    if (j.contains("model")) j.at("model").get_to(c.model);
    if (j.contains("train")) j.at("train").get_to(c.train);
    if (j.contains("grad_check")) j.at("grad_check").get_to(c.grad_check);
    if (j.contains("mi_oracle")) j.at("mi_oracle").get_to(c.mi_oracle);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (j.contains("split")) {
    const json& s = j.at("split");
    reject_unknown(s, {"train_fraction"}, "split");
    read(s, "train_fraction", c.train_fraction, "split");
  }
  if (j.contains("eval")) {
    const json& s = j.at("eval");
    reject_unknown(s, {"max_new", "batch_size", "latents"}, "eval");
    read(s, "max_new", c.eval.max_new, "eval");
    read(s, "batch_size", c.eval.batch_size, "eval");
    read(s, "latents", c.eval.latents, "eval");
  }
  if (j.contains("report")) {
    const json& s = j.at("report");
    reject_unknown(s, {"metrics", "attributes", "min_count", "n_resamples", "seed", "m_all"}, "report");
    if (s.contains("metrics")) {
      std::vector<std::string> names;
      read(s, "metrics", names, "report");
      c.report.metrics.clear();
      for (const auto& n : names) c.report.metrics.push_back(metric_from_string(n));
    }
    read(s, "attributes", c.report.attributes, "report");
    read(s, "min_count", c.report.min_count, "report");
    read(s, "n_resamples", c.report.n_resamples, "report");
    read(s, "seed", c.report.seed, "report");
    if (s.contains("m_all")) {
      std::string m;
      read(s, "m_all", m, "report");
      c.report.m_all_mode = m_all_mode_from_string(m);
    }
  }
  if (j.contains("match")) {
    const json& s = j.at("match");
    reject_unknown(s, {"attribute", "threshold", "metric"}, "match");
    read(s, "attribute", c.match.attribute, "match");
    read(s, "threshold", c.match.threshold, "match");
    if (s.contains("metric")) {
      std::string m;
      read(s, "metric", m, "match");
      c.match.metric = metric_from_string(m);
    }
  }

  c.data.validate();
  c.model.validate();
  c.train.validate();
  if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0)) throw ConfigError("split.train_fraction must lie in (0, 1)");
  if (c.eval.batch_size == 0) throw ConfigError("eval.batch_size must be positive");
  if (c.report.n_resamples == 0) throw ConfigError("report.n_resamples must be positive");
  if (c.report.metrics.empty()) throw ConfigError("report.metrics is empty");
  return c;
}

// "a.b.c=value"; the value is JSON when it parses, else a string.
void apply_override(json& root, const std::string& item) {
  const auto eq = item.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + item + "': expected key=value");
  const std::string path = item.substr(0, eq), raw = item.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override '" + item + "': empty key segment");
    if (!node->is_object()) throw ConfigError("override '" + item + "': '" + key + "' is not inside an object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  out << j.dump(2) << "\n";
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::vector<std::string> overrides;

  Config resolve() const {
    json j = config.empty() ? json::object() : read_json_file(config);
    for (const auto& o : overrides) apply_override(j, o);
    Config c = config_from_json(j);
    if (seed) {
      c.data.seed = c.train.seed = c.report.seed = c.grad_check.seed = c.mi_oracle.seed = *seed;
      c.model.init_seed = *seed;
    }
    return c;
  }
  fs::path out_dir() const {
    fs::create_directories(out);
    return out;
  }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON config file");
  app->add_option("--seed", c.seed, "Overrides every seed in the config");
  app->add_option("--out", c.out, "Output directory");
  app->add_option("--override", c.overrides, "key=value with a dotted key, e.g. train.loss.lambda_dim=1")
      ->take_all();
}

AttributeSchema schema_from(const fs::path& data_dir) {
  const fs::path p = data_dir / "manifest.json";
  if (!fs::exists(p)) throw DataError("missing " + p.string());
  try {
    return read_json_file(p).at("schema").get<AttributeSchema>();
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

Dataset load_split(const fs::path& data_dir, const std::string& name, const AttributeSchema& schema,
                   std::size_t vocab) {
  const IngestResult r = ingest_jsonl(data_dir / (name + ".jsonl"), schema, vocab);
  if (r.dropped) std::cerr << "warning: dropped " << r.dropped << " records of " << name << " missing attributes\n";
  return r.dataset;
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const Common& common) {
  const Config c = common.resolve();
  const fs::path out = common.out_dir();
  const SynthResult r = synth_generate(c.data);
  const SplitResult sp = split(r.dataset, c.train_fraction, c.data.seed);
  write_jsonl(out / "train.jsonl", sp.train.with_split("train"));
  write_jsonl(out / "test.jsonl", sp.test.with_split("test"));
  json manifest = r.manifest;
  manifest["train_size"] = sp.train.size();
  manifest["test_size"] = sp.test.size();
  manifest["config"] = to_json(c);
  write_json_file(out / "manifest.json", manifest);
  std::cout << "wrote " << sp.train.size() << " train and " << sp.test.size() << " test samples to " << out << "\n";
  return kOk;
}

int cmd_train(const Common& common, const std::string& data_dir) {
  const Config c = common.resolve();
  const fs::path out = common.out_dir();
  const AttributeSchema schema = schema_from(data_dir);
  const Dataset train = load_split(data_dir, "train", schema, c.model.vocab_size);
  const Dataset test = load_split(data_dir, "test", schema, c.model.vocab_size);
  write_json_file(out / "config.json", to_json(c));
  const TrainResult r = train_run(c.train, init_model(c.model), train, &test);
  const fs::path ckpt = c.train.checkpoint_path.empty() ? out / "checkpoint.json" : fs::path(c.train.checkpoint_path);
  const fs::path log = c.train.log_path.empty() ? out / "train_log.jsonl" : fs::path(c.train.log_path);
  save_checkpoint(ckpt, r.state, r.dac, c.train.seed);
  write_log_jsonl(log, r.log);
  std::size_t aborted = 0;
  for (const auto& e : r.log.epochs) {
    aborted += e.aborted;
    std::cout << "epoch " << e.epoch << " " << to_string(e.phase) << " lm " << e.lm;
    if (e.eval_lm) std::cout << " eval_lm " << *e.eval_lm;
    std::cout << "\n";
  }
  std::cout << "checkpoint " << ckpt << ", log " << log << "\n";
  if (aborted) std::cerr << "warning: " << aborted << " steps aborted on non-finite losses\n";
  return kOk;
}

int cmd_eval(const Common& common, const std::string& checkpoint, const std::string& data_dir,
             const std::string& split_name) {
  const Config c = common.resolve();
  const fs::path out = common.out_dir();
  const Checkpoint ck = load_checkpoint(checkpoint);
  const AttributeSchema schema = schema_from(data_dir);
  const Dataset d = load_split(data_dir, split_name, schema, ck.state.config.vocab_size);
  check_dataset(d, ck.state.config);
  const std::size_t max_new =
      c.eval.max_new ? c.eval.max_new : ck.state.config.max_seq - ck.state.config.prompt_length();
  const std::vector<ScoredPair> pairs = predict(ck.state, d, max_new, c.eval.latents, c.eval.batch_size);
  write_predictions(out / "predictions.jsonl", pairs, schema);
  std::cout << "wrote " << pairs.size() << " predictions to " << (out / "predictions.jsonl") << "\n";
  return kOk;
}

int cmd_report(const Common& common, const std::string& predictions, const std::string& data_dir) {
  const Config c = common.resolve();
  const fs::path out = common.out_dir();
  const AttributeSchema schema = data_dir.empty() ? AttributeSchema::default_schema() : schema_from(data_dir);
  const std::vector<ScoredPair> pairs = read_predictions(predictions, schema);
  ReportOptions o = c.report;
  o.lexicon = TokenLayout{c.data.n_findings}.lexicon();
  const std::vector<FairnessReport> reports = build_reports(pairs, schema, o);
  json j{{"config", to_json(c)}, {"predictions", predictions}, {"reports", reports}};
  write_json_file(out / "report.json", j);
  const std::string md = render_markdown(reports);
  std::ofstream(out / "report.md") << md;
  std::cout << md;
  return kOk;
}

int cmd_match_pairs(const Common& common, const std::string& predictions, const std::string& data_dir) {
  const Config c = common.resolve();
  const fs::path out = common.out_dir();
  const AttributeSchema schema = data_dir.empty() ? AttributeSchema::default_schema() : schema_from(data_dir);
  const std::vector<ScoredPair> pairs = read_predictions(predictions, schema);
  const std::size_t a = schema.require(c.match.attribute);
  const std::vector<double> scores = pair_scores(pairs, c.match.metric, TokenLayout{c.data.n_findings}.lexicon());
  const CounterfactualResult r = counterfactual_gap(pairs, scores, a, c.match.threshold);
  json partners = json::array();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (r.partner[i]) partners.push_back({{"id", pairs[i].id}, {"match", pairs[*r.partner[i]].id}});
  }
  json j{{"config", to_json(c)},
         {"attribute", c.match.attribute},
         {"metric", to_string(c.match.metric)},
         {"threshold", c.match.threshold},
         {"gap", r.gap},
         {"matched", r.matched},
         {"total", r.total},
         {"unmatched_fraction", r.unmatched_fraction()},
         {"pairs", partners}};
  write_json_file(out / "match_pairs.json", j);
  std::printf("counterfactual gap %.6f over %zu of %zu pairs (unmatched %.1f%%)\n", r.gap, r.matched, r.total,
              100.0 * r.unmatched_fraction());
  return kOk;
}

int cmd_grad_check(const Common& common) {
  const Config c = common.resolve();
  const fs::path out = common.out_dir();
  const GradCheckReport r = run_grad_check_suite(c.grad_check);
  json j = r;
  j["config"] = to_json(c);
  write_json_file(out / "grad_check.json", j);
  for (const char* term : {"lm", "dac", "dim", "total"}) {
    const double e = r.max_rel_error(term);
    std::printf("%-6s max rel error %.3e  %s\n", term, e, e <= r.tolerance ? "PASS" : "FAIL");
  }
  std::printf("stop-gradients %s\n", r.stop_gradients_hold() ? "PASS" : "FAIL");
  return r.passed() ? kOk : kNumeric;
}

int cmd_mi_oracle(const Common& common) {
  const Config c = common.resolve();
  const fs::path out = common.out_dir();
  const MiOracleReport r = run_mi_oracle(c.mi_oracle);
  json j = r;
  j["config"] = to_json(c);
  write_json_file(out / "mi_oracle.json", j);
  std::printf("%5s %5s %12s %12s %12s\n", "cells", "groups", "exact MI", "CLUB bound", "slack");
  for (const auto& row : r.rows) {
    std::printf("%5zu %5zu %12.6f %12.6f %12.3e\n", row.cells, row.groups, row.mi, row.bound, row.bound - row.mi);
  }
  std::printf("min slack %.3e  %s\n", r.min_slack, r.passed() ? "PASS" : "FAIL");
  return r.passed() ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fairness-aware adapter fine-tuning toolkit"};
  app.require_subcommand(1);
  Common common;
  std::string data_dir, checkpoint, predictions, split_name = "test";

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset, split and manifest");
  add_common(gen, common);
  auto* train = app.add_subcommand("train", "Train adapters, projector and DAC heads");
  add_common(train, common);
  train->add_option("--data", data_dir, "Directory written by gen-data")->required();
  auto* eval = app.add_subcommand("eval", "Greedy generations for a split");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--data", data_dir)->required();
  eval->add_option("--split", split_name, "train or test")->check(CLI::IsMember({"train", "test"}));
  auto* report = app.add_subcommand("report", "Per-group scores, gaps, ES and bootstrap intervals");
  add_common(report, common);
  report->add_option("--predictions", predictions)->required();
  report->add_option("--data", data_dir, "Schema source; default schema when omitted");
  auto* match = app.add_subcommand("match-pairs", "Counterfactual matched-pair gap");
  add_common(match, common);
  match->add_option("--predictions", predictions)->required();
  match->add_option("--data", data_dir, "Schema source; default schema when omitted");
  auto* grad = app.add_subcommand("grad-check", "Finite-difference check of every loss term");
  add_common(grad, common);
  auto* mi = app.add_subcommand("mi-oracle", "CLUB bound against exact MI on random joints");
  add_common(mi, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_gen_data(common);
    if (*train) return cmd_train(common, data_dir);
    if (*eval) return cmd_eval(common, checkpoint, data_dir, split_name);
    if (*report) return cmd_report(common, predictions, data_dir);
    if (*match) return cmd_match_pairs(common, predictions, data_dir);
    if (*grad) return cmd_grad_check(common);
    if (*mi) return cmd_mi_oracle(common);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
