#pragma once

// Experiment runner: builds the task from a config, trains, evaluates and
// writes CSV metrics plus a JSON checkpoint into the run directory.
//
// Files in the run directory (every CSV starts with "# config_hash=<hex>"):
//   metrics.csv      epoch,train_loss,valid_loss
//   eval.csv         split,swap_rate,loss_all,loss_clean_targets,tokens
//   summary.csv      metric,value
//   norms.csv        layer,checkpoint,mean_output_norm
//   load.csv         layer,rank,proportion
//   checkpoint.json  effective config + every parameter tensor
//   divergence.txt   only when training produced a non-finite value
//
// Randomness comes from one std::mt19937_64 seeded with trainer.seed, drawn
// in this order: data (corpus or objectives), model initialization, the
// corruption seed (tiny_lm) or evaluation starts (quadratic), then per-epoch
// shuffles or training starts.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "momoe/config.hpp"
#include "momoe/diagnostics.hpp"
#include "momoe/model.hpp"
#include "momoe/optim.hpp"
#include "momoe/tasks.hpp"

namespace momoe {

namespace fs = std::filesystem;

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// CSV file with a metadata comment line and a header row.
class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const std::string& hash, const std::string& header) : out_(path) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    out_ << "# config_hash=" << hash << '\n' << header << '\n';
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

inline fs::path output_root() {
  const char* env = std::getenv("MOMOE_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

inline fs::path resolve_output_dir(const std::string& dir) {
  const fs::path p(dir);
  return p.is_absolute() ? p : output_root() / p;
}

// ---------------------------------------------------------------------------
// Checkpoints

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline NamedTensors named_parameters(const MomentumSmoeStack& s) {
  NamedTensors out;
  for (std::size_t t = 0; t < s.layers.size(); ++t) {
    const auto& l = s.layers[t];
    const std::string pre = "layer" + std::to_string(t) + ".";
    out.emplace_back(pre + "router.weight", l.router.weight);
    out.emplace_back(pre + "router.bias", l.router.bias);
    for (std::size_t i = 0; i < l.experts.size(); ++i) {
      const auto& e = l.experts[i];
      const std::string ep = pre + "expert" + std::to_string(i) + ".";
      out.emplace_back(ep + "w1", e.w1);
      out.emplace_back(ep + "b1", e.b1);
      if (e.kind == ExpertKind::mlp) {
        out.emplace_back(ep + "w2", e.w2);
        out.emplace_back(ep + "b2", e.b2);
      }
    }
  }
  for (std::size_t k = 0; k < s.params.size(); ++k) {
    const auto& p = s.params[k];
    const std::string pre = "dynamics" + std::to_string(k) + ".";
    const std::pair<const char*, const Tensor*> fields[] = {{"mu", &p.mu},           {"gamma", &p.gamma},
                                                            {"gamma_w", &p.gamma_w}, {"gamma_b", &p.gamma_b},
                                                            {"delta_raw", &p.delta_raw}, {"mu_raw", &p.mu_raw}};
    for (const auto& [name, t] : fields)
      if (t->defined()) out.emplace_back(pre + name, *t);
  }
  return out;
}

inline NamedTensors named_parameters(const TinyLm& m) {
  NamedTensors out{{"emb_cur", m.emb_cur}, {"emb_prev", m.emb_prev}};
  for (auto& p : named_parameters(m.stack)) out.push_back(p);
  out.emplace_back("head_w", m.head_w);
  out.emplace_back("head_b", m.head_b);
  return out;
}

inline json tensors_to_json(const NamedTensors& ts) {
  json arr = json::array();
  for (const auto& [name, t] : ts) arr.push_back({{"name", name}, {"shape", t.shape()}, {"data", t.values()}});
  return arr;
}

// Format "momoe-checkpoint/1": doubles are written in shortest round-trip
// form, so reading them back is bit-exact.
inline void save_checkpoint(const fs::path& path, const ExperimentConfig& cfg, const NamedTensors& ts) {
  json j{{"format", "momoe-checkpoint/1"}, {"config", to_json(cfg)}, {"tensors", tensors_to_json(ts)}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump() << '\n';
}

struct Checkpoint {
  ExperimentConfig config;
  std::map<std::string, std::pair<Shape, std::vector<double>>> tensors;
};

inline Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open");
  const json j = json::parse(in);
  if (j.value("format", "") != "momoe-checkpoint/1") throw ConfigError(path.string() + ": not a momoe checkpoint");
  Checkpoint c;
  c.config = parse_config(j.at("config"));
  for (const auto& t : j.at("tensors")) {
    c.tensors[t.at("name").get<std::string>()] = {t.at("shape").get<Shape>(), t.at("data").get<std::vector<double>>()};
  }
  return c;
}

// Copies checkpoint values into the live tensors, matching names and shapes.
inline void restore(const Checkpoint& c, const NamedTensors& into) {
  for (const auto& [name, t] : into) {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw ConfigError("checkpoint: missing tensor " + name);
    if (it->second.first != t.shape()) throw ConfigError("checkpoint: shape mismatch for " + name);
    Tensor live = t;
    auto d = live.mutable_data();
    std::copy(it->second.second.begin(), it->second.second.end(), d.begin());
  }
}

// ---------------------------------------------------------------------------
// Loss helpers

// Per-row negative log-likelihood computed from logit values (no tape).
inline std::vector<double> row_nll(const Tensor& logits, const std::vector<std::size_t>& targets) {
  const std::size_t m = logits.rows(), n = logits.cols();
  const auto x = logits.data();
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = x[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x[i * n + j] - mx);
    out[i] = mx + std::log(z) - x[i * n + targets[i]];
  }
  return out;
}

struct LmEval {
  double loss_all = 0.0;
  double loss_clean_targets = 0.0;
  std::size_t tokens = 0;
  std::size_t clean_targets = 0;
};

// Inputs and targets come from `inputs`; loss_clean_targets averages only
// the positions whose target equals the reference token.
inline LmEval evaluate_lm(const TinyLm& model, const std::vector<Sequence>& inputs, const std::vector<Sequence>& reference,
                          std::size_t chunk) {
  LmEval ev;
  double all = 0.0, clean = 0.0;
  for (std::size_t start = 0; start < inputs.size(); start += chunk) {
    std::vector<std::size_t> pick;
    for (std::size_t k = start; k < std::min(inputs.size(), start + chunk); ++k) pick.push_back(k);
    const LmBatch b = make_batch(inputs, pick, model.sentinel());
    const LmBatch ref = make_batch(reference, pick, model.sentinel());
    const auto nll = row_nll(model.logits(b.cur, b.prev), b.target);
    for (std::size_t i = 0; i < nll.size(); ++i) {
      all += nll[i];
      ++ev.tokens;
      if (b.target[i] == ref.target[i]) {
        clean += nll[i];
        ++ev.clean_targets;
      }
    }
  }
  ev.loss_all = all / static_cast<double>(ev.tokens);
  ev.loss_clean_targets = ev.clean_targets ? clean / static_cast<double>(ev.clean_targets) : 0.0;
  return ev;
}

// ---------------------------------------------------------------------------
// Runs

struct RunResult {
  fs::path dir;
  std::vector<double> train_loss;
  std::vector<double> valid_loss;
  double unigram_entropy = 0.0;  // tiny_lm only
  LmEval clean;
  LmEval corrupted;
  bool diverged = false;
  std::string divergence;
};

namespace detail {

class Trainer {
 public:
  Trainer(const TrainerConfig& cfg) : cfg_(cfg), adam_(AdamOptions{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay}) {}

  void step(std::vector<Tensor>& params) {
    if (cfg_.optimizer == "sgd") {
      sgd_step(params, cfg_.lr);
    } else {
      adam_.step(params);
    }
    zero_grads(params);
  }

 private:
  TrainerConfig cfg_;
  Adam adam_;
};

inline void write_load(const fs::path& path, const std::string& hash, const std::vector<LoadHistogram>& hists) {
  CsvWriter w(path, hash, "layer,rank,proportion");
  for (std::size_t t = 0; t < hists.size(); ++t) {
    const auto p = hists[t].proportions();
    for (std::size_t r = 0; r < p.size(); ++r) w.row({std::to_string(t), std::to_string(r), fmt_double(p[r])});
  }
}

inline void write_norms(const fs::path& path, const std::string& hash, const NormTrace& trace) {
  CsvWriter w(path, hash, "layer,checkpoint,mean_output_norm");
  for (const auto& r : trace) w.row({std::to_string(r.layer), r.checkpoint, fmt_double(r.mean_output_norm)});
}

inline void write_divergence(const fs::path& dir, const TrainingDivergence& e) {
  std::ofstream out(dir / "divergence.txt");
  out << "layer=" << e.layer() << " step=" << e.step() << '\n' << e.what() << '\n';
}

}  // namespace detail

// Norm-rank load over `seqs`, with every expert evaluated.
inline std::vector<LoadHistogram> lm_load_histograms(const TinyLm& model, const std::vector<Sequence>& seqs,
                                                     std::size_t chunk) {
  std::vector<LoadHistogram> hists(model.stack.depth(), LoadHistogram(model.stack.layers.front().num_experts()));
  for (std::size_t start = 0; start < seqs.size(); start += chunk) {
    std::vector<std::size_t> pick;
    for (std::size_t k = start; k < std::min(seqs.size(), start + chunk); ++k) pick.push_back(k);
    const LmBatch b = make_batch(seqs, pick, model.sentinel());
    StackTrace trace;
    model.stack.forward(model.embed(b.cur, b.prev), &trace, ForwardOptions{true});
    for (std::size_t t = 0; t < trace.outputs.size(); ++t) record_selection(hists[t], trace.outputs[t]);
  }
  return hists;
}

inline void lm_norms(NormTrace& trace, const TinyLm& model, const std::vector<Sequence>& seqs, std::size_t chunk,
                     std::size_t batches, const std::string& tag) {
  std::vector<double> sums(model.stack.depth(), 0.0);
  std::size_t n = 0;
  for (std::size_t k = 0; k < batches && k * chunk < seqs.size(); ++k) {
    std::vector<std::size_t> pick;
    for (std::size_t i = k * chunk; i < std::min(seqs.size(), (k + 1) * chunk); ++i) pick.push_back(i);
    const LmBatch b = make_batch(seqs, pick, model.sentinel());
    const auto norms = layer_output_norms(model.stack, model.embed(b.cur, b.prev));
    for (std::size_t t = 0; t < norms.size(); ++t) sums[t] += norms[t];
    ++n;
  }
  for (std::size_t t = 0; t < sums.size(); ++t) trace.push_back({t, tag, sums[t] / static_cast<double>(n)});
}

struct LmSetup {
  TinyCorpus corpus;
  TinyLm model;
  std::uint64_t corrupt_seed = 0;
  Rng rng;
};

inline LmSetup build_lm(const ExperimentConfig& cfg) {
  LmSetup s{TinyCorpus{}, TinyLm{}, 0, Rng(cfg.trainer.seed)};
  s.corpus = build_tiny_corpus(cfg.data, s.rng);
  s.model = TinyLm::make(cfg.data.vocab, cfg.model, cfg.dynamics, s.rng);
  s.corrupt_seed = s.rng();
  return s;
}

inline RunResult run_tiny_lm(const ExperimentConfig& cfg, const fs::path& dir, const std::string& hash) {
  RunResult res;
  res.dir = dir;
  LmSetup setup = build_lm(cfg);
  auto& model = setup.model;
  auto& rng = setup.rng;
  const auto& corpus = setup.corpus;
  res.unigram_entropy = unigram_entropy(corpus.train);
  const std::size_t bs = cfg.trainer.batch_size;

  NormTrace norms;

  std::vector<Tensor> params = model.parameters();
  detail::Trainer trainer(cfg.trainer);
  CsvWriter metrics(dir / "metrics.csv", hash, "epoch,train_loss,valid_loss");
  long step = 0;
  try {
    lm_norms(norms, model, corpus.valid, bs, cfg.diagnostics.batches, "init");
    for (std::size_t epoch = 1; epoch <= cfg.trainer.epochs; ++epoch) {
      std::vector<std::size_t> order(corpus.train.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      double total = 0.0;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < order.size(); start += bs) {
        const std::vector<std::size_t> pick(order.begin() + static_cast<std::ptrdiff_t>(start),
                                            order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + bs)));
        const LmBatch b = make_batch(corpus.train, pick, model.sentinel());
        const Tensor loss = cross_entropy(model.logits(b.cur, b.prev, nullptr, {}, step), b.target);
        if (!std::isfinite(loss.item())) throw TrainingDivergence("non-finite loss", -1, step);
        backward(loss);
        trainer.step(params);
        total += loss.item();
        ++batches;
        ++step;
      }
      res.train_loss.push_back(total / static_cast<double>(batches));
      res.valid_loss.push_back(evaluate_lm(model, corpus.valid, corpus.valid, bs).loss_all);
      metrics.row({std::to_string(epoch), fmt_double(res.train_loss.back()), fmt_double(res.valid_loss.back())});
      if (cfg.diagnostics.every_epochs && epoch % cfg.diagnostics.every_epochs == 0) {
        lm_norms(norms, model, corpus.valid, bs, cfg.diagnostics.batches, "epoch" + std::to_string(epoch));
      }
    }
  } catch (const TrainingDivergence& e) {
    res.diverged = true;
    res.divergence = e.what();
    detail::write_divergence(dir, e);
    return res;
  }

  res.clean = evaluate_lm(model, corpus.valid, corpus.valid, bs);
  const auto attacked = corrupt_tokens(corpus.valid, cfg.eval.swap_rate, corpus.sentinel(), setup.corrupt_seed);
  res.corrupted = evaluate_lm(model, attacked, corpus.valid, bs);
  {
    CsvWriter ev(dir / "eval.csv", hash, "split,swap_rate,loss_all,loss_clean_targets,tokens");
    ev.row({"clean", fmt_double(0.0), fmt_double(res.clean.loss_all), fmt_double(res.clean.loss_clean_targets),
            std::to_string(res.clean.tokens)});
    ev.row({"corrupted", fmt_double(cfg.eval.swap_rate), fmt_double(res.corrupted.loss_all),
            fmt_double(res.corrupted.loss_clean_targets), std::to_string(res.corrupted.tokens)});
  }
  {
    CsvWriter sm(dir / "summary.csv", hash, "metric,value");
    sm.row({"unigram_entropy", fmt_double(res.unigram_entropy)});
    sm.row({"unigram_valid_cross_entropy", fmt_double(unigram_cross_entropy(corpus.train, corpus.valid, corpus.vocab))});
    sm.row({"final_train_loss", fmt_double(res.train_loss.empty() ? NAN : res.train_loss.back())});
    sm.row({"final_valid_loss", fmt_double(res.clean.loss_all)});
    sm.row({"corrupted_loss_all", fmt_double(res.corrupted.loss_all)});
    sm.row({"corrupted_loss_clean_targets", fmt_double(res.corrupted.loss_clean_targets)});
    sm.row({"steps", std::to_string(step)});
  }
  detail::write_norms(dir / "norms.csv", hash, norms);
  detail::write_load(dir / "load.csv", hash, lm_load_histograms(model, corpus.valid, bs));
  save_checkpoint(dir / "checkpoint.json", cfg, named_parameters(model));
  return res;
}

struct QuadraticSetup {
  QuadraticTask task;
  MomentumSmoeStack stack;
  Tensor eval_starts;
  Rng rng;
};

inline Tensor random_starts(std::size_t count, std::size_t dim, double scale, Rng& rng) {
  return randn({count, dim}, rng, scale);
}

// T layers that share the task's fixed experts, each with its own router.
inline QuadraticSetup build_quadratic(const ExperimentConfig& cfg) {
  QuadraticSetup s{QuadraticTask{}, MomentumSmoeStack{}, Tensor{}, Rng(cfg.trainer.seed)};
  s.task = build_quadratic_task(cfg.quadratic.spec, cfg.model.top_k, s.rng);
  for (std::size_t t = 0; t < cfg.model.layers; ++t) {
    SmoeLayer l = s.task.layer;
    l.pre_norm = cfg.model.pre_norm;
    l.router = Router::make(cfg.quadratic.spec.objectives, cfg.quadratic.spec.dim, l.router.top_k, s.rng);
    s.stack.layers.push_back(l);
  }
  s.stack.configure(cfg.dynamics);
  s.eval_starts = random_starts(cfg.quadratic.starts, cfg.quadratic.spec.dim, 3.0 * cfg.quadratic.spec.center_scale, s.rng);
  return s;
}

inline RunResult run_quadratic(const ExperimentConfig& cfg, const fs::path& dir, const std::string& hash) {
  RunResult res;
  res.dir = dir;
  QuadraticSetup setup = build_quadratic(cfg);
  auto& stack = setup.stack;
  const auto& obj = setup.task.objectives;
  const std::size_t bs = cfg.trainer.batch_size;

  NormTrace norms;
  std::vector<Tensor> params = stack.parameters();
  detail::Trainer trainer(cfg.trainer);
  CsvWriter metrics(dir / "metrics.csv", hash, "epoch,train_loss,valid_loss");
  long step = 0;
  try {
    record_norms(norms, stack, setup.eval_starts, "init");
    for (std::size_t epoch = 1; epoch <= cfg.trainer.epochs; ++epoch) {
      const Tensor starts = random_starts(cfg.quadratic.starts, obj.n, 3.0 * cfg.quadratic.spec.center_scale, setup.rng);
      double total = 0.0;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < cfg.quadratic.starts; start += bs) {
        std::vector<std::size_t> rows;
        for (std::size_t i = start; i < std::min(cfg.quadratic.starts, start + bs); ++i) rows.push_back(i);
        const Tensor loss = quadratic_loss(obj, stack.forward(gather_rows(starts, rows), nullptr, {}, step));
        if (!std::isfinite(loss.item())) throw TrainingDivergence("non-finite loss", -1, step);
        backward(loss);
        trainer.step(params);
        total += loss.item();
        ++batches;
        ++step;
      }
      res.train_loss.push_back(total / static_cast<double>(batches));
      res.valid_loss.push_back(quadratic_loss(obj, stack.forward(setup.eval_starts)).item());
      metrics.row({std::to_string(epoch), fmt_double(res.train_loss.back()), fmt_double(res.valid_loss.back())});
      if (cfg.diagnostics.every_epochs && epoch % cfg.diagnostics.every_epochs == 0) {
        record_norms(norms, stack, setup.eval_starts, "epoch" + std::to_string(epoch));
      }
    }
  } catch (const TrainingDivergence& e) {
    res.diverged = true;
    res.divergence = e.what();
    detail::write_divergence(dir, e);
    return res;
  }

  const double final_loss = quadratic_loss(obj, stack.forward(setup.eval_starts)).item();
  {
    CsvWriter ev(dir / "eval.csv", hash, "split,swap_rate,loss_all,loss_clean_targets,tokens");
    ev.row({"clean", fmt_double(0.0), fmt_double(final_loss), fmt_double(final_loss),
            std::to_string(cfg.quadratic.starts)});
  }
  {
    CsvWriter sm(dir / "summary.csv", hash, "metric,value");
    sm.row({"final_train_loss", fmt_double(res.train_loss.empty() ? NAN : res.train_loss.back())});
    sm.row({"final_valid_loss", fmt_double(final_loss)});
    sm.row({"steps", std::to_string(step)});
  }
  std::vector<LoadHistogram> hists(stack.depth(), LoadHistogram(obj.size()));
  StackTrace trace;
  stack.forward(setup.eval_starts, &trace, ForwardOptions{true});
  for (std::size_t t = 0; t < trace.outputs.size(); ++t) record_selection(hists[t], trace.outputs[t]);
  detail::write_norms(dir / "norms.csv", hash, norms);
  detail::write_load(dir / "load.csv", hash, hists);
  save_checkpoint(dir / "checkpoint.json", cfg, named_parameters(stack));
  return res;
}

inline RunResult run_experiment(const ExperimentConfig& cfg) {
  const fs::path dir = resolve_output_dir(cfg.output_dir);
  fs::create_directories(dir);
  std::error_code ec;
  fs::remove(dir / "divergence.txt", ec);
  const std::string hash = config_hash(cfg);
  return cfg.task == TaskKind::tiny_lm ? run_tiny_lm(cfg, dir, hash) : run_quadratic(cfg, dir, hash);
}

}  // namespace momoe
