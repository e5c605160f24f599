// momoe: command-line front end.
//
//   momoe run <config.json> [--output-dir DIR]
//   momoe sweep-stability [grid flags] [--out FILE]
//   momoe verify-mgda [--seed N] [--instances N] [--out-dir DIR]
//   momoe diagnose <checkpoint.json> [--out-dir DIR]
//
// Relative output paths resolve under $MOMOE_OUTPUT_ROOT (default "runs").

#include <algorithm>
#include <chrono>
#include <functional>
#include <limits>
#include <cstdio>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "momoe/momoe.hpp"

namespace {

using namespace momoe;

int cmd_run(const std::string& path, const std::string& output_dir) {
  ExperimentConfig cfg = load_config(path);
  if (!output_dir.empty()) cfg.output_dir = output_dir;
  const auto t0 = std::chrono::steady_clock::now();
  const RunResult r = run_experiment(cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (r.diverged) {
    std::cerr << "momoe: training diverged: " << r.divergence << "\n  report: " << (r.dir / "divergence.txt").string()
              << '\n';
    return 3;
  }
  std::printf("run %s: %zu epochs in %.2f s, config_hash=%s\n", cfg.name.c_str(), r.train_loss.size(), secs,
              config_hash(cfg).c_str());
  if (!r.train_loss.empty()) {
    std::printf("  train_loss %.6f  valid_loss %.6f\n", r.train_loss.back(), r.valid_loss.back());
  }
  if (cfg.task == TaskKind::tiny_lm) {
    std::printf("  unigram_entropy %.6f  corrupted(swap_rate=%.3g) loss_all %.6f loss_clean_targets %.6f\n",
                r.unigram_entropy, cfg.eval.swap_rate, r.corrupted.loss_all, r.corrupted.loss_clean_targets);
  }
  std::printf("  outputs in %s\n", r.dir.string().c_str());
  return 0;
}

struct SweepFlags {
  double mu_lo = -1.5, mu_hi = 1.5, mu_step = 0.05;
  double gs_lo = -0.5, gs_hi = 4.5, gs_step = 0.05;
  std::size_t steps = 500;
  double tau = 1e-3;
  double guard = 1e-2;
  std::string out = "stability/sweep.csv";
};

int cmd_sweep(const SweepFlags& f) {
  const json meta{{"mu", {f.mu_lo, f.mu_hi, f.mu_step}}, {"gamma_sigma", {f.gs_lo, f.gs_hi, f.gs_step}},
                  {"steps", f.steps}, {"tau", f.tau}, {"guard", f.guard}};
  const auto mus = Grid{f.mu_lo, f.mu_hi, f.mu_step}.points();
  const auto gss = Grid{f.gs_lo, f.gs_hi, f.gs_step}.points();
  const SweepResult sweep = region_sweep(mus, gss, SimulationConfig{f.steps, f.tau}, f.guard);
  const fs::path out = resolve_output_dir(f.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  CsvWriter w(out, hex64(fnv1a64(meta.dump())), sweep_csv_header());
  for (const auto& row : sweep.rows) w.row({sweep_csv_row(row)});
  const auto& s = sweep.summary;
  std::printf("sweep: %zu cells, %zu outside the guard band\n", s.cells, s.outside_guard);
  std::printf("  analytic vs spectral agreement %.6f, all three agree %.6f\n", s.spectral_agreement(),
              s.empirical_agreement());
  std::printf("  wrote %s\n", out.string().c_str());
  return 0;
}

// Minimum norm over a simplex grid with the given number of subdivisions.
double grid_min_norm(const std::vector<Vec>& vs, int div) {
  const std::size_t e = vs.size(), n = vs[0].size();
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> c(e, 0);
  Vec v(n);
  // Enumerate compositions of div into e parts.
  std::function<void(std::size_t, int)> rec = [&](std::size_t i, int left) {
    if (i + 1 == e) {
      c[i] = left;
      std::fill(v.begin(), v.end(), 0.0);
      for (std::size_t k = 0; k < e; ++k)
        for (std::size_t j = 0; j < n; ++j) v[j] += (static_cast<double>(c[k]) / div) * vs[k][j];
      best = std::min(best, norm2(v));
      return;
    }
    for (int a = 0; a <= left; ++a) {
      c[i] = a;
      rec(i + 1, left - a);
    }
  };
  rec(0, div);
  return best;
}

int cmd_verify_mgda(std::uint64_t seed, std::size_t instances, const std::string& out_dir) {
  const json meta{{"seed", seed}, {"instances", instances}};
  const std::string hash = hex64(fnv1a64(meta.dump()));
  const fs::path dir = resolve_output_dir(out_dir);
  fs::create_directories(dir);
  Rng rng(seed);
  std::normal_distribution<double> n01;
  std::uniform_int_distribution<std::size_t> pick_e(2, 3), pick_n(2, 8);

  CsvWriter checks(dir / "mgda_checks.csv", hash, "check,instance,value,tolerance,pass");
  bool all_ok = true;
  auto record = [&](const std::string& name, std::size_t inst, double value, double tol, bool ok) {
    all_ok = all_ok && ok;
    checks.row({name, std::to_string(inst), fmt_double(value), fmt_double(tol), ok ? "1" : "0"});
  };

  for (std::size_t k = 0; k < instances; ++k) {
    const std::size_t e = pick_e(rng), n = pick_n(rng);
    std::vector<Vec> vs(e, Vec(n));
    for (auto& v : vs)
      for (auto& x : v) x = n01(rng);
    const MinNormResult r = min_norm_point(vs);
    const double brute = grid_min_norm(vs, 1000);
    record("brute_force_norm_gap", k, r.norm - brute, 1e-5, r.norm <= brute + 1e-5);
    double worst = std::numeric_limits<double>::infinity();
    for (const auto& v : vs) worst = std::min(worst, dot(r.v, v) - r.norm * r.norm);
    record("common_descent_slack", k, worst, 1e-9, worst >= -1e-9);
    if (e == 2) {
      Vec d(n);
      for (std::size_t j = 0; j < n; ++j) d[j] = vs[0][j] - vs[1][j];
      const double t = std::clamp(-dot(vs[1], d) / dot(d, d), 0.0, 1.0);
      Vec p(n);
      for (std::size_t j = 0; j < n; ++j) p[j] = vs[1][j] + t * d[j];
      record("segment_projection_gap", k, std::abs(norm2(p) - r.norm), 1e-8, std::abs(norm2(p) - r.norm) <= 1e-8);
    }
  }

  // Two quadratics with H = I and centers (-1, 0), (1, 0): every point on the
  // open segment between the centers is Pareto-stationary.
  ObjectiveSet two;
  two.n = 2;
  two.h = {{1, 0, 0, 1}, {1, 0, 0, 1}};
  two.c = {{-1, 0}, {1, 0}};
  two.validate();
  const double stationary = min_norm_point(local_gradients(two, {0.3, 0.0}).raw).norm;
  record("pareto_stationary_min_norm", 0, stationary, 1e-10, stationary <= 1e-10);

  // Router weights next to oracle weights on a trained quadratic stack with K = E.
  ExperimentConfig cfg = parse_config(json{{"task", "quadratic_multiobj"},
                                           {"model", {{"layers", 6}, {"top_k", 3}}},
                                           {"dynamics", {{"mode", "baseline"}, {"gamma", 0.5}}},
                                           {"trainer", {{"epochs", 30}, {"lr", 1e-2}, {"batch_size", 16}, {"seed", seed}}},
                                           {"quadratic", {{"starts", 16}}}});
  QuadraticSetup q = build_quadratic(cfg);
  const Tensor probe = gather_rows(q.eval_starts, {0, 1, 2, 3});
  NormTrace norms;
  record_norms(norms, q.stack, probe, "init");
  std::vector<Tensor> params = q.stack.parameters();
  Adam adam(AdamOptions{cfg.trainer.lr});
  for (std::size_t epoch = 0; epoch < cfg.trainer.epochs; ++epoch) {
    const Tensor starts = random_starts(cfg.quadratic.starts, cfg.quadratic.spec.dim, 3.0, q.rng);
    backward(quadratic_loss(q.task.objectives, q.stack.forward(starts)));
    adam.step(params);
    zero_grads(params);
  }
  record_norms(norms, q.stack, probe, "trained");
  detail::write_norms(dir / "mgda_norms.csv", hash, norms);

  CsvWriter alpha(dir / "mgda_alpha.csv", hash, "layer,token,expert,router_weight,oracle_alpha");
  LayerState s = LayerState::start(probe);
  for (std::size_t t = 0; t < q.stack.depth(); ++t) {
    LayerOutput first;
    bool seen = false;
    auto field = [&](const Tensor& x) {
      LayerOutput o = smoe_forward(q.stack.layers[t], x);
      if (!seen) first = o;
      seen = true;
      return o.f_out;
    };
    const Tensor xt = s.x;
    s = dynamics_step(field, s, q.stack.modes[t], t, q.stack.dynamics, q.stack.params_for(t));
    const std::size_t e = q.task.objectives.size(), n = q.task.objectives.n;
    for (std::size_t i = 0; i < probe.rows(); ++i) {
      Vec x(xt.data().begin() + static_cast<std::ptrdiff_t>(i * n),
            xt.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
      const MinNormResult r = min_norm_point(local_gradients(q.task.objectives, x).raw);
      for (std::size_t k = 0; k < e; ++k) {
        alpha.row({std::to_string(t), std::to_string(i), std::to_string(k),
                   fmt_double(first.decision.weights.data()[i * e + k]), fmt_double(r.alpha[k])});
      }
    }
  }
  std::printf("verify-mgda: %s; outputs in %s\n", all_ok ? "all checks pass" : "CHECK FAILED", dir.string().c_str());
  return all_ok ? 0 : 1;
}

int cmd_diagnose(const std::string& path, const std::string& out_dir) {
  const Checkpoint ck = load_checkpoint(path);
  const ExperimentConfig& cfg = ck.config;
  const fs::path dir = out_dir.empty() ? fs::path(path).parent_path() : resolve_output_dir(out_dir);
  if (!dir.empty()) fs::create_directories(dir);
  const std::string hash = config_hash(cfg);
  if (cfg.task == TaskKind::tiny_lm) {
    LmSetup s = build_lm(cfg);
    restore(ck, named_parameters(s.model));
    NormTrace norms;
    lm_norms(norms, s.model, s.corpus.valid, cfg.trainer.batch_size, cfg.diagnostics.batches, "checkpoint");
    detail::write_norms(dir / "diagnose_norms.csv", hash, norms);
    detail::write_load(dir / "diagnose_load.csv", hash, lm_load_histograms(s.model, s.corpus.valid, cfg.trainer.batch_size));
  } else {
    QuadraticSetup s = build_quadratic(cfg);
    restore(ck, named_parameters(s.stack));
    NormTrace norms;
    record_norms(norms, s.stack, s.eval_starts, "checkpoint");
    detail::write_norms(dir / "diagnose_norms.csv", hash, norms);
    std::vector<LoadHistogram> hists(s.stack.depth(), LoadHistogram(s.task.objectives.size()));
    StackTrace trace;
    s.stack.forward(s.eval_starts, &trace, ForwardOptions{true});
    for (std::size_t t = 0; t < trace.outputs.size(); ++t) record_selection(hists[t], trace.outputs[t]);
    detail::write_load(dir / "diagnose_load.csv", hash, hists);
  }
  std::printf("diagnose: wrote diagnose_norms.csv and diagnose_load.csv to %s\n", dir.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"momoe: momentum-wrapped sparse mixture-of-experts experiments"};
  app.require_subcommand(1);

  std::string config_path, output_dir;
  auto* run = app.add_subcommand("run", "train and evaluate one experiment config");
  run->add_option("config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--output-dir", output_dir, "override output_dir from the config");

  SweepFlags sf;
  auto* sweep = app.add_subcommand("sweep-stability", "sweep the (mu, gamma*sigma) plane");
  sweep->add_option("--mu-lo", sf.mu_lo, "lowest mu")->capture_default_str();
  sweep->add_option("--mu-hi", sf.mu_hi, "highest mu")->capture_default_str();
  sweep->add_option("--mu-step", sf.mu_step, "mu grid step")->capture_default_str()->check(CLI::PositiveNumber);
  sweep->add_option("--gs-lo", sf.gs_lo, "lowest gamma*sigma")->capture_default_str();
  sweep->add_option("--gs-hi", sf.gs_hi, "highest gamma*sigma")->capture_default_str();
  sweep->add_option("--gs-step", sf.gs_step, "gamma*sigma grid step")->capture_default_str()->check(CLI::PositiveNumber);
  sweep->add_option("--steps", sf.steps, "simulation steps")->capture_default_str()->check(CLI::Range(2, 1000000));
  sweep->add_option("--tau", sf.tau, "decay threshold |x_T| < tau |x_0|")->capture_default_str();
  sweep->add_option("--guard", sf.guard, "spectral-radius guard band")->capture_default_str();
  sweep->add_option("--out", sf.out, "output CSV")->capture_default_str();

  std::uint64_t seed = 1;
  std::size_t instances = 20;
  std::string mgda_dir = "mgda";
  auto* mgda = app.add_subcommand("verify-mgda", "check the min-norm oracle and emit router vs oracle weights");
  mgda->add_option("--seed", seed, "random seed")->capture_default_str();
  mgda->add_option("--instances", instances, "random min-norm instances")->capture_default_str();
  mgda->add_option("--out-dir", mgda_dir, "output directory")->capture_default_str();

  std::string ckpt, diag_dir;
  auto* diag = app.add_subcommand("diagnose", "load and norm diagnostics for a checkpoint");
  diag->add_option("checkpoint", ckpt, "checkpoint.json written by run")->required()->check(CLI::ExistingFile);
  diag->add_option("--out-dir", diag_dir, "output directory (default: next to the checkpoint)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // usage errors share the config-error code
  }
  try {
    if (*run) return cmd_run(config_path, output_dir);
    if (*sweep) return cmd_sweep(sf);
    if (*mgda) return cmd_verify_mgda(seed, instances, mgda_dir);
    if (*diag) return cmd_diagnose(ckpt, diag_dir);
  } catch (const ConfigError& e) {
    std::cerr << "momoe: config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "momoe: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
