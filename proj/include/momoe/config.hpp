#pragma once

// Experiment configuration: a JSON document with a fixed schema. Every key
// is optional except `task`; unknown keys and wrong types are rejected with
// a ConfigError naming the dotted path of the field ("dynamics.mu").
//
//   {
//     "name": "tiny_lm_heavy_ball",
//     "task": "tiny_lm" | "quadratic_multiobj",
//     "output_dir": "tiny_lm_heavy_ball",
//     "model":    { "layers", "width", "experts", "top_k", "expert": "mlp"|"linear",
//                   "pre_norm", "expert_scale" },
//     "dynamics": { "mode", "mu", "gamma", "mu_im", "adam_mu", "beta", "rms_mu", "eps",
//                   "kappa", "rho", "restart_period", "learnable",
//                   "robust": { "p", "L", "m_strong" },
//                   "allow_unstable_mu", "adaptive_first_layer_only",
//                   "nag_lookahead_plus", "detach_momentum", "per_layer_params" },
//     "trainer":  { "optimizer": "adam"|"sgd", "lr", "epochs", "batch_size", "seed",
//                   "weight_decay" },
//     "data":     { "vocab", "seq_len", "train_sequences", "valid_sequences" },
//     "quadratic":{ "objectives", "dim", "m", "L", "center_scale", "starts" },
//     "eval":     { "swap_rate" },
//     "diagnostics": { "every_epochs", "batches" }
//   }

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>

#include "json.hpp"
#include "momoe/dynamics.hpp"
#include "momoe/model.hpp"
#include "momoe/tasks.hpp"

namespace momoe {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using json = nlohmann::json;

enum class TaskKind { tiny_lm, quadratic_multiobj };

struct TrainerConfig {
  std::string optimizer = "adam";
  double lr = 3e-3;
  std::size_t epochs = 5;
  std::size_t batch_size = 4;  // sequences (tiny_lm) or starts (quadratic)
  std::uint64_t seed = 1;
  double weight_decay = 0.0;
};

struct QuadraticConfig {
  QuadraticSpec spec;
  std::size_t starts = 64;  // training starts per epoch; the same number for eval
};

struct EvalConfig {
  double swap_rate = 0.1;
};

struct DiagnosticsConfig {
  std::size_t every_epochs = 1;  // 0 disables periodic norm traces
  std::size_t batches = 2;       // validation batches per diagnostic pass
};

struct ExperimentConfig {
  std::string name = "experiment";
  TaskKind task = TaskKind::tiny_lm;
  std::string output_dir;
  StackShape model;
  DynamicsConfig dynamics;
  TrainerConfig trainer;
  CorpusSpec data;
  QuadraticConfig quadratic;
  EvalConfig eval;
  DiagnosticsConfig diagnostics;
};

namespace detail {

// Reads fields of one JSON object and remembers which keys were consumed.
class FieldReader {
 public:
  FieldReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + ": expected an object");
  }

  std::string where(const std::string& key) const {
    if (path_.empty()) return key;
    return key.empty() ? path_ : path_ + "." + key;
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  void read(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const json& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where(key) + ": expected a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where(key) + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned() || v.get<long long>() >= 0) {
          out = v.get<T>();
        } else {
          throw ConfigError(where(key) + ": expected a nonnegative integer");
        }
      } else {
        out = v.get<T>();
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where(key) + ": expected a number");
      out = v.get<T>();
    } else {
      if (!v.is_string()) throw ConfigError(where(key) + ": expected a string");
      out = v.get<std::string>();
    }
  }

  FieldReader child(const std::string& key) {
    seen_.insert(key);
    return FieldReader(j_.at(key), where(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where(it.key()) + ": unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ConfigError(field + ": " + why);
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  detail::FieldReader r(j, "");
  r.read("name", c.name);
  std::string task;
  detail::require(j.is_object() && j.contains("task"), "task", "required");
  r.read("task", task);
  if (task == "tiny_lm") {
    c.task = TaskKind::tiny_lm;
  } else if (task == "quadratic_multiobj") {
    c.task = TaskKind::quadratic_multiobj;
    c.model.expert = ExpertKind::linear;
    c.model.pre_norm = false;
    c.model.layers = 20;
    c.dynamics.mu = 0.5;
    c.dynamics.gamma = 0.5;
  } else {
    throw ConfigError("task: expected \"tiny_lm\" or \"quadratic_multiobj\", got \"" + task + "\"");
  }
  c.output_dir = c.name;
  r.read("output_dir", c.output_dir);

  bool width_given = false, experts_given = false;
  if (r.has("model")) {
    width_given = j.at("model").is_object() && j.at("model").contains("width");
    experts_given = j.at("model").is_object() && j.at("model").contains("experts");
    auto m = r.child("model");
    m.read("layers", c.model.layers);
    m.read("width", c.model.width);
    m.read("experts", c.model.experts);
    m.read("top_k", c.model.top_k);
    std::string kind = to_string(c.model.expert);
    m.read("expert", kind);
    if (kind == "mlp") {
      c.model.expert = ExpertKind::mlp;
    } else if (kind == "linear") {
      c.model.expert = ExpertKind::linear;
    } else {
      throw ConfigError("model.expert: expected \"mlp\" or \"linear\"");
    }
    m.read("pre_norm", c.model.pre_norm);
    m.read("expert_scale", c.model.expert_scale);
    m.finish();
  }
  detail::require(c.model.layers >= 1, "model.layers", "must be at least 1");
  detail::require(c.model.width >= 1, "model.width", "must be at least 1");
  detail::require(c.model.experts >= 1, "model.experts", "must be at least 1");
  detail::require(c.model.top_k >= 1 && c.model.top_k <= c.model.experts, "model.top_k",
                  "must lie in [1, model.experts]");

  if (r.has("dynamics")) {
    auto d = r.child("dynamics");
    std::string mode = to_string(c.dynamics.mode);
    d.read("mode", mode);
    const auto parsed = parse_mode(mode);
    if (!parsed) throw ConfigError("dynamics.mode: unknown mode \"" + mode + "\"");
    c.dynamics.mode = *parsed;
    d.read("mu", c.dynamics.mu);
    d.read("gamma", c.dynamics.gamma);
    d.read("mu_im", c.dynamics.mu_im);
    d.read("adam_mu", c.dynamics.adam_mu);
    d.read("beta", c.dynamics.beta);
    d.read("rms_mu", c.dynamics.rms_mu);
    d.read("eps", c.dynamics.eps);
    d.read("kappa", c.dynamics.kappa);
    d.read("rho", c.dynamics.rho);
    d.read("restart_period", c.dynamics.restart_period);
    std::string learn = to_string(c.dynamics.learnable);
    d.read("learnable", learn);
    const auto pl = parse_learnable(learn);
    if (!pl) throw ConfigError("dynamics.learnable: unknown setting \"" + learn + "\"");
    c.dynamics.learnable = *pl;
    if (d.has("robust")) {
      auto rb = d.child("robust");
      rb.read("p", c.dynamics.robust.p);
      rb.read("L", c.dynamics.robust.L);
      rb.read("m_strong", c.dynamics.robust.m_strong);
      rb.finish();
    }
    d.read("allow_unstable_mu", c.dynamics.allow_unstable_mu);
    d.read("adaptive_first_layer_only", c.dynamics.adaptive_first_layer_only);
    d.read("nag_lookahead_plus", c.dynamics.nag_lookahead_plus);
    d.read("detach_momentum", c.dynamics.detach_momentum);
    d.read("per_layer_params", c.dynamics.per_layer_params);
    d.finish();
  }
  try {
    c.dynamics.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("dynamics.") + e.what());
  }

  if (r.has("trainer")) {
    auto t = r.child("trainer");
    t.read("optimizer", c.trainer.optimizer);
    t.read("lr", c.trainer.lr);
    t.read("epochs", c.trainer.epochs);
    t.read("batch_size", c.trainer.batch_size);
    t.read("seed", c.trainer.seed);
    t.read("weight_decay", c.trainer.weight_decay);
    t.finish();
  }
  detail::require(c.trainer.optimizer == "adam" || c.trainer.optimizer == "sgd", "trainer.optimizer",
                  "expected \"adam\" or \"sgd\"");
  detail::require(c.trainer.lr > 0.0, "trainer.lr", "must be positive");
  detail::require(c.trainer.batch_size >= 1, "trainer.batch_size", "must be at least 1");
  detail::require(c.trainer.weight_decay >= 0.0, "trainer.weight_decay", "must be nonnegative");

  if (r.has("data")) {
    auto d = r.child("data");
    d.read("vocab", c.data.vocab);
    d.read("seq_len", c.data.seq_len);
    d.read("train_sequences", c.data.train_sequences);
    d.read("valid_sequences", c.data.valid_sequences);
    d.finish();
  }
  detail::require(c.data.vocab >= 3 && c.data.vocab <= 256, "data.vocab", "must lie in [3, 256]");
  detail::require(c.data.seq_len >= 2 && c.data.seq_len <= 64, "data.seq_len", "must lie in [2, 64]");
  detail::require(c.data.train_sequences >= 1, "data.train_sequences", "must be at least 1");
  detail::require(c.data.valid_sequences >= 1, "data.valid_sequences", "must be at least 1");

  if (r.has("quadratic")) {
    auto q = r.child("quadratic");
    q.read("objectives", c.quadratic.spec.objectives);
    q.read("dim", c.quadratic.spec.dim);
    q.read("m", c.quadratic.spec.m);
    q.read("L", c.quadratic.spec.L);
    q.read("center_scale", c.quadratic.spec.center_scale);
    q.read("starts", c.quadratic.starts);
    q.finish();
  }
  detail::require(c.quadratic.spec.objectives >= 1, "quadratic.objectives", "must be at least 1");
  detail::require(c.quadratic.spec.dim >= 1, "quadratic.dim", "must be at least 1");
  detail::require(c.quadratic.spec.m > 0.0 && c.quadratic.spec.m <= c.quadratic.spec.L, "quadratic.m",
                  "must satisfy 0 < m <= L");
  detail::require(c.quadratic.starts >= 1, "quadratic.starts", "must be at least 1");
  if (c.task == TaskKind::quadratic_multiobj) {
    if (!width_given) c.model.width = c.quadratic.spec.dim;
    if (!experts_given) c.model.experts = c.quadratic.spec.objectives;
    c.model.top_k = std::min(c.model.top_k, c.model.experts);
    detail::require(c.model.experts == c.quadratic.spec.objectives, "model.experts",
                    "must equal quadratic.objectives");
    detail::require(c.model.width == c.quadratic.spec.dim, "model.width", "must equal quadratic.dim");
    detail::require(c.model.expert == ExpertKind::linear, "model.expert", "quadratic task uses linear experts");
  }

  if (r.has("eval")) {
    auto e = r.child("eval");
    e.read("swap_rate", c.eval.swap_rate);
    e.finish();
  }
  detail::require(c.eval.swap_rate >= 0.0 && c.eval.swap_rate <= 1.0, "eval.swap_rate", "must lie in [0, 1]");

  if (r.has("diagnostics")) {
    auto d = r.child("diagnostics");
    d.read("every_epochs", c.diagnostics.every_epochs);
    d.read("batches", c.diagnostics.batches);
    d.finish();
  }
  detail::require(c.diagnostics.batches >= 1, "diagnostics.batches", "must be at least 1");
  r.finish();
  return c;
}

inline json to_json(const ExperimentConfig& c) {
  const auto& d = c.dynamics;
  return json{
      {"name", c.name},
      {"task", c.task == TaskKind::tiny_lm ? "tiny_lm" : "quadratic_multiobj"},
      {"output_dir", c.output_dir},
      {"model",
       {{"layers", c.model.layers},
        {"width", c.model.width},
        {"experts", c.model.experts},
        {"top_k", c.model.top_k},
        {"expert", to_string(c.model.expert)},
        {"pre_norm", c.model.pre_norm},
        {"expert_scale", c.model.expert_scale}}},
      {"dynamics",
       {{"mode", to_string(d.mode)},
        {"mu", d.mu},
        {"gamma", d.gamma},
        {"mu_im", d.mu_im},
        {"adam_mu", d.adam_mu},
        {"beta", d.beta},
        {"rms_mu", d.rms_mu},
        {"eps", d.eps},
        {"kappa", d.kappa},
        {"rho", d.rho},
        {"restart_period", d.restart_period},
        {"learnable", to_string(d.learnable)},
        {"robust", {{"p", d.robust.p}, {"L", d.robust.L}, {"m_strong", d.robust.m_strong}}},
        {"allow_unstable_mu", d.allow_unstable_mu},
        {"adaptive_first_layer_only", d.adaptive_first_layer_only},
        {"nag_lookahead_plus", d.nag_lookahead_plus},
        {"detach_momentum", d.detach_momentum},
        {"per_layer_params", d.per_layer_params}}},
      {"trainer",
       {{"optimizer", c.trainer.optimizer},
        {"lr", c.trainer.lr},
        {"epochs", c.trainer.epochs},
        {"batch_size", c.trainer.batch_size},
        {"seed", c.trainer.seed},
        {"weight_decay", c.trainer.weight_decay}}},
      {"data",
       {{"vocab", c.data.vocab},
        {"seq_len", c.data.seq_len},
        {"train_sequences", c.data.train_sequences},
        {"valid_sequences", c.data.valid_sequences}}},
      {"quadratic",
       {{"objectives", c.quadratic.spec.objectives},
        {"dim", c.quadratic.spec.dim},
        {"m", c.quadratic.spec.m},
        {"L", c.quadratic.spec.L},
        {"center_scale", c.quadratic.spec.center_scale},
        {"starts", c.quadratic.starts}}},
      {"eval", {{"swap_rate", c.eval.swap_rate}}},
      {"diagnostics", {{"every_epochs", c.diagnostics.every_epochs}, {"batches", c.diagnostics.batches}}},
  };
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_config(j);
}

// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

// Hash of the effective configuration (defaults filled in, keys sorted).
// output_dir is left out: where a run is written does not change what it computes.
inline std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  return hex64(fnv1a64(j.dump()));
}

}  // namespace momoe
