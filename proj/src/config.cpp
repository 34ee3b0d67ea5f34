#include "dmac/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "dmac/digest.hpp"
#include "dmac/errors.hpp"

namespace dmac::config {

namespace {

using json = nlohmann::ordered_json;

// Reads one object; every key must be consumed before finish().
class Reader {
 public:
  Reader(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(where() + " must be an object");
  }

  bool has(const std::string& key) const { return node_.contains(key); }

  const json* take(const std::string& key) {
    if (!node_.contains(key)) return nullptr;
    used_.insert(key);
    return &node_.at(key);
  }

  void get(const std::string& key, int& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) fail(key, "an integer");
      const auto x = v->get<long long>();
      if (x < INT32_MIN || x > INT32_MAX) fail(key, "a 32-bit integer");
      out = static_cast<int>(x);
    }
  }
  void get(const std::string& key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0))
        fail(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const std::string& key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) fail(key, "true or false");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  void get(const std::string& key, std::vector<int>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) fail(key, "an array of integers");
      std::vector<int> r;
      for (const auto& x : *v) {
        if (!x.is_number_integer()) fail(key, "an array of integers");
        r.push_back(x.get<int>());
      }
      out = std::move(r);
    }
  }
  void get(const std::string& key, std::optional<double>& out) {
    if (const json* v = take(key)) {
      if (v->is_null()) {
        out.reset();
        return;
      }
      if (!v->is_number()) fail(key, "a number or null");
      out = v->get<double>();
    }
  }

  Reader child(const std::string& key) {
    const json* v = take(key);
    static const json empty = json::object();
    return Reader(v ? *v : empty, join(key));
  }

  void finish() const {
    for (const auto& item : node_.items())
      if (!used_.count(item.key())) throw ConfigError("unknown key " + join(item.key()));
  }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError(join(key) + " must be " + what);
  }
  std::string where() const { return path_.empty() ? "config" : path_; }
  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& node_;
  std::string path_;
  std::set<std::string> used_;
};

std::string rule_name(nn::UpdateRule r) { return r == nn::UpdateRule::adam ? "adam" : "sgd"; }

nn::UpdateRule parse_rule(const std::string& s) {
  if (s == "adam") return nn::UpdateRule::adam;
  if (s == "sgd") return nn::UpdateRule::sgd;
  throw ConfigError("unknown update rule '" + s + "'");
}

json write_optimizer(const nn::OptimizerConfig& o) {
  return json{{"rule", rule_name(o.rule)},       {"learning_rate", o.learning_rate}, {"beta1", o.beta1},
              {"beta2", o.beta2},                {"epsilon", o.epsilon},             {"max_grad_norm", o.max_grad_norm}};
}

void read_optimizer(Reader r, nn::OptimizerConfig& o) {
  std::string rule = rule_name(o.rule);
  r.get("rule", rule);
  o.rule = parse_rule(rule);
  r.get("learning_rate", o.learning_rate);
  r.get("beta1", o.beta1);
  r.get("beta2", o.beta2);
  r.get("epsilon", o.epsilon);
  r.get("max_grad_norm", o.max_grad_norm);
  r.finish();
}

void write_features(json& j, const graph::FeatureOptions& f) {
  j["radius"] = f.graph.radius;
  j["min_weight"] = f.graph.min_weight;
  j["fully_connected"] = f.graph.fully_connected;
  j["embedding_dim"] = f.embedding_dim;
  j["iterations"] = f.iterations;
  j["disable_embedding"] = !f.use_embedding;
}

void read_features(Reader& r, graph::FeatureOptions& f) {
  r.get("radius", f.graph.radius);
  r.get("min_weight", f.graph.min_weight);
  r.get("fully_connected", f.graph.fully_connected);
  r.get("embedding_dim", f.embedding_dim);
  r.get("iterations", f.iterations);
  bool disable = !f.use_embedding;
  r.get("disable_embedding", disable);
  f.use_embedding = !disable;
}

json write_env(const env::EnvConfig& c) {
  return json{{"kind", env::to_string(c.kind)},
              {"agents", c.agents},
              {"width", c.width},
              {"height", c.height},
              {"horizon", c.horizon},
              {"radius", c.radius},
              {"seed", c.seed},
              {"capture_threshold", c.capture_threshold},
              {"prey_speed", c.prey_speed},
              {"signals", c.signals},
              {"scouts", c.scouts},
              {"win_fraction", c.win_fraction}};
}

env::EnvConfig read_env(Reader r) {
  std::string kind = env::to_string(env::Kind::traffic_junction);
  r.get("kind", kind);
  env::EnvConfig c = env::default_config(env::parse_kind(kind));
  r.get("agents", c.agents);
  r.get("width", c.width);
  r.get("height", c.height);
  r.get("horizon", c.horizon);
  r.get("radius", c.radius);
  r.get("seed", c.seed);
  r.get("capture_threshold", c.capture_threshold);
  r.get("prey_speed", c.prey_speed);
  r.get("signals", c.signals);
  r.get("scouts", c.scouts);
  r.get("win_fraction", c.win_fraction);
  r.finish();
  return c;
}

json write_team(const team::TeamConfig& c, int episodes) {
  json j;
  j["episodes"] = episodes;
  j["mode"] = team::to_string(c.mode);
  j["hidden"] = c.hidden;
  j["gate_hidden"] = c.gate_hidden;
  j["q_optimizer"] = write_optimizer(c.q_optimizer);
  j["gate_optimizer"] = write_optimizer(c.gate_optimizer);
  j["gamma"] = c.gamma;
  j["epsilon_start"] = c.epsilon_start;
  j["epsilon_end"] = c.epsilon_end;
  j["epsilon_fraction"] = c.epsilon_fraction;
  j["buffer_transitions"] = c.buffer_transitions;
  j["batch"] = c.batch;
  j["train_every"] = c.train_every;
  j["target_sync"] = c.target_sync;
  j["comm_cost"] = c.comm_cost;
  j["cp_batch"] = c.cp_batch;
  j["completion_bonus"] = c.completion_bonus;
  j["step_penalty"] = c.step_penalty;
  j["gate_open_init"] = c.gate_open_init ? json(*c.gate_open_init) : json(nullptr);
  j["gate_delay"] = c.gate_delay;
  return j;
}

void read_team(Reader r, team::TeamConfig& c, int& episodes) {
  r.get("episodes", episodes);
  std::string mode = team::to_string(c.mode);
  r.get("mode", mode);
  c.mode = team::parse_comm_mode(mode);
  r.get("hidden", c.hidden);
  r.get("gate_hidden", c.gate_hidden);
  read_optimizer(r.child("q_optimizer"), c.q_optimizer);
  read_optimizer(r.child("gate_optimizer"), c.gate_optimizer);
  r.get("gamma", c.gamma);
  r.get("epsilon_start", c.epsilon_start);
  r.get("epsilon_end", c.epsilon_end);
  r.get("epsilon_fraction", c.epsilon_fraction);
  r.get("buffer_transitions", c.buffer_transitions);
  r.get("batch", c.batch);
  r.get("train_every", c.train_every);
  r.get("target_sync", c.target_sync);
  r.get("comm_cost", c.comm_cost);
  r.get("cp_batch", c.cp_batch);
  r.get("completion_bonus", c.completion_bonus);
  r.get("step_penalty", c.step_penalty);
  r.get("gate_open_init", c.gate_open_init);
  r.get("gate_delay", c.gate_delay);
  r.finish();
}

json write_adversary(const adversary::AdversaryConfig& c, int episodes) {
  json j;
  j["episodes"] = episodes;
  j["w1"] = c.w1;
  j["w2"] = c.w2;
  j["xi"] = c.xi;
  j["gamma"] = c.gamma;
  j["epsilon_start"] = c.epsilon_start;
  j["epsilon_end"] = c.epsilon_end;
  j["epsilon_fraction"] = c.epsilon_fraction;
  j["buffer_transitions"] = c.buffer_transitions;
  j["batch"] = c.batch;
  j["train_every"] = c.train_every;
  j["target_sync"] = c.target_sync;
  j["hidden"] = c.hidden;
  j["optimizer"] = write_optimizer(c.optimizer);
  j["mixer"] = adversary::to_string(c.mixer);
  j["budget"] = c.budget;
  write_features(j, c.features);
  return j;
}

void read_adversary(Reader r, adversary::AdversaryConfig& c, int& episodes) {
  r.get("episodes", episodes);
  r.get("w1", c.w1);
  r.get("w2", c.w2);
  r.get("xi", c.xi);
  r.get("gamma", c.gamma);
  r.get("epsilon_start", c.epsilon_start);
  r.get("epsilon_end", c.epsilon_end);
  r.get("epsilon_fraction", c.epsilon_fraction);
  r.get("buffer_transitions", c.buffer_transitions);
  r.get("batch", c.batch);
  r.get("train_every", c.train_every);
  r.get("target_sync", c.target_sync);
  r.get("hidden", c.hidden);
  read_optimizer(r.child("optimizer"), c.optimizer);
  std::string mixer = adversary::to_string(c.mixer);
  r.get("mixer", mixer);
  c.mixer = adversary::parse_mixer(mixer);
  r.get("budget", c.budget);
  read_features(r, c.features);
  r.finish();
}

json write_retrain(const retrain::RetrainSchedule& s) {
  return json{{"rounds", s.rounds},
              {"adversary_episodes", s.adversary_episodes},
              {"cp_episodes", s.cp_episodes},
              {"p_mask", s.p_mask},
              {"refresh_adversary", s.refresh_adversary},
              {"joint", s.joint},
              {"metric_episodes", s.metric_episodes}};
}

void read_retrain(Reader r, retrain::RetrainSchedule& s) {
  r.get("rounds", s.rounds);
  r.get("adversary_episodes", s.adversary_episodes);
  r.get("cp_episodes", s.cp_episodes);
  r.get("p_mask", s.p_mask);
  r.get("refresh_adversary", s.refresh_adversary);
  r.get("joint", s.joint);
  r.get("metric_episodes", s.metric_episodes);
  r.finish();
}

json write_attack(const attacks::AttackConfig& c, int episodes) {
  json j;
  j["episodes"] = episodes;
  j["budget"] = c.budget;
  j["codebook"] = c.codebook;
  j["hidden"] = c.hidden;
  j["optimizer"] = write_optimizer(c.optimizer);
  j["code_learning_rate"] = c.code_learning_rate;
  j["gamma"] = c.gamma;
  j["epsilon_start"] = c.epsilon_start;
  j["epsilon_end"] = c.epsilon_end;
  j["epsilon_fraction"] = c.epsilon_fraction;
  j["buffer_transitions"] = c.buffer_transitions;
  j["batch"] = c.batch;
  j["train_every"] = c.train_every;
  j["target_sync"] = c.target_sync;
  write_features(j, c.features);
  return j;
}

void read_attack(Reader r, attacks::AttackConfig& c, int& episodes) {
  r.get("episodes", episodes);
  r.get("budget", c.budget);
  r.get("codebook", c.codebook);
  r.get("hidden", c.hidden);
  read_optimizer(r.child("optimizer"), c.optimizer);
  r.get("code_learning_rate", c.code_learning_rate);
  r.get("gamma", c.gamma);
  r.get("epsilon_start", c.epsilon_start);
  r.get("epsilon_end", c.epsilon_end);
  r.get("epsilon_fraction", c.epsilon_fraction);
  r.get("buffer_transitions", c.buffer_transitions);
  r.get("batch", c.batch);
  r.get("train_every", c.train_every);
  r.get("target_sync", c.target_sync);
  read_features(r, c.features);
  r.finish();
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["env"] = write_env(c.env);
  j["team"] = write_team(c.team, c.team_episodes);
  j["adversary"] = write_adversary(c.adversary, c.adversary_episodes);
  j["retrain"] = write_retrain(c.retrain);
  j["attack"] = write_attack(c.attack, c.attack_episodes);
  j["eval"] = json{{"episodes", c.eval.episodes}, {"workers", c.eval.workers}};
  return j;
}

ExperimentConfig from_json(const json& j) {
  ExperimentConfig c;
  Reader r(j, "");
  r.get("seed", c.seed);
  c.env = read_env(r.child("env"));
  read_team(r.child("team"), c.team, c.team_episodes);
  read_adversary(r.child("adversary"), c.adversary, c.adversary_episodes);
  read_retrain(r.child("retrain"), c.retrain);
  read_attack(r.child("attack"), c.attack, c.attack_episodes);
  Reader e = r.child("eval");
  e.get("episodes", c.eval.episodes);
  e.get("workers", c.eval.workers);
  e.finish();
  r.finish();
  validate(c);
  return c;
}

}  // namespace

void validate(const ExperimentConfig& c) {
  env::validate(c.env);
  team::validate(c.team);
  adversary::validate(c.adversary);
  retrain::validate(c.retrain);
  attacks::validate(c.attack);
  if (c.team_episodes < 0 || c.adversary_episodes < 0 || c.attack_episodes < 0)
    throw ConfigError("episode counts must be non-negative");
  if (c.eval.episodes < 1) throw ConfigError("eval.episodes must be at least 1");
  if (c.eval.workers < 0) throw ConfigError("eval.workers must be non-negative");
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    return from_json(j);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& config) { return to_json(config).dump(2) + "\n"; }

ExperimentConfig apply_overrides(const ExperimentConfig& config, std::span<const std::string> overrides) {
  json j = to_json(config);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
    const std::string key = o.substr(0, eq);
    const std::string text = o.substr(eq + 1);
    json value;
    try {
      value = json::parse(text);
    } catch (const json::parse_error&) {
      value = text;
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (part.empty() || !node->is_object() || !node->contains(part))
        throw ConfigError("unknown key " + key + " in override");
      node = &(*node)[part];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    *node = value;
  }
  try {
    return from_json(j);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad override value: ") + e.what());
  }
}

std::string config_digest(const ExperimentConfig& config) { return sha256_hex(serialize_config(config)); }

}  // namespace dmac::config
