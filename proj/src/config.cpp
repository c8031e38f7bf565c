#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "transmix/harness.hpp"

namespace transmix {

using nlohmann::json;

namespace {

class Parser {
 public:
  Parser(const std::string& text, std::string source) : text_(text), source_(std::move(source)) {}

  [[noreturn]] void fail(const std::vector<std::string>& path, const std::string& msg) const {
    std::string key;
    for (const auto& p : path) key += (key.empty() ? "" : ".") + p;
    std::string where = source_;
    if (const int line = line_of(path); line > 0) where += ":" + std::to_string(line);
    throw ConfigError(where + ": " + (key.empty() ? "" : "'" + key + "': ") + msg);
  }

  void only_keys(const json& obj, const std::vector<std::string>& path, const std::set<std::string>& allowed) const {
    if (!obj.is_object()) fail(path, "expected an object");
    for (const auto& [k, _] : obj.items()) {
      if (allowed.count(k)) continue;
      std::string list;
      for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
      auto full = path;
      full.push_back(k);
      fail(full, "unknown key (allowed: " + list + ")");
    }
  }

  template <typename T>
  void read(const json& obj, const std::vector<std::string>& path, const std::string& key, T& out) const {
    auto it = obj.find(key);
    if (it == obj.end()) return;
    auto full = path;
    full.push_back(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) fail(full, "expected true or false");
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_integer()) fail(full, "expected an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) fail(full, "expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) fail(full, "expected a string");
    }
    out = it->get<T>();
  }

  void check(bool ok, const std::vector<std::string>& path, const std::string& msg) const {
    if (!ok) fail(path, msg);
  }

 private:
  int line_of(const std::vector<std::string>& path) const {
    if (text_.empty() || path.empty()) return 0;
    std::size_t pos = 0;
    for (const auto& k : path) {
      const auto p = text_.find("\"" + k + "\"", pos);
      if (p == std::string::npos) return 0;
      pos = p + 1;
    }
    return 1 + static_cast<int>(std::count(text_.begin(), text_.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
  }

  const std::string& text_;
  std::string source_;
};

Unit parse_unit(const Parser& ps, const json& j, const std::vector<std::string>& path) {
  ps.only_keys(j, path, {"x", "y", "hp", "damage", "sight"});
  Unit u;
  ps.read(j, path, "x", u.x);
  ps.read(j, path, "y", u.y);
  ps.read(j, path, "hp", u.hp);
  ps.read(j, path, "damage", u.damage);
  ps.read(j, path, "sight", u.sight);
  return u;
}

EnvSpec parse_env(const Parser& ps, const json& j) {
  const std::vector<std::string> path{"env"};
  if (j.is_string()) {
    try {
      return fixture(j.get<std::string>());
    } catch (const std::invalid_argument& e) {
      ps.fail(path, e.what());
    }
  }
  ps.only_keys(j, path,
               {"name", "kind", "n_agents", "n_actions", "horizon", "payoff", "width", "height", "allies", "enemies",
                "w_damage", "kill_bonus", "win_bonus", "normalize_reward"});
  EnvSpec s;
  s.name = "custom";
  ps.read(j, path, "name", s.name);
  std::string kind = "matrix";
  ps.read(j, path, "kind", kind);
  ps.check(kind == "matrix" || kind == "skirmish", {"env", "kind"}, "must be one of: matrix, skirmish");
  if (kind == "matrix") {
    s.kind = EnvKind::kMatrix;
    ps.read(j, path, "n_agents", s.n_agents);
    ps.read(j, path, "n_actions", s.n_actions);
    ps.read(j, path, "horizon", s.horizon);
    if (!j.contains("payoff") || !j["payoff"].is_array()) ps.fail({"env", "payoff"}, "matrix games need a payoff array");
    for (const auto& v : j["payoff"]) {
      ps.check(v.is_number(), {"env", "payoff"}, "payoffs must be numbers");
      s.matrix.payoff.push_back(v.get<double>());
    }
  } else {
    s.kind = EnvKind::kSkirmish;
    auto& k = s.skirmish;
    ps.read(j, path, "width", k.width);
    ps.read(j, path, "height", k.height);
    ps.read(j, path, "horizon", s.horizon);
    ps.read(j, path, "w_damage", k.w_damage);
    ps.read(j, path, "kill_bonus", k.kill_bonus);
    ps.read(j, path, "win_bonus", k.win_bonus);
    ps.read(j, path, "normalize_reward", k.normalize_reward);
    for (const char* side : {"allies", "enemies"}) {
      if (!j.contains(side) || !j[side].is_array()) ps.fail({"env", side}, "expected an array of units");
      for (const auto& u : j[side]) (side[0] == 'a' ? k.allies : k.enemies).push_back(parse_unit(ps, u, {"env", side}));
    }
    s.n_agents = static_cast<int>(k.allies.size());
    s.n_actions = kFirstAttack + static_cast<int>(k.enemies.size());
    if (j.contains("n_agents") || j.contains("n_actions")) {
      int n = s.n_agents, a = s.n_actions;
      ps.read(j, path, "n_agents", n);
      ps.read(j, path, "n_actions", a);
      ps.check(n == s.n_agents, {"env", "n_agents"}, "must equal the number of allies");
      ps.check(a == s.n_actions, {"env", "n_actions"}, "must equal 5 + number of enemies");
    }
  }
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    ps.fail(path, e.what());
  }
  return s;
}

ExperimentConfig parse_root(const Parser& ps, const json& root) {
  ps.only_keys(root, {},
               {"env", "mixer", "agent", "qmix", "transmix", "train", "eval", "noise", "seeds", "workers", "out_dir",
                "record_wall_clock"});
  ExperimentConfig c;
  if (!root.contains("env")) ps.fail({"env"}, "required key missing");
  c.env = parse_env(ps, root["env"]);

  if (!root.contains("mixer")) ps.fail({"mixer"}, "required key missing");
  std::string mixer;
  ps.read(root, {}, "mixer", mixer);
  if (mixer == "vdn") {
    c.mixer.kind = MixerKind::kVdn;
  } else if (mixer == "qmix") {
    c.mixer.kind = MixerKind::kQmix;
  } else if (mixer == "transmix") {
    c.mixer.kind = MixerKind::kTransMix;
  } else {
    ps.fail({"mixer"}, "unknown mixer '" + mixer + "' (allowed: vdn, qmix, transmix)");
  }

  if (root.contains("agent")) {
    const auto& a = root["agent"];
    ps.only_keys(a, {"agent"}, {"hidden_dim"});
    ps.read(a, {"agent"}, "hidden_dim", c.hidden_dim);
    ps.check(c.hidden_dim >= 1, {"agent", "hidden_dim"}, "must be >= 1");
  }
  if (root.contains("qmix")) {
    const auto& q = root["qmix"];
    ps.only_keys(q, {"qmix"}, {"embed_dim"});
    ps.read(q, {"qmix"}, "embed_dim", c.mixer.qmix_embed_dim);
    ps.check(c.mixer.qmix_embed_dim >= 1, {"qmix", "embed_dim"}, "must be >= 1");
  }
  if (root.contains("transmix")) {
    const auto& t = root["transmix"];
    const std::vector<std::string> p{"transmix"};
    ps.only_keys(t, p, {"preset", "layers", "heads", "model_dim", "state_tokens", "skip_dim"});
    std::string preset = "desk";
    ps.read(t, p, "preset", preset);
    if (preset == "large") {
      c.mixer.model_dim = 512;
      c.mixer.heads = 4;
    } else if (preset != "desk") {
      ps.fail({"transmix", "preset"}, "unknown preset '" + preset + "' (allowed: desk, large)");
    }
    ps.read(t, p, "layers", c.mixer.layers);
    ps.read(t, p, "heads", c.mixer.heads);
    ps.read(t, p, "model_dim", c.mixer.model_dim);
    ps.read(t, p, "state_tokens", c.mixer.state_tokens);
    ps.read(t, p, "skip_dim", c.mixer.skip_dim);
  }
  ps.check(c.mixer.layers >= 2 && c.mixer.layers <= 6, {"transmix", "layers"}, "must be in [2, 6]");
  ps.check(c.mixer.heads >= 1 && c.mixer.model_dim >= 1 && c.mixer.model_dim % c.mixer.heads == 0,
           {"transmix", "model_dim"}, "must be a positive multiple of heads");
  ps.check(c.mixer.state_tokens >= 1, {"transmix", "state_tokens"}, "must be >= 1");
  ps.check(c.mixer.skip_dim >= 1, {"transmix", "skip_dim"}, "must be >= 1");

  if (root.contains("train")) {
    const auto& t = root["train"];
    const std::vector<std::string> p{"train"};
    ps.only_keys(t, p,
                 {"gamma", "batch_episodes", "buffer_capacity", "lr", "beta1", "beta2", "adam_eps", "eps_start",
                  "eps_end", "anneal_steps", "target_update_episodes", "total_env_steps", "loss_reduction",
                  "grad_clip_norm"});
    auto& tr = c.train;
    ps.read(t, p, "gamma", tr.gamma);
    ps.read(t, p, "batch_episodes", tr.batch_episodes);
    ps.read(t, p, "buffer_capacity", tr.buffer_capacity);
    ps.read(t, p, "lr", tr.lr);
    ps.read(t, p, "beta1", tr.beta1);
    ps.read(t, p, "beta2", tr.beta2);
    ps.read(t, p, "adam_eps", tr.adam_eps);
    ps.read(t, p, "eps_start", tr.eps_start);
    ps.read(t, p, "eps_end", tr.eps_end);
    ps.read(t, p, "anneal_steps", tr.anneal_steps);
    ps.read(t, p, "target_update_episodes", tr.target_update_episodes);
    ps.read(t, p, "total_env_steps", tr.total_env_steps);
    ps.read(t, p, "grad_clip_norm", tr.grad_clip_norm);
    std::string reduction = "mean";
    ps.read(t, p, "loss_reduction", reduction);
    ps.check(reduction == "mean" || reduction == "sum", {"train", "loss_reduction"}, "must be one of: mean, sum");
    tr.loss_reduction = reduction == "sum" ? LossReduction::kSum : LossReduction::kMean;
  }
  {
    const auto& tr = c.train;
    ps.check(tr.gamma >= 0.0 && tr.gamma < 1.0, {"train", "gamma"}, "must be in [0, 1)");
    ps.check(tr.batch_episodes >= 1, {"train", "batch_episodes"}, "must be >= 1");
    ps.check(tr.buffer_capacity >= tr.batch_episodes, {"train", "buffer_capacity"}, "must be >= batch_episodes");
    ps.check(tr.lr > 0.0, {"train", "lr"}, "must be > 0");
    ps.check(tr.beta1 >= 0.0 && tr.beta1 < 1.0, {"train", "beta1"}, "must be in [0, 1)");
    ps.check(tr.beta2 >= 0.0 && tr.beta2 < 1.0, {"train", "beta2"}, "must be in [0, 1)");
    ps.check(tr.adam_eps > 0.0, {"train", "adam_eps"}, "must be > 0");
    ps.check(tr.eps_start >= 0.0 && tr.eps_start <= 1.0, {"train", "eps_start"}, "must be in [0, 1]");
    ps.check(tr.eps_end >= 0.0 && tr.eps_end <= tr.eps_start, {"train", "eps_end"}, "must be in [0, eps_start]");
    ps.check(tr.anneal_steps >= 1, {"train", "anneal_steps"}, "must be >= 1");
    ps.check(tr.target_update_episodes >= 1, {"train", "target_update_episodes"}, "must be >= 1");
    ps.check(tr.total_env_steps >= 0, {"train", "total_env_steps"}, "must be >= 0");
    ps.check(tr.grad_clip_norm >= 0.0, {"train", "grad_clip_norm"}, "must be >= 0 (0 disables clipping)");
  }

  if (root.contains("eval")) {
    const auto& e = root["eval"];
    ps.only_keys(e, {"eval"}, {"interval_steps", "episodes"});
    ps.read(e, {"eval"}, "interval_steps", c.eval.interval_steps);
    ps.read(e, {"eval"}, "episodes", c.eval.episodes);
  }
  ps.check(c.eval.interval_steps >= 1, {"eval", "interval_steps"}, "must be >= 1");
  ps.check(c.eval.episodes >= 1, {"eval", "episodes"}, "must be >= 1");

  if (root.contains("noise")) {
    const auto& n = root["noise"];
    ps.only_keys(n, {"noise"}, {"enabled", "sigma"});
    ps.read(n, {"noise"}, "enabled", c.noise.enabled);
    ps.read(n, {"noise"}, "sigma", c.noise.sigma);
  }
  ps.check(c.noise.sigma >= 0.0, {"noise", "sigma"}, "must be >= 0");

  if (root.contains("seeds")) {
    const auto& s = root["seeds"];
    if (!s.is_array()) ps.fail({"seeds"}, "expected an array of non-negative integers");
    c.seeds.clear();
    for (const auto& v : s) {
      ps.check(v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0), {"seeds"},
               "seeds must be non-negative integers");
      c.seeds.push_back(v.get<std::uint64_t>());
    }
  }
  ps.check(!c.seeds.empty(), {"seeds"}, "must not be empty");
  ps.read(root, {}, "workers", c.workers);
  ps.check(c.workers >= 1, {"workers"}, "must be a positive integer");
  ps.read(root, {}, "out_dir", c.out_dir);
  ps.check(!c.out_dir.empty(), {"out_dir"}, "must not be empty");
  ps.read(root, {}, "record_wall_clock", c.record_wall_clock);
  return c;
}

int line_at(const std::string& text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
}

json unit_json(const Unit& u) {
  return json{{"x", u.x}, {"y", u.y}, {"hp", u.hp}, {"damage", u.damage}, {"sight", u.sight}};
}

}  // namespace

AgentDims ExperimentConfig::agent_dims() const {
  Env probe(env);
  return AgentDims{probe.obs_dim(), env.n_actions, env.n_agents, hidden_dim};
}

ExperimentConfig parse_config(const std::string& text, const std::string& source) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source + ":" + std::to_string(line_at(text, e.byte > 0 ? e.byte - 1 : 0)) +
                      ": invalid JSON: " + e.what());
  }
  if (!root.is_object()) throw ConfigError(source + ": top level must be a JSON object");
  Parser ps(text, source);
  return parse_root(ps, root);
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

ExperimentConfig config_from_json(const json& j) {
  static const std::string empty;
  Parser ps(empty, "<embedded config>");
  json copy = j;
  copy.erase("digest");
  copy.erase("base_digest");
  return parse_root(ps, copy);
}

json env_to_json(const EnvSpec& env) {
  json j{{"name", env.name}, {"n_agents", env.n_agents}, {"n_actions", env.n_actions}, {"horizon", env.horizon}};
  if (env.kind == EnvKind::kMatrix) {
    j["kind"] = "matrix";
    j["payoff"] = env.matrix.payoff;
  } else {
    const auto& s = env.skirmish;
    j["kind"] = "skirmish";
    j["width"] = s.width;
    j["height"] = s.height;
    j["w_damage"] = s.w_damage;
    j["kill_bonus"] = s.kill_bonus;
    j["win_bonus"] = s.win_bonus;
    j["normalize_reward"] = s.normalize_reward;
    j["allies"] = json::array();
    j["enemies"] = json::array();
    for (const auto& u : s.allies) j["allies"].push_back(unit_json(u));
    for (const auto& u : s.enemies) j["enemies"].push_back(unit_json(u));
  }
  return j;
}

json config_to_json(const ExperimentConfig& c) {
  const auto& t = c.train;
  return json{
      {"env", env_to_json(c.env)},
      {"mixer", mixer_name(c.mixer.kind)},
      {"agent", {{"hidden_dim", c.hidden_dim}}},
      {"qmix", {{"embed_dim", c.mixer.qmix_embed_dim}}},
      {"transmix",
       {{"layers", c.mixer.layers},
        {"heads", c.mixer.heads},
        {"model_dim", c.mixer.model_dim},
        {"state_tokens", c.mixer.state_tokens},
        {"skip_dim", c.mixer.skip_dim}}},
      {"train",
       {{"gamma", t.gamma},
        {"batch_episodes", t.batch_episodes},
        {"buffer_capacity", t.buffer_capacity},
        {"lr", t.lr},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"adam_eps", t.adam_eps},
        {"eps_start", t.eps_start},
        {"eps_end", t.eps_end},
        {"anneal_steps", t.anneal_steps},
        {"target_update_episodes", t.target_update_episodes},
        {"total_env_steps", t.total_env_steps},
        {"loss_reduction", t.loss_reduction == LossReduction::kSum ? "sum" : "mean"},
        {"grad_clip_norm", t.grad_clip_norm}}},
      {"eval", {{"interval_steps", c.eval.interval_steps}, {"episodes", c.eval.episodes}}},
      {"noise", {{"enabled", c.noise.enabled}, {"sigma", c.noise.sigma}}},
      {"seeds", c.seeds},
      {"workers", c.workers},
      {"out_dir", c.out_dir},
      {"record_wall_clock", c.record_wall_clock},
  };
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string config_digest(const ExperimentConfig& cfg) {
  json j = config_to_json(cfg);
  for (const char* k : {"seeds", "out_dir", "record_wall_clock"}) j.erase(k);
  return hex64(fnv1a64(j.dump()));
}

std::string base_digest(const ExperimentConfig& cfg) {
  json j = config_to_json(cfg);
  for (const char* k : {"seeds", "out_dir", "record_wall_clock", "noise"}) j.erase(k);
  return hex64(fnv1a64(j.dump()));
}

}  // namespace transmix
