#include "cbfmpc/expcli.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <sstream>

namespace cbfmpc {

using json = nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "0.1.0";

[[noreturn]] void schema_error(const std::string& msg) {
  throw ConfigError(ConfigErrorKind::Schema, "schema: " + msg);
}

[[noreturn]] void conflict_error(const std::string& msg) {
  throw ConfigError(ConfigErrorKind::PresetConflict, "preset conflict: " + msg);
}

void check_keys(const json& obj, const std::string& path, const std::set<std::string>& allowed) {
  if (!obj.is_object()) schema_error("'" + path + "' must be an object");
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (!allowed.count(key)) {
      schema_error("unknown key '" + (path.empty() ? key : path + "." + key) + "'");
    }
  }
}

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

double get_number(const json& obj, const std::string& path, const std::string& key) {
  const json& v = obj.at(key);
  if (!v.is_number()) schema_error("'" + join(path, key) + "' must be a number");
  return v.get<double>();
}

int get_int(const json& obj, const std::string& path, const std::string& key) {
  const json& v = obj.at(key);
  if (!v.is_number_integer()) schema_error("'" + join(path, key) + "' must be an integer");
  const auto x = v.get<std::int64_t>();
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
    schema_error("'" + join(path, key) + "' is out of range");
  }
  return static_cast<int>(x);
}

bool get_bool(const json& obj, const std::string& path, const std::string& key) {
  const json& v = obj.at(key);
  if (!v.is_boolean()) schema_error("'" + join(path, key) + "' must be a boolean");
  return v.get<bool>();
}

std::string get_string(const json& obj, const std::string& path, const std::string& key) {
  const json& v = obj.at(key);
  if (!v.is_string()) schema_error("'" + join(path, key) + "' must be a string");
  return v.get<std::string>();
}

Eigen::VectorXd get_vector(const json& obj, const std::string& path, const std::string& key, int n) {
  const json& v = obj.at(key);
  const std::string name = join(path, key);
  if (v.is_number() && n > 0) return Eigen::VectorXd::Constant(n, v.get<double>());
  if (!v.is_array()) schema_error("'" + name + "' must be an array of numbers");
  if (n > 0 && static_cast<int>(v.size()) != n) {
    schema_error("'" + name + "' must have " + std::to_string(n) + " entries");
  }
  Eigen::VectorXd out(v.size());
  for (size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) schema_error("'" + name + "' must be an array of numbers");
    out(static_cast<Eigen::Index>(i)) = v[i].get<double>();
  }
  return out;
}

template <class F>
void with(const json& obj, const std::string& key, F&& f) {
  if (obj.contains(key)) f();
}

json vector_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

json bound_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::isfinite(v(i))) {
      a.push_back(v(i));
    } else {
      a.push_back(nullptr);
    }
  }
  return a;
}

Obstacle parse_obstacle(const json& o, const std::string& path) {
  check_keys(o, path, {"center", "radius", "motion"});
  if (!o.contains("center") || !o.contains("radius")) {
    schema_error("'" + path + "' needs center and radius");
  }
  Obstacle ob;
  const Eigen::VectorXd c = get_vector(o, path, "center", 2);
  ob.cx0 = c(0);
  ob.cy0 = c(1);
  ob.radius = get_number(o, path, "radius");
  if (o.contains("motion")) {
    const json& m = o.at("motion");
    const std::string mp = path + ".motion";
    check_keys(m, mp, {"x_min", "x_max", "speed", "direction"});
    HorizontalMotion hm;
    hm.x_min = ob.cx0;
    hm.x_max = ob.cx0;
    with(m, "x_min", [&] { hm.x_min = get_number(m, mp, "x_min"); });
    with(m, "x_max", [&] { hm.x_max = get_number(m, mp, "x_max"); });
    with(m, "speed", [&] { hm.speed = get_number(m, mp, "speed"); });
    with(m, "direction", [&] { hm.direction = get_int(m, mp, "direction"); });
    if (hm.direction != 1 && hm.direction != -1) schema_error("'" + mp + ".direction' must be 1 or -1");
    ob.motion = hm;
  }
  return ob;
}

json obstacle_json(const Obstacle& ob) {
  json o;
  o["center"] = {ob.cx0, ob.cy0};
  o["radius"] = ob.radius;
  if (ob.motion) {
    o["motion"] = {{"x_min", ob.motion->x_min},
                   {"x_max", ob.motion->x_max},
                   {"speed", ob.motion->speed},
                   {"direction", ob.motion->direction}};
  }
  return o;
}

World static_world() {
  World w;
  w.obstacles.push_back({-2.0, -2.25, 1.5, std::nullopt});
  return w;
}

World dynamic_world() {
  World w;
  w.obstacles.push_back({-2.0, 0.0, 1.0, std::nullopt});
  w.obstacles.push_back({-4.0, -1.5, 0.7, HorizontalMotion{-4.0, 0.0, 0.2, 1}});
  w.obstacles.push_back({-4.0, -3.3, 0.7, HorizontalMotion{-4.0, 1.0, 0.2, 1}});
  return w;
}

void apply_world(const json& w, World& world) {
  const std::string p = "world";
  check_keys(w, p, {"start", "dt", "state_bound", "action_bound", "obstacles"});
  with(w, "start", [&] { world.start = get_vector(w, p, "start", 4); });
  with(w, "dt", [&] {
    const double dt = get_number(w, p, "dt");
    if (!(dt > 0.0)) schema_error("'world.dt' must be positive");
    world.plant = DoubleIntegrator::zoh(dt);
  });
  with(w, "state_bound", [&] { world.state_bound = get_number(w, p, "state_bound"); });
  with(w, "action_bound", [&] { world.action_bound = get_number(w, p, "action_bound"); });
  with(w, "obstacles", [&] {
    const json& arr = w.at("obstacles");
    if (!arr.is_array()) schema_error("'world.obstacles' must be an array");
    world.obstacles.clear();
    for (size_t i = 0; i < arr.size(); ++i) {
      world.obstacles.push_back(parse_obstacle(arr[i], "world.obstacles[" + std::to_string(i) + "]"));
    }
  });
}

void apply_solver(const json& s, const std::string& p, SolverConfig& solver) {
  check_keys(s, p, {"tolerance", "max_iterations", "regularization", "warm_start", "polish"});
  with(s, "tolerance", [&] { solver.tolerance = get_number(s, p, "tolerance"); });
  with(s, "max_iterations", [&] { solver.max_iterations = get_int(s, p, "max_iterations"); });
  with(s, "regularization", [&] { solver.regularization = get_number(s, p, "regularization"); });
  with(s, "warm_start", [&] { solver.warm_start = get_bool(s, p, "warm_start"); });
  with(s, "polish", [&] { solver.polish = get_bool(s, p, "polish"); });
}

void apply_trainer(const json& t, TrainerConfig& tc) {
  const std::string p = "trainer";
  check_keys(t, p,
             {"episodes", "steps", "discount", "learning_rate", "block_learning_rates", "beta1", "beta2",
              "adam_eps", "buffer_size", "noise_std", "noise_decay", "max_failures", "eval_every"});
  with(t, "episodes", [&] { tc.episodes = get_int(t, p, "episodes"); });
  with(t, "steps", [&] { tc.steps = get_int(t, p, "steps"); });
  with(t, "discount", [&] { tc.discount = get_number(t, p, "discount"); });
  with(t, "learning_rate", [&] { tc.learning_rate = get_number(t, p, "learning_rate"); });
  with(t, "block_learning_rates", [&] {
    const json& b = t.at("block_learning_rates");
    if (!b.is_object()) schema_error("'trainer.block_learning_rates' must be an object");
    tc.block_learning_rates.clear();
    for (const auto& [name, v] : b.items()) {
      if (!v.is_number()) schema_error("'trainer.block_learning_rates." + name + "' must be a number");
      tc.block_learning_rates[name] = v.get<double>();
    }
  });
  with(t, "beta1", [&] { tc.beta1 = get_number(t, p, "beta1"); });
  with(t, "beta2", [&] { tc.beta2 = get_number(t, p, "beta2"); });
  with(t, "adam_eps", [&] { tc.adam_eps = get_number(t, p, "adam_eps"); });
  with(t, "buffer_size", [&] { tc.buffer_size = get_int(t, p, "buffer_size"); });
  with(t, "noise_std", [&] { tc.noise_std = get_vector(t, p, "noise_std", 2); });
  with(t, "noise_decay", [&] { tc.noise_decay = get_number(t, p, "noise_decay"); });
  with(t, "max_failures", [&] { tc.max_failures = get_int(t, p, "max_failures"); });
  with(t, "eval_every", [&] { tc.eval_every = get_int(t, p, "eval_every"); });
}

const std::set<std::string> kLodInitKeys = {"omega_ref", "p_omega", "omega_ref_upper"};
const std::set<std::string> kNetInitKeys = {"initial_decay", "output_weight_scale", "weight_bound"};

void apply_theta_init(const json& ti, ThetaInit& init) {
  const std::string p = "theta_init";
  check_keys(ti, p,
             {"terminal", "omega_ref", "p_omega", "omega_ref_upper", "initial_decay",
              "output_weight_scale", "weight_bound"});
  with(ti, "terminal", [&] { init.terminal = get_vector(ti, p, "terminal", 4); });
  with(ti, "omega_ref", [&] { init.omega_ref = get_number(ti, p, "omega_ref"); });
  with(ti, "p_omega", [&] { init.p_omega = get_number(ti, p, "p_omega"); });
  with(ti, "omega_ref_upper", [&] { init.omega_ref_upper = get_number(ti, p, "omega_ref_upper"); });
  with(ti, "initial_decay", [&] { init.initial_decay = get_number(ti, p, "initial_decay"); });
  with(ti, "output_weight_scale",
       [&] { init.output_weight_scale = get_number(ti, p, "output_weight_scale"); });
  with(ti, "weight_bound", [&] { init.weight_bound = get_number(ti, p, "weight_bound"); });
}

std::string position_message(std::string_view text, std::size_t byte, const std::string& what) {
  // nlohmann reports the 1-based byte index of the offending character.
  const std::size_t end = std::min(byte > 0 ? byte - 1 : 0, text.size());
  int line = 1, column = 1;
  for (std::size_t i = 0; i < end; ++i) {
    if (text[i] == '\n') {
      ++line;
      column = 1;
    } else {
      ++column;
    }
  }
  // Drop the library's own prefix and location.
  std::string detail = what;
  if (const auto pos = detail.find(": "); pos != std::string::npos && detail.rfind("[json.", 0) == 0) {
    detail = detail.substr(pos + 2);
  }
  return "parse error at line " + std::to_string(line) + ", column " + std::to_string(column) + ": " +
         detail;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(ConfigErrorKind::Io, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

json rollout_summary(const Rollout& r) {
  return {{"steps", static_cast<int>(r.actions.size())},
          {"cumulative_cost", r.cost},
          {"min_h", r.min_h},
          {"slack_total", r.slack_total},
          {"failures", r.failures},
          {"aborted", r.aborted}};
}

}  // namespace

void ExperimentConfig::validate() const {
  try {
    mpc.validate();
  } catch (const std::invalid_argument& e) {
    schema_error(e.what());
  }
  const TrainerConfig& t = trainer;
  if (t.episodes < 0) schema_error("'trainer.episodes' must be non-negative");
  if (t.steps < 1) schema_error("'trainer.steps' must be positive");
  if (!(t.discount >= 0.0 && t.discount <= 1.0)) schema_error("'trainer.discount' must lie in [0, 1]");
  if (!(t.w_rl >= 0.0)) schema_error("'trainer.w_rl' must be non-negative");
  if (!(t.learning_rate >= 0.0)) schema_error("'trainer.learning_rate' must be non-negative");
  for (const auto& [name, lr] : t.block_learning_rates) {
    if (!(lr >= 0.0)) schema_error("'trainer.block_learning_rates." + name + "' must be non-negative");
  }
  if (!(t.beta1 >= 0.0 && t.beta1 < 1.0) || !(t.beta2 >= 0.0 && t.beta2 < 1.0)) {
    schema_error("Adam betas must lie in [0, 1)");
  }
  if (!(t.adam_eps > 0.0)) schema_error("'trainer.adam_eps' must be positive");
  if (t.buffer_size < 0) schema_error("'trainer.buffer_size' must be non-negative");
  if ((t.noise_std.array() < 0.0).any()) schema_error("'trainer.noise_std' must be non-negative");
  if (!(t.noise_decay > 0.0 && t.noise_decay <= 1.0)) schema_error("'trainer.noise_decay' must lie in (0, 1]");
  if (t.max_failures < 0) schema_error("'trainer.max_failures' must be non-negative");
  if (t.eval_every < 0) schema_error("'trainer.eval_every' must be non-negative");
  if (!(t.solver.tolerance > 0.0) || t.solver.max_iterations < 1) schema_error("invalid solver settings");
  if ((init.terminal.array() < kTerminalFloor).any()) {
    schema_error("'theta_init.terminal' entries must be at least 1e-3");
  }
  if (mpc.variant == Variant::Lod) {
    if (!(init.omega_ref_upper >= kDecayFloor) || !(init.omega_ref >= kDecayFloor) ||
        init.omega_ref > init.omega_ref_upper) {
      schema_error("'theta_init.omega_ref' must lie in [1e-6, omega_ref_upper]");
    }
    if (!(init.p_omega >= 0.0)) schema_error("'theta_init.p_omega' must be non-negative");
  } else {
    if (!(init.initial_decay > 0.0 && init.initial_decay < 1.0)) {
      schema_error("'theta_init.initial_decay' must lie in (0, 1)");
    }
    if (!(init.weight_bound > 0.0)) schema_error("'theta_init.weight_bound' must be positive");
  }
  if (gradcheck_trials < 1) schema_error("'gradcheck_trials' must be positive");
  if (!(max_failure_rate >= 0.0 && max_failure_rate <= 1.0)) {
    schema_error("'max_failure_rate' must lie in [0, 1]");
  }
}

std::vector<std::string> preset_names() { return {"static-lod", "static-nn", "dynamic-nn", "dynamic-rnn"}; }

ExperimentConfig preset_config(std::string_view name) {
  ExperimentConfig c;
  c.preset = std::string(name);
  c.trainer.block_learning_rates["F"] = 2.0;
  if (name == "static-lod" || name == "static-nn") {
    c.mpc.world = static_world();
    c.mpc.horizon = 1;
    c.mpc.w_mpc = 64e6;  // 20^6
    c.trainer.w_rl = 1e3;
    c.trainer.steps = 100;
    if (name == "static-lod") {
      c.mpc.variant = Variant::Lod;
      c.trainer.learning_rate = 0.02;
    } else {
      c.mpc.variant = Variant::Nn;
      c.trainer.learning_rate = 1e-3;
    }
  } else if (name == "dynamic-nn" || name == "dynamic-rnn") {
    c.mpc.world = dynamic_world();
    c.mpc.horizon = 6;
    c.mpc.w_mpc = 1.28e9;  // 20^7
    c.trainer.w_rl = 1e5;
    c.trainer.steps = 80;
    c.trainer.learning_rate = 3e-4;  // 1e-3 diverges for the recurrent variant
    c.mpc.variant = name == "dynamic-nn" ? Variant::Nn : Variant::Rnn;
  } else {
    schema_error("unknown preset '" + std::string(name) + "'");
  }
  c.mpc.hidden = {16, 16, 16};
  return c;
}

ExperimentConfig parse_config(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw ConfigError(ConfigErrorKind::Parse, position_message(text, e.byte, e.what()));
  }
  check_keys(doc, "",
             {"preset", "variant", "horizon", "world", "weights", "theta_init", "network", "trainer",
              "solver", "mpc_discount", "seed", "output_dir", "gradcheck_trials", "max_failure_rate"});

  ExperimentConfig c;
  const bool has_preset = doc.contains("preset");
  if (has_preset) c = preset_config(get_string(doc, "", "preset"));

  if (doc.contains("variant")) {
    Variant v;
    try {
      v = parse_variant(get_string(doc, "", "variant"));
    } catch (const std::invalid_argument&) {
      schema_error("'variant' must be one of lod, nn, rnn");
    }
    if (has_preset && v != c.mpc.variant) {
      conflict_error("preset '" + c.preset + "' fixes variant " + std::string(to_string(c.mpc.variant)) +
                     ", config asks for " + std::string(to_string(v)));
    }
    c.mpc.variant = v;
  }
  const bool lod = c.mpc.variant == Variant::Lod;
  auto not_applicable = [&](const std::string& key) {
    const std::string msg = "'" + key + "' does not apply to variant " + std::string(to_string(c.mpc.variant));
    if (has_preset) conflict_error(msg + " of preset '" + c.preset + "'");
    schema_error(msg);
  };

  with(doc, "horizon", [&] { c.mpc.horizon = get_int(doc, "", "horizon"); });
  with(doc, "world", [&] { apply_world(doc.at("world"), c.mpc.world); });
  with(doc, "weights", [&] {
    const json& w = doc.at("weights");
    const std::string p = "weights";
    check_keys(w, p, {"w_mpc", "w_rl", "Q", "R"});
    with(w, "w_mpc", [&] { c.mpc.w_mpc = get_number(w, p, "w_mpc"); });
    with(w, "w_rl", [&] { c.trainer.w_rl = get_number(w, p, "w_rl"); });
    with(w, "Q", [&] { c.mpc.weights.Q = get_vector(w, p, "Q", 4).asDiagonal(); });
    with(w, "R", [&] { c.mpc.weights.R = get_vector(w, p, "R", 2).asDiagonal(); });
  });
  with(doc, "theta_init", [&] {
    const json& ti = doc.at("theta_init");
    if (ti.is_object()) {
      for (const auto& [key, value] : ti.items()) {
        (void)value;
        if (lod && kNetInitKeys.count(key)) not_applicable("theta_init." + key);
        if (!lod && kLodInitKeys.count(key)) not_applicable("theta_init." + key);
      }
    }
    apply_theta_init(ti, c.init);
  });
  with(doc, "network", [&] {
    if (lod) not_applicable("network");
    const json& n = doc.at("network");
    check_keys(n, "network", {"hidden"});
    with(n, "hidden", [&] {
      const json& h = n.at("hidden");
      if (!h.is_array()) schema_error("'network.hidden' must be an array of integers");
      c.mpc.hidden.clear();
      for (const json& x : h) {
        if (!x.is_number_integer()) schema_error("'network.hidden' must be an array of integers");
        c.mpc.hidden.push_back(x.get<int>());
      }
    });
  });
  with(doc, "trainer", [&] { apply_trainer(doc.at("trainer"), c.trainer); });
  with(doc, "solver", [&] { apply_solver(doc.at("solver"), "solver", c.trainer.solver); });
  with(doc, "mpc_discount", [&] { c.mpc.discount = get_number(doc, "", "mpc_discount"); });
  with(doc, "seed", [&] {
    const json& s = doc.at("seed");
    if (!s.is_number_unsigned()) schema_error("'seed' must be a non-negative integer");
    c.seed = s.get<std::uint64_t>();
  });
  with(doc, "output_dir", [&] { c.output_dir = get_string(doc, "", "output_dir"); });
  with(doc, "gradcheck_trials", [&] { c.gradcheck_trials = get_int(doc, "", "gradcheck_trials"); });
  with(doc, "max_failure_rate", [&] { c.max_failure_rate = get_number(doc, "", "max_failure_rate"); });
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config(read_file(path)); }

std::string config_to_json(const ExperimentConfig& c) {
  json j;
  if (!c.preset.empty()) j["preset"] = c.preset;
  j["variant"] = std::string(to_string(c.mpc.variant));
  j["horizon"] = c.mpc.horizon;
  json world;
  const World& w = c.mpc.world;
  world["start"] = vector_json(w.start);
  world["dt"] = w.plant.dt;
  world["state_bound"] = w.state_bound;
  world["action_bound"] = w.action_bound;
  world["obstacles"] = json::array();
  for (const Obstacle& ob : w.obstacles) world["obstacles"].push_back(obstacle_json(ob));
  j["world"] = world;
  j["weights"] = {{"w_mpc", c.mpc.w_mpc},
                  {"w_rl", c.trainer.w_rl},
                  {"Q", vector_json(c.mpc.weights.Q.diagonal())},
                  {"R", vector_json(c.mpc.weights.R.diagonal())}};
  json ti;
  ti["terminal"] = vector_json(c.init.terminal);
  if (c.mpc.variant == Variant::Lod) {
    ti["omega_ref"] = c.init.omega_ref;
    ti["p_omega"] = c.init.p_omega;
    ti["omega_ref_upper"] = c.init.omega_ref_upper;
  } else {
    ti["initial_decay"] = c.init.initial_decay;
    ti["output_weight_scale"] = c.init.output_weight_scale;
    ti["weight_bound"] = c.init.weight_bound;
    j["network"] = {{"hidden", c.mpc.hidden}};
  }
  j["theta_init"] = ti;
  const TrainerConfig& t = c.trainer;
  json blocks = json::object();
  for (const auto& [name, lr] : t.block_learning_rates) blocks[name] = lr;
  j["trainer"] = {{"episodes", t.episodes},
                  {"steps", t.steps},
                  {"discount", t.discount},
                  {"learning_rate", t.learning_rate},
                  {"block_learning_rates", blocks},
                  {"beta1", t.beta1},
                  {"beta2", t.beta2},
                  {"adam_eps", t.adam_eps},
                  {"buffer_size", t.buffer_size},
                  {"noise_std", vector_json(t.noise_std)},
                  {"noise_decay", t.noise_decay},
                  {"max_failures", t.max_failures},
                  {"eval_every", t.eval_every}};
  j["solver"] = {{"tolerance", t.solver.tolerance},
                 {"max_iterations", t.solver.max_iterations},
                 {"regularization", t.solver.regularization},
                 {"warm_start", t.solver.warm_start},
                 {"polish", t.solver.polish}};
  j["mpc_discount"] = c.mpc.discount;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["gradcheck_trials"] = c.gradcheck_trials;
  j["max_failure_rate"] = c.max_failure_rate;
  return dump(j);
}

std::string config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : config_to_json(cfg)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ThetaVector initial_theta(const ExperimentConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  return initial_theta(cfg.mpc, cfg.init, rng);
}

std::string theta_to_json(const ThetaVector& theta) {
  json j;
  j["blocks"] = json::array();
  for (const auto& b : theta.blocks()) {
    json block;
    block["name"] = b.name;
    block["size"] = b.size;
    block["values"] = vector_json(theta.values().segment(b.offset, b.size));
    block["lower"] = bound_json(theta.lower().segment(b.offset, b.size));
    block["upper"] = bound_json(theta.upper().segment(b.offset, b.size));
    j["blocks"].push_back(block);
  }
  return dump(j);
}

ThetaVector theta_from_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw ConfigError(ConfigErrorKind::Parse, position_message(text, e.byte, e.what()));
  }
  check_keys(doc, "", {"blocks"});
  if (!doc.contains("blocks") || !doc.at("blocks").is_array()) schema_error("snapshot needs a 'blocks' array");
  ThetaVector theta;
  for (const json& b : doc.at("blocks")) {
    check_keys(b, "blocks[]", {"name", "size", "values", "lower", "upper"});
    for (const char* key : {"name", "size", "values", "lower", "upper"}) {
      if (!b.contains(key)) schema_error(std::string("snapshot block needs '") + key + "'");
    }
    const std::string name = get_string(b, "blocks[]", "name");
    const int size = get_int(b, "blocks[]", "size");
    auto bounds = [&](const char* key, double missing) {
      const json& a = b.at(key);
      if (!a.is_array() || static_cast<int>(a.size()) != size) {
        schema_error("block '" + name + "' " + key + " must have " + std::to_string(size) + " entries");
      }
      Eigen::VectorXd v(size);
      for (int i = 0; i < size; ++i) {
        if (a[i].is_null()) {
          v(i) = missing;
        } else if (a[i].is_number()) {
          v(i) = a[i].get<double>();
        } else {
          schema_error("block '" + name + "' " + key + " must hold numbers");
        }
      }
      return v;
    };
    const double inf = std::numeric_limits<double>::infinity();
    const Eigen::VectorXd values = bounds("values", std::numeric_limits<double>::quiet_NaN());
    if (!values.allFinite()) schema_error("block '" + name + "' values must be finite");
    try {
      theta.add_block(name, values, bounds("lower", -inf), bounds("upper", inf));
    } catch (const std::invalid_argument& e) {
      schema_error(e.what());
    }
  }
  return theta;
}

ThetaVector load_theta(const std::filesystem::path& path) { return theta_from_json(read_file(path)); }

void check_theta_matches(const ExperimentConfig& cfg, const ThetaVector& theta) {
  const ThetaVector ref = initial_theta(cfg);
  if (ref.blocks().size() != theta.blocks().size()) {
    schema_error("snapshot has " + std::to_string(theta.blocks().size()) + " blocks, config expects " +
                 std::to_string(ref.blocks().size()));
  }
  for (size_t i = 0; i < ref.blocks().size(); ++i) {
    const auto& a = ref.blocks()[i];
    const auto& b = theta.blocks()[i];
    if (a.name != b.name || a.size != b.size) {
      schema_error("snapshot block '" + b.name + "' (" + std::to_string(b.size) + ") does not match '" +
                   a.name + "' (" + std::to_string(a.size) + ")");
    }
  }
}

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

std::string trajectory_csv(const Rollout& r, int O) {
  std::string out = "t,px,py,vx,vy,ax,ay";
  for (int i = 1; i <= O; ++i) out += ",h_" + std::to_string(i);
  for (int i = 1; i <= O; ++i) out += ",decay_" + std::to_string(i);
  out += ",sigma_total\n";
  for (size_t t = 0; t < r.states.size(); ++t) {
    out += std::to_string(t);
    for (int j = 0; j < 4; ++j) out += "," + format_double(r.states[t](j));
    const bool acted = t < r.actions.size();
    for (int j = 0; j < 2; ++j) out += acted ? "," + format_double(r.actions[t](j)) : ",";
    for (int i = 0; i < O; ++i) out += "," + format_double(r.h(static_cast<Eigen::Index>(t), i));
    for (int i = 0; i < O; ++i) out += acted ? "," + format_double(r.decay(static_cast<Eigen::Index>(t), i)) : ",";
    out += acted ? "," + format_double(r.slack(static_cast<Eigen::Index>(t))) : ",";
    out += "\n";
  }
  return out;
}

std::string costs_csv(const std::vector<EpisodeRecord>& episodes) {
  std::string out = "episode,cumulative_cost,slack_penalty,min_h\n";
  for (const EpisodeRecord& r : episodes) {
    out += std::to_string(r.episode) + "," + format_double(r.cost) + "," + format_double(r.slack_penalty) + "," +
           format_double(r.min_h) + "\n";
  }
  return out;
}

std::string episode_json(const EpisodeRecord& r) {
  json j;
  j["episode"] = r.episode;
  j["cost"] = r.cost;
  j["slack_total"] = r.slack_total;
  j["slack_penalty"] = r.slack_penalty;
  j["min_h"] = r.min_h;
  j["mean_abs_td"] = r.mean_abs_td;
  j["transitions"] = r.transitions;
  j["failures"] = r.failures;
  j["aborted"] = r.aborted;
  j["updates"] = r.updates;
  j["noise_std"] = vector_json(r.noise_std);
  j["eval_cost"] = r.eval_cost ? json(*r.eval_cost) : json(nullptr);
  j["eval_min_h"] = r.eval_min_h ? json(*r.eval_min_h) : json(nullptr);
  j["theta"] = vector_json(r.theta);
  return j.dump();
}

void export_bundle(const ResultBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const int O = b.config.mpc.num_obstacles();
  write_file(dir / "costs.csv", costs_csv(b.episodes));
  if (b.trajectory) write_file(dir / "trajectory.csv", trajectory_csv(*b.trajectory, O));
  if (b.theta) write_file(dir / "theta.json", theta_to_json(*b.theta));
  if (!b.episodes.empty()) {
    std::string log;
    for (const EpisodeRecord& r : b.episodes) log += episode_json(r) + "\n";
    write_file(dir / "training_log.jsonl", log);
  }
  json summary;
  summary["command"] = b.command;
  summary["episodes"] = static_cast<int>(b.episodes.size());
  if (!b.episodes.empty()) {
    summary["first_episode_cost"] = b.episodes.front().cost;
    summary["last_episode_cost"] = b.episodes.back().cost;
    int failures = 0;
    for (const EpisodeRecord& r : b.episodes) failures += r.failures;
    summary["training_failures"] = failures;
  }
  if (b.trajectory) summary["rollout"] = rollout_summary(*b.trajectory);
  write_file(dir / "summary.json", dump(summary));

  json meta;
  meta["command"] = b.command;
  meta["config_hash"] = config_hash(b.config);
  meta["seed"] = b.config.seed;
  meta["runtime_seconds"] = b.runtime_seconds;
  meta["versions"] = {{"cbfmpc", kVersion},
                      {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                    "." + std::to_string(EIGEN_MINOR_VERSION)},
                      {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                            std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                            std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
  meta["config"] = json::parse(config_to_json(b.config));
  write_file(dir / "meta.json", dump(meta));
}

ResultBundle run_train(const ExperimentConfig& cfg, const EpisodeCallback& on_episode) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  TrainerConfig tc = cfg.trainer;
  // Noise draws use a stream separate from the theta0 draw.
  tc.seed = cfg.seed + 1;
  TrainingLog log = run_training(cfg.mpc, initial_theta(cfg), tc, on_episode);
  ResultBundle b;
  b.config = cfg;
  b.command = "train";
  b.episodes = std::move(log.episodes);
  b.trajectory = evaluate_policy(MpcModel(cfg.mpc, log.theta), tc.steps, tc.solver);
  b.theta = std::move(log.theta);
  b.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return b;
}

ResultBundle run_evaluate(const ExperimentConfig& cfg, const ThetaVector& theta) {
  cfg.validate();
  check_theta_matches(cfg, theta);
  const auto start = std::chrono::steady_clock::now();
  ResultBundle b;
  b.config = cfg;
  b.command = "evaluate";
  b.trajectory = evaluate_policy(MpcModel(cfg.mpc, theta), cfg.trainer.steps, cfg.trainer.solver);
  b.theta = theta;
  b.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return b;
}

GradientReport run_check_gradients(const ExperimentConfig& cfg, int trials, Execution exec) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  GradCheckOptions options;
  options.solver = cfg.trainer.solver;
  options.exec = exec;
  GradientReport report;
  report.trials = trials;
  for (int trial = 0; trial < trials; ++trial) {
    ThetaInit init = cfg.init;
    init.omega_ref = uniform(0.3, 0.8);
    init.p_omega = uniform(5.0, 25.0);
    ThetaVector theta = initial_theta(cfg.mpc, init, rng);
    Eigen::VectorXd values = theta.values();
    const auto& f = theta.block("F");
    for (int j = 0; j < f.size; ++j) values(f.offset + j) = uniform(50.0, 150.0);
    theta.set_values(values);
    const State s(uniform(-5.0, -1.0), uniform(-5.0, -1.0), uniform(-0.5, 0.5), uniform(-0.5, 0.5));
    const Action a(uniform(-1.0, 1.0), uniform(-1.0, 1.0));
    const int t = static_cast<int>(uniform(0.0, 40.0));
    RnnHiddenState hidden;
    if (cfg.mpc.variant == Variant::Rnn) {
      hidden = RnnHiddenState::zeros(MpcModel(cfg.mpc, theta).network().mlp());
      for (auto& q : hidden.q)
        for (Eigen::Index i = 0; i < q.size(); ++i) q(i) = uniform(0.0, 1.0);
    }
    GradCheckResult r = check_action_value_gradient(cfg.mpc, theta, s, a, t, hidden, options);
    if (r.usable()) {
      ++report.usable;
      report.max_rel_error = std::max(report.max_rel_error, r.rel_error);
    }
    report.results.push_back(std::move(r));
  }
  return report;
}

}  // namespace cbfmpc
