#include "misguide/runconfig.hpp"

#include <filesystem>
#include <limits>
#include <set>
#include <type_traits>

#include "misguide/errors.hpp"

namespace misguide {

namespace {
using nlohmann::json;
using ojson = nlohmann::ordered_json;

template <class T>
struct is_vector : std::false_type {};
template <class T>
struct is_vector<std::vector<T>> : std::true_type {};

template <class T>
bool holds(const json& j) {
  if constexpr (std::is_same_v<T, bool>) {
    return j.is_boolean();
  } else if constexpr (std::is_unsigned_v<T>) {
    return j.is_number_unsigned();
  } else if constexpr (std::is_integral_v<T>) {
    return j.is_number_integer();
  } else if constexpr (std::is_floating_point_v<T>) {
    return j.is_number();
  } else if constexpr (std::is_same_v<T, std::string>) {
    return j.is_string();
  } else if constexpr (is_vector<T>::value) {
    if (!j.is_array()) return false;
    for (const auto& e : j)
      if (!holds<typename T::value_type>(e)) return false;
    return true;
  } else {
    static_assert(sizeof(T) == 0, "unsupported config field type");
  }
}

template <class T>
const char* type_name() {
  if constexpr (std::is_same_v<T, bool>) return "a boolean";
  else if constexpr (std::is_unsigned_v<T>) return "a non-negative integer";
  else if constexpr (std::is_integral_v<T>) return "an integer";
  else if constexpr (std::is_floating_point_v<T>) return "a number";
  else if constexpr (std::is_same_v<T, std::string>) return "a string";
  else return "an array";
}

// Walks one JSON object, collecting problems instead of stopping at the first.
class Section {
 public:
  Section(const json* j, std::string path, std::vector<std::string>& out) : j_(j), path_(std::move(path)), out_(out) {
    if (j_ && !j_->is_object()) {
      out_.push_back(path_ + ": must be an object");
      j_ = nullptr;
    }
  }
  ~Section() {
    if (!j_) return;
    for (const auto& [key, _] : j_->items())
      if (!seen_.contains(key)) out_.push_back(name(key) + ": unknown key");
  }

  template <class T>
  void field(const std::string& key, T& dst) {
    const json* v = find(key);
    if (!v) return;
    if (!holds<T>(*v)) {
      out_.push_back(name(key) + ": expected " + type_name<T>());
      return;
    }
    if constexpr (std::is_same_v<T, unsigned>) {
      auto wide = v->get<std::uint64_t>();
      if (wide > std::numeric_limits<unsigned>::max()) {
        out_.push_back(name(key) + ": too large");
        return;
      }
    }
    dst = v->get<T>();
  }

  template <class E, class Parse>
  void enum_field(const std::string& key, E& dst, Parse parse) {
    std::string s;
    const std::size_t before = out_.size();
    field(key, s);
    if (s.empty() || out_.size() != before) return;
    try {
      dst = parse(s);
    } catch (const std::exception&) {
      out_.push_back(name(key) + ": unknown value '" + s + "'");
    }
  }

  Section sub(const std::string& key) { return Section(find(key), name(key), out_); }

 private:
  const json* find(const std::string& key) {
    seen_.insert(key);
    if (!j_ || !j_->contains(key)) return nullptr;
    return &(*j_)[key];
  }
  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* j_;
  std::string path_;
  std::vector<std::string>& out_;
  std::set<std::string> seen_;
};

void read_model(Section& s, RunConfig::Model& m) {
  s.field("hidden", m.hidden);
  s.field("epochs", m.epochs);
  s.field("batch_size", m.batch_size);
  s.field("learning_rate", m.learning_rate);
  s.field("momentum", m.momentum);
}

ojson model_json(const RunConfig::Model& m) {
  return ojson{{"hidden", m.hidden},
               {"epochs", m.epochs},
               {"batch_size", m.batch_size},
               {"learning_rate", m.learning_rate},
               {"momentum", m.momentum}};
}

void check_model(const RunConfig::Model& m, const std::string& prefix, std::vector<std::string>& out) {
  if (m.hidden.empty()) out.push_back(prefix + ".hidden: needs at least one layer");
  for (auto h : m.hidden)
    if (h == 0) out.push_back(prefix + ".hidden: widths must be positive");
  if (m.epochs == 0) out.push_back(prefix + ".epochs: must be positive");
  if (m.batch_size == 0) out.push_back(prefix + ".batch_size: must be positive");
  if (!(m.learning_rate > 0.0)) out.push_back(prefix + ".learning_rate: must be positive");
  if (!(m.momentum >= 0.0 && m.momentum < 1.0)) out.push_back(prefix + ".momentum: must lie in [0, 1)");
}

void check_path(const std::string& path, const std::string& key, std::vector<std::string>& out) {
  if (path.empty()) return;
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) out.push_back(key + ": file not found: " + path);
}

TrainConfig train_config(const RunConfig::Model& m, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = m.epochs;
  t.batch_size = m.batch_size;
  t.learning_rate = m.learning_rate;
  t.momentum = m.momentum;
  t.seed = seed;
  return t;
}
}  // namespace

std::pair<AttackMethod, LabelMode> parse_attacker(const std::string& name) {
  auto dash = name.rfind('-');
  if (dash == std::string::npos) throw std::invalid_argument("attacker must look like <method>-<mode>: " + name);
  return {attack_method_from_string(name.substr(0, dash)), label_mode_from_string(name.substr(dash + 1))};
}

std::vector<std::string> validate(const RunConfig& c) {
  std::vector<std::string> out;
  const auto& d = c.data;
  if (d.train_per_class < 2) out.push_back("data.train_per_class: must be at least 2");
  if (d.test_per_class == 0) out.push_back("data.test_per_class: must be positive");
  if (!(d.bound > 0.0)) out.push_back("data.bound: must be positive");
  if (!(d.surrogate_offset >= 0.0)) out.push_back("data.surrogate_offset: must be non-negative");
  if (d.surrogate_per_class == 0) out.push_back("data.surrogate_per_class: must be positive");
  if (!(d.ood_shift >= 0.0)) out.push_back("data.ood_shift: must be non-negative");
  if (d.ood_pool_per_class == 0) out.push_back("data.ood_pool_per_class: must be positive");
  if (d.train_csv.empty() != d.test_csv.empty()) out.push_back("data.test_csv: train_csv and test_csv go together");
  check_path(d.train_csv, "data.train_csv", out);
  check_path(d.test_csv, "data.test_csv", out);
  check_path(d.surrogate_csv, "data.surrogate_csv", out);

  check_model(c.victim, "victim", out);
  check_model(c.extractor, "extractor", out);

  if (!(c.ood.ridge >= 0.0)) out.push_back("ood.ridge: must be non-negative");
  if (!(c.ood.percentile >= 0.0 && c.ood.percentile <= 100.0)) out.push_back("ood.percentile: must lie in [0, 100]");
  if (!(c.ood.calibration_fraction > 0.0 && c.ood.calibration_fraction < 1.0)) {
    out.push_back("ood.calibration_fraction: must lie in (0, 1)");
  }

  if (!(c.defense.p >= 0.0 && c.defense.p <= 1.0)) out.push_back("defense.p: must lie in [0, 1]");
  if (!(c.defense.random_logit_scale > 0.0)) out.push_back("defense.random_logit_scale: must be positive");

  const auto& a = c.attack;
  if (a.budget == 0) out.push_back("attack.budget: must be positive");
  if (a.batch_size == 0) out.push_back("attack.batch_size: must be positive");
  if (a.noise_dim == 0) out.push_back("attack.noise_dim: must be positive");
  if (!(a.lambda >= 0.0)) out.push_back("attack.lambda: must be non-negative");
  if (!(a.zo_step > 0.0)) out.push_back("attack.zo_step: must be positive");
  if (a.zo_directions == 0) out.push_back("attack.zo_directions: must be at least 1");
  if (a.clone_steps == 0) out.push_back("attack.clone_steps: must be positive");
  if (!(a.clone_lr > 0.0)) out.push_back("attack.clone_lr: must be positive");
  if (!(a.generator_lr > 0.0)) out.push_back("attack.generator_lr: must be positive");
  if (a.eval_every == 0) out.push_back("attack.eval_every: must be positive");
  for (auto h : a.clone_hidden)
    if (h == 0) out.push_back("attack.clone_hidden: widths must be positive");
  for (auto h : a.generator_hidden)
    if (h == 0) out.push_back("attack.generator_hidden: widths must be positive");
  if (a.method == AttackMethod::Dfme && a.label_mode == LabelMode::Hard) {
    out.push_back("attack.label_mode: dfme needs soft labels");
  }

  const auto& s = c.sweep;
  if (s.p_values.empty()) out.push_back("sweep.p_values: must not be empty");
  for (double p : s.p_values)
    if (!(p >= 0.0 && p <= 1.0)) out.push_back("sweep.p_values: every value must lie in [0, 1]");
  if (s.seeds.empty()) out.push_back("sweep.seeds: must not be empty");
  if (s.attackers.empty()) out.push_back("sweep.attackers: must not be empty");
  for (const auto& name : s.attackers) {
    try {
      auto [m, mode] = parse_attacker(name);
      if (m == AttackMethod::Dfme && mode == LabelMode::Hard) out.push_back("sweep.attackers: dfme needs soft labels");
    } catch (const std::exception&) {
      out.push_back("sweep.attackers: unknown attacker '" + name + "'");
    }
  }
  if (s.workers == 0) out.push_back("sweep.workers: must be positive");
  if (!(s.benign_threshold_fraction >= 0.0 && s.benign_threshold_fraction <= 1.0)) {
    out.push_back("sweep.benign_threshold_fraction: must lie in [0, 1]");
  }

  if (c.serve.host.empty()) out.push_back("serve.host: must not be empty");
  if (c.serve.port < 0 || c.serve.port > 65535) out.push_back("serve.port: must lie in [0, 65535]");
  return out;
}

RunConfig parse_run_config(const std::string& text) {
  json j = json::parse(text, nullptr, false, true);
  if (j.is_discarded()) throw ConfigInvalid({"config: not valid JSON"});
  RunConfig c;
  std::vector<std::string> out;
  {
    Section root(&j, "", out);
    root.field("seed", c.seed);
    {
      auto s = root.sub("data");
      s.field("train_per_class", c.data.train_per_class);
      s.field("test_per_class", c.data.test_per_class);
      s.field("bound", c.data.bound);
      s.field("surrogate_offset", c.data.surrogate_offset);
      s.field("surrogate_per_class", c.data.surrogate_per_class);
      s.field("ood_shift", c.data.ood_shift);
      s.field("ood_pool_per_class", c.data.ood_pool_per_class);
      s.field("train_csv", c.data.train_csv);
      s.field("test_csv", c.data.test_csv);
      s.field("surrogate_csv", c.data.surrogate_csv);
    }
    {
      auto s = root.sub("victim");
      read_model(s, c.victim);
    }
    {
      auto s = root.sub("extractor");
      read_model(s, c.extractor);
      s.field("background_clusters", c.extractor.background_clusters);
    }
    {
      auto s = root.sub("ood");
      s.field("ridge", c.ood.ridge);
      s.field("percentile", c.ood.percentile);
      s.field("calibration_fraction", c.ood.calibration_fraction);
    }
    {
      auto s = root.sub("defense");
      s.field("p", c.defense.p);
      s.enum_field("label_mode", c.defense.label_mode, label_mode_from_string);
      s.field("consistent_responses", c.defense.consistent_responses);
      s.field("random_logit_scale", c.defense.random_logit_scale);
      s.field("master_seed", c.defense.master_seed);
    }
    {
      auto s = root.sub("attack");
      auto& a = c.attack;
      s.enum_field("method", a.method, attack_method_from_string);
      s.enum_field("label_mode", a.label_mode, label_mode_from_string);
      s.field("budget", a.budget);
      s.field("batch_size", a.batch_size);
      s.field("noise_dim", a.noise_dim);
      s.field("generator_hidden", a.generator_hidden);
      s.field("clone_hidden", a.clone_hidden);
      s.field("lambda", a.lambda);
      s.field("generator_steps", a.generator_steps);
      s.field("clone_steps", a.clone_steps);
      s.field("zo_directions", a.zo_directions);
      s.field("zo_step", a.zo_step);
      s.field("clone_lr", a.clone_lr);
      s.field("generator_lr", a.generator_lr);
      s.field("knockoff_epochs", a.knockoff_epochs);
      s.field("eval_every", a.eval_every);
      s.field("seed", a.seed);
    }
    {
      auto s = root.sub("sweep");
      s.field("p_values", c.sweep.p_values);
      s.field("seeds", c.sweep.seeds);
      s.field("attackers", c.sweep.attackers);
      s.field("workers", c.sweep.workers);
      s.field("benign_threshold_fraction", c.sweep.benign_threshold_fraction);
    }
    {
      auto s = root.sub("serve");
      s.field("host", c.serve.host);
      s.field("port", c.serve.port);
      s.field("admin_token", c.serve.admin_token);
      s.field("single_worker", c.serve.single_worker);
    }
  }
  // Fields that failed to parse keep their defaults, so semantic checks still apply.
  for (auto& v : validate(c)) out.push_back(std::move(v));
  if (!out.empty()) throw ConfigInvalid(std::move(out));
  return c;
}

nlohmann::ordered_json to_json(const RunConfig& c) {
  ojson j;
  j["seed"] = c.seed;
  j["data"] = ojson{{"train_per_class", c.data.train_per_class},
                    {"test_per_class", c.data.test_per_class},
                    {"bound", c.data.bound},
                    {"surrogate_offset", c.data.surrogate_offset},
                    {"surrogate_per_class", c.data.surrogate_per_class},
                    {"ood_shift", c.data.ood_shift},
                    {"ood_pool_per_class", c.data.ood_pool_per_class},
                    {"train_csv", c.data.train_csv},
                    {"test_csv", c.data.test_csv},
                    {"surrogate_csv", c.data.surrogate_csv}};
  j["victim"] = model_json(c.victim);
  j["extractor"] = model_json(c.extractor);
  j["extractor"]["background_clusters"] = c.extractor.background_clusters;
  j["ood"] = ojson{{"ridge", c.ood.ridge},
                   {"percentile", c.ood.percentile},
                   {"calibration_fraction", c.ood.calibration_fraction}};
  j["defense"] = ojson{{"p", c.defense.p},
                       {"label_mode", to_string(c.defense.label_mode)},
                       {"consistent_responses", c.defense.consistent_responses},
                       {"random_logit_scale", c.defense.random_logit_scale},
                       {"master_seed", c.defense.master_seed}};
  const auto& a = c.attack;
  j["attack"] = ojson{{"method", to_string(a.method)},
                      {"label_mode", to_string(a.label_mode)},
                      {"budget", a.budget},
                      {"batch_size", a.batch_size},
                      {"noise_dim", a.noise_dim},
                      {"generator_hidden", a.generator_hidden},
                      {"clone_hidden", a.clone_hidden},
                      {"lambda", a.lambda},
                      {"generator_steps", a.generator_steps},
                      {"clone_steps", a.clone_steps},
                      {"zo_directions", a.zo_directions},
                      {"zo_step", a.zo_step},
                      {"clone_lr", a.clone_lr},
                      {"generator_lr", a.generator_lr},
                      {"knockoff_epochs", a.knockoff_epochs},
                      {"eval_every", a.eval_every},
                      {"seed", a.seed}};
  j["sweep"] = ojson{{"p_values", c.sweep.p_values},
                     {"seeds", c.sweep.seeds},
                     {"attackers", c.sweep.attackers},
                     {"workers", c.sweep.workers},
                     {"benign_threshold_fraction", c.sweep.benign_threshold_fraction}};
  j["serve"] = ojson{{"host", c.serve.host},
                     {"port", c.serve.port},
                     {"admin_token", c.serve.admin_token},
                     {"single_worker", c.serve.single_worker}};
  return j;
}

std::string effective_config_text(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

TestbedConfig testbed_config(const RunConfig& c) {
  TestbedConfig t;
  t.data_seed = c.seed;
  t.train_per_class = c.data.train_per_class;
  t.test_per_class = c.data.test_per_class;
  t.bound = c.data.bound;
  t.victim_hidden = c.victim.hidden;
  t.extractor_hidden = c.extractor.hidden;
  t.background_clusters = c.extractor.background_clusters;
  t.victim_train = train_config(c.victim, c.seed);
  t.extractor_train = train_config(c.extractor, c.seed);
  t.ridge = c.ood.ridge;
  t.percentile = c.ood.percentile;
  t.calibration_fraction = c.ood.calibration_fraction;
  t.surrogate_offset = c.data.surrogate_offset;
  t.surrogate_per_class = c.data.surrogate_per_class;
  return t;
}

}  // namespace misguide
