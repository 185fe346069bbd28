#pragma once

// Run configuration and its flat `key=value` text form.
//
//   # comment
//   data.joints=5
//   consistency.lambda=1/15      # simple fractions are accepted
//
// Unknown keys and malformed values are rejected with the offending key in
// the message. Serialisation prints every key in sorted order with
// round-trip precision, so parse(to_text(c)) reproduces c exactly.

#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "humancm/consistency.hpp"
#include "humancm/motion_data.hpp"

namespace humancm {

class ConfigError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

using ConfigMap = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& text) {
  const auto slash = text.find('/');
  if (slash != std::string::npos)
    return parse_double(key, text.substr(0, slash)) / parse_double(key, text.substr(slash + 1));
  const std::string t = trim(text);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty())
    throw ConfigError("config key '" + key + "': expected a number, got '" + text + "'");
  return v;
}

template <class Int>
Int parse_int(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  Int v{};
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty())
    throw ConfigError("config key '" + key + "': expected an integer, got '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + text + "'");
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline ConfigMap parse_config_text(const std::string& text) {
  ConfigMap out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = detail::trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    out[key] = detail::trim(line.substr(eq + 1));
  }
  return out;
}

struct EvalConfig {
  int samples = 50;           // K per test item
  double threshold = 0.5;     // multi-modal grouping radius
  int repetitions = 3;        // bench timing runs
  int teacher_steps = 100;    // default DDIM steps when sampling a teacher
  std::uint64_t seed = 1234;  // sampling noise seed

  bool operator==(const EvalConfig&) const = default;
};

struct RunConfig {
  SyntheticConfig data;
  int n_test = 64;
  int keep = 15;
  ArchConfig model;
  int schedule_steps = 100;
  double beta_min = 1e-3;
  double beta_max = 0.2;
  LrSchedule lr;
  AdamConfig adam;
  TeacherConfig teacher;
  ConsistencyConfig consistency;
  EvalConfig eval;

  int channels() const { return 3 * data.joints; }

  /// Architecture with token and channel sizes filled in from the data shape.
  ArchConfig arch() const {
    ArchConfig a = model;
    a.latent_rows = keep;
    a.condition_rows = keep;
    a.channel_dim = channels();
    return a;
  }

  NoiseSchedule schedule() const { return build_schedule(schedule_steps, beta_min, beta_max); }

  TeacherConfig teacher_config() const {
    TeacherConfig t = teacher;
    t.lr = lr;
    t.adam = adam;
    return t;
  }

  ConsistencyConfig consistency_config() const {
    ConsistencyConfig c = consistency;
    c.lr = lr;
    c.adam = adam;
    return c;
  }

  /// Throws ConfigError naming the first invalid key.
  void validate() const {
    try {
      data.validate();
      require(n_test >= 1, "data.n_test must be >= 1");
      require(keep >= 1 && keep <= data.history + data.future, "codec.keep must be in [1, H+F]");
      arch().validate();
      const NoiseSchedule s = schedule();
      lr.validate();
      require(adam.beta1 >= 0.0 && adam.beta1 < 1.0, "optim.beta1 must be in [0, 1)");
      require(adam.beta2 >= 0.0 && adam.beta2 < 1.0, "optim.beta2 must be in [0, 1)");
      require(adam.eps > 0.0, "optim.eps must be > 0");
      require(adam.clip_norm >= 0.0, "optim.clip_norm must be >= 0");
      teacher_config().validate();
      consistency_config().validate(s);
      require(eval.samples >= 1, "eval.samples must be >= 1");
      require(eval.threshold > 0.0, "eval.threshold must be > 0");
      require(eval.repetitions >= 1, "eval.repetitions must be >= 1");
      require(eval.teacher_steps >= 1 && eval.teacher_steps <= schedule_steps,
              "eval.teacher_steps must be in [1, schedule.steps]");
    } catch (const ConfigError&) {
      throw;
    } catch (const InvalidArgument& e) {
      throw ConfigError(e.what());
    }
  }
};

namespace detail {

/// One accessor per key: reads a value into the config or formats it.
struct ConfigField {
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline std::map<std::string, ConfigField> config_fields() {
  std::map<std::string, ConfigField> f;
  auto real = [&f](const std::string& key, auto member) {
    f[key] = {[member](RunConfig& c, const std::string& k, const std::string& v) {
                member(c) = parse_double(k, v);
              },
              [member](const RunConfig& c) { return format_double(member(c)); }};
  };
  auto integer = [&f](const std::string& key, auto member) {
    f[key] = {[member](RunConfig& c, const std::string& k, const std::string& v) {
                using T = std::remove_reference_t<decltype(member(c))>;
                member(c) = parse_int<T>(k, v);
              },
              [member](const RunConfig& c) { return std::to_string(member(c)); }};
  };
  auto boolean = [&f](const std::string& key, auto member) {
    f[key] = {[member](RunConfig& c, const std::string& k, const std::string& v) {
                member(c) = parse_bool(k, v);
              },
              [member](const RunConfig& c) {
                return std::string(member(c) ? "true" : "false");
              }};
  };
#define HCM_REF(expr) [](auto& c) -> auto& { return expr; }
  integer("data.joints", HCM_REF(c.data.joints));
  integer("data.history", HCM_REF(c.data.history));
  integer("data.future", HCM_REF(c.data.future));
  integer("data.n_sequences", HCM_REF(c.data.n_sequences));
  integer("data.n_test", HCM_REF(c.n_test));
  real("data.amplitude_min", HCM_REF(c.data.amplitude_min));
  real("data.amplitude_max", HCM_REF(c.data.amplitude_max));
  real("data.frequency_min", HCM_REF(c.data.frequency_min));
  real("data.frequency_max", HCM_REF(c.data.frequency_max));
  real("data.speed_min", HCM_REF(c.data.speed_min));
  real("data.speed_max", HCM_REF(c.data.speed_max));
  real("data.noise_std", HCM_REF(c.data.noise_std));
  integer("data.seed", HCM_REF(c.data.seed));
  f["data.families"] = {[](RunConfig& c, const std::string&, const std::string& v) {
                          c.data.motion_families.clear();
                          std::istringstream in(v);
                          std::string item;
                          while (std::getline(in, item, ','))
                            if (!trim(item).empty()) c.data.motion_families.push_back(trim(item));
                        },
                        [](const RunConfig& c) {
                          std::string out;
                          for (const auto& fam : c.data.motion_families) out += (out.empty() ? "" : ",") + fam;
                          return out;
                        }};
  integer("codec.keep", HCM_REF(c.keep));
  integer("model.dim", HCM_REF(c.model.model_dim));
  integer("model.blocks", HCM_REF(c.model.n_blocks));
  integer("model.heads", HCM_REF(c.model.n_heads));
  integer("model.ffn_mult", HCM_REF(c.model.ffn_mult));
  integer("model.seed", HCM_REF(c.model.seed));
  integer("schedule.steps", HCM_REF(c.schedule_steps));
  real("schedule.beta_min", HCM_REF(c.beta_min));
  real("schedule.beta_max", HCM_REF(c.beta_max));
  real("optim.lr", HCM_REF(c.lr.base_lr));
  real("optim.decay", HCM_REF(c.lr.decay_factor));
  integer("optim.decay_every", HCM_REF(c.lr.decay_every));
  real("optim.beta1", HCM_REF(c.adam.beta1));
  real("optim.beta2", HCM_REF(c.adam.beta2));
  real("optim.eps", HCM_REF(c.adam.eps));
  real("optim.clip_norm", HCM_REF(c.adam.clip_norm));
  integer("teacher.epochs", HCM_REF(c.teacher.epochs));
  integer("teacher.batch", HCM_REF(c.teacher.batch));
  real("teacher.p_uncond", HCM_REF(c.teacher.p_uncond));
  integer("teacher.seed", HCM_REF(c.teacher.seed));
  integer("consistency.k", HCM_REF(c.consistency.k));
  integer("consistency.k_max", HCM_REF(c.consistency.k_max));
  real("consistency.w_min", HCM_REF(c.consistency.w_min));
  real("consistency.w_max", HCM_REF(c.consistency.w_max));
  real("consistency.w_star", HCM_REF(c.consistency.w_star));
  real("consistency.lambda", HCM_REF(c.consistency.lambda));
  real("consistency.rho", HCM_REF(c.consistency.rho));
  real("consistency.sigma_data", HCM_REF(c.consistency.sigma_data));
  real("consistency.huber_c", HCM_REF(c.consistency.huber_c));
  integer("consistency.epochs", HCM_REF(c.consistency.epochs));
  integer("consistency.batch", HCM_REF(c.consistency.batch));
  integer("consistency.seed", HCM_REF(c.consistency.seed));
  boolean("consistency.use_ema", HCM_REF(c.consistency.use_ema));
  f["consistency.distance"] = {
      [](RunConfig& c, const std::string& k, const std::string& v) {
        if (v == "squared_l2") c.consistency.distance = ad::Distance::SquaredL2;
        else if (v == "pseudo_huber") c.consistency.distance = ad::Distance::PseudoHuber;
        else throw ConfigError("config key '" + k + "': expected squared_l2 or pseudo_huber, got '" + v + "'");
      },
      [](const RunConfig& c) {
        return std::string(c.consistency.distance == ad::Distance::SquaredL2 ? "squared_l2" : "pseudo_huber");
      }};
  integer("eval.samples", HCM_REF(c.eval.samples));
  real("eval.threshold", HCM_REF(c.eval.threshold));
  integer("eval.repetitions", HCM_REF(c.eval.repetitions));
  integer("eval.teacher_steps", HCM_REF(c.eval.teacher_steps));
  integer("eval.seed", HCM_REF(c.eval.seed));
#undef HCM_REF
  return f;
}

}  // namespace detail

/// Applies `map` on top of the defaults; does not validate ranges.
inline RunConfig run_config_from_map(const ConfigMap& map, RunConfig base = {}) {
  const auto fields = detail::config_fields();
  for (const auto& [key, value] : map) {
    const auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second.set(base, key, value);
  }
  return base;
}

inline RunConfig parse_run_config(const std::string& text) {
  return run_config_from_map(parse_config_text(text));
}

inline std::string to_config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, field] : detail::config_fields()) out += key + "=" + field.get(cfg) + "\n";
  return out;
}

}  // namespace humancm
