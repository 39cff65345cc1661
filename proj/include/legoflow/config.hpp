// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment configuration: an INI file with sections [suite], [model],
// [simt], [schedules] and [finetune]. Unknown sections and keys are errors.
// to_ini() writes every field with its effective value in a fixed order; that
// text is what checkpoints embed and hash.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "legoflow/error.hpp"
#include "legoflow/lego.hpp"
#include "legoflow/rng.hpp"
#include "legoflow/simt.hpp"
#include "legoflow/tasks.hpp"

namespace legoflow {

enum class SuiteKind { conflict, shape };

inline const char* to_string(SuiteKind k) { return k == SuiteKind::conflict ? "conflict" : "shape"; }

struct FinetuneConfig {
  /// Pre-training task whose latent map the new task shares.
  std::string base_task = "g0t0";
  std::string task_name = "new";
  /// 0 keeps the base task's domain; otherwise a fresh domain shift is drawn.
  std::uint64_t shift_seed = 0;
  double shift = 1.0;
  std::size_t steps = 500;
  std::size_t warmup_steps = 25;
  double base_lr = 0.05;
  double decay_end_fraction = 0.5;
  RoutingMode routing = RoutingMode::soft;
};

struct ExperimentConfig {
  SuiteKind suite = SuiteKind::conflict;
  std::uint64_t suite_seed = 1;
  ConflictSuiteOptions conflict;
  ShapeSuiteOptions shape;
  BackboneConfig model{.stem_width = 64};
  SimtConfig simt = default_simt();
  FinetuneConfig finetune;

  static SimtConfig default_simt() {
    SimtConfig c;
    c.total_steps = 3000;
    c.warmup_steps = 150;
    return c;
  }

  std::vector<std::string> task_names() const {
    std::vector<std::string> names;
    if (suite == SuiteKind::shape) return {"cls16", "reg32", "seq64"};
    for (std::size_t g = 0; g < conflict.num_groups; ++g)
      for (std::size_t t = 0; t < conflict.tasks_per_group; ++t) names.push_back("g" + std::to_string(g) + "t" + std::to_string(t));
    return names;
  }

  std::vector<TaskSpec> make_suite() const {
    if (suite == SuiteKind::shape) {
      ShapeSuiteOptions o = shape;
      o.seed = suite_seed;
      return make_shape_suite(o);
    }
    ConflictSuiteOptions o = conflict;
    o.seed = suite_seed;
    return make_conflict_suite(o);
  }

  /// The new task used by the finetune command.
  TaskSpec make_finetune_task(const std::vector<TaskSpec>& suite_tasks) const {
    for (const auto& t : suite_tasks)
      if (t.name == finetune.base_task) return related_task(t, finetune.task_name, finetune.shift_seed, finetune.shift);
    throw ConfigError("[finetune] base_task: unknown task '" + finetune.base_task + "'");
  }

  SimtConfig finetune_simt() const {
    SimtConfig c = simt;
    c.num_workers = 1;
    c.task_sampling_weights.clear();
    c.per_task_batch_size.clear();
    c.sampling = SamplingMode::simt;
    c.total_steps = finetune.steps;
    c.warmup_steps = finetune.warmup_steps;
    c.base_lr = finetune.base_lr;
    c.decay_end_fraction = finetune.decay_end_fraction;
    c.routing = finetune.routing;
    return c;
  }

  void validate() const;
  std::string to_ini() const;
  std::uint64_t hash() const { return fnv1a(to_ini()); }

  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }
};

namespace detail {

struct ConfigField {
  const char* section;
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

[[noreturn]] inline void bad_value(const ConfigField& f, const std::string& text, const char* expected) {
  throw ConfigError(std::string("[") + f.section + "] " + f.key + ": expected " + expected + ", got '" + text + "'");
}

template <typename Int>
Int parse_int(const ConfigField& f, const std::string& s) {
  Int v{};
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || s.empty()) bad_value(f, s, "a non-negative integer");
  return v;
}

inline double parse_double(const ConfigField& f, const std::string& s) {
  double v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || s.empty() || !std::isfinite(v)) bad_value(f, s, "a number");
  return v;
}

inline bool parse_bool(const ConfigField& f, const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  bad_value(f, s, "true or false");
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    out.push_back(b == std::string::npos ? std::string() : item.substr(b, e - b + 1));
  }
  return out;
}

template <typename M>
ConfigField size_field(const char* sec, const char* key, M member) {
  ConfigField f{sec, key, {}, {}};
  f.get = [member](const ExperimentConfig& c) { return std::to_string(member(c)); };
  f.set = [member, sec, key](ExperimentConfig& c, const std::string& s) {
    member(c) = parse_int<std::remove_cvref_t<decltype(member(c))>>(ConfigField{sec, key, {}, {}}, s);
  };
  return f;
}

template <typename M>
ConfigField double_field(const char* sec, const char* key, M member) {
  ConfigField f{sec, key, {}, {}};
  f.get = [member](const ExperimentConfig& c) { return format_double(member(c)); };
  f.set = [member, sec, key](ExperimentConfig& c, const std::string& s) {
    member(c) = parse_double(ConfigField{sec, key, {}, {}}, s);
  };
  return f;
}

template <typename M>
ConfigField bool_field(const char* sec, const char* key, M member) {
  ConfigField f{sec, key, {}, {}};
  f.get = [member](const ExperimentConfig& c) -> std::string {
    return member(c) ? "true" : "false";
  };
  f.set = [member, sec, key](ExperimentConfig& c, const std::string& s) {
    member(c) = parse_bool(ConfigField{sec, key, {}, {}}, s);
  };
  return f;
}

template <typename M>
ConfigField string_field(const char* sec, const char* key, M member) {
  ConfigField f{sec, key, {}, {}};
  f.get = [member](const ExperimentConfig& c) { return member(c); };
  f.set = [member, sec, key](ExperimentConfig& c, const std::string& s) {
    if (s.empty()) bad_value(ConfigField{sec, key, {}, {}}, s, "a non-empty name");
    member(c) = s;
  };
  return f;
}

// Enum fields: text <-> value via the given converters; conversion failures
// are reported against the field.
template <typename M, typename ToS, typename FromS>
ConfigField enum_field(const char* sec, const char* key, M member, ToS to_s, FromS from_s) {
  ConfigField f{sec, key, {}, {}};
  f.get = [member, to_s](const ExperimentConfig& c) { return std::string(to_s(member(c))); };
  f.set = [member, from_s, sec, key](ExperimentConfig& c, const std::string& s) {
    try {
      member(c) = from_s(s);
    } catch (const Error& e) {
      throw ConfigError(std::string("[") + sec + "] " + key + ": " + e.what());
    }
  };
  return f;
}

inline const std::vector<ConfigField>& config_fields() {
  using C = ExperimentConfig;
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    f.push_back(enum_field(
        "suite", "kind", [](auto& c) -> auto& { return c.suite; }, [](SuiteKind k) { return to_string(k); },
        [](const std::string& s) {
          if (s == "conflict") return SuiteKind::conflict;
          if (s == "shape") return SuiteKind::shape;
          throw ValueError("unknown suite kind '" + s + "' (expected conflict or shape)");
        }));
    f.push_back(size_field("suite", "seed", [](auto& c) -> auto& { return c.suite_seed; }));
    f.push_back(size_field("suite", "groups", [](auto& c) -> auto& { return c.conflict.num_groups; }));
    f.push_back(size_field("suite", "tasks_per_group", [](auto& c) -> auto& { return c.conflict.tasks_per_group; }));
    f.push_back(size_field("suite", "input_dim", [](auto& c) -> auto& { return c.conflict.input_dim; }));
    f.push_back(size_field("suite", "outputs", [](auto& c) -> auto& { return c.conflict.outputs; }));
    f.push_back(size_field("suite", "train_size", [](auto& c) -> auto& { return c.conflict.train_size; }));
    f.push_back(size_field("suite", "val_size", [](auto& c) -> auto& { return c.conflict.val_size; }));
    f.push_back(double_field("suite", "noise", [](auto& c) -> auto& { return c.conflict.noise; }));
    f.push_back(double_field("suite", "shift", [](auto& c) -> auto& { return c.conflict.shift; }));
    f.push_back(size_field("suite", "batch_size", [](auto& c) -> auto& { return c.conflict.batch_size; }));
    f.push_back(bool_field("suite", "use_adapter", [](auto& c) -> auto& { return c.conflict.use_adapter; }));

    f.push_back(size_field("model", "dim", [](auto& c) -> auto& { return c.model.dim; }));
    f.push_back(size_field("model", "stem_width", [](auto& c) -> auto& { return c.model.stem_width; }));
    f.push_back(size_field("model", "layers", [](auto& c) -> auto& { return c.model.layers; }));
    f.push_back(size_field("model", "units", [](auto& c) -> auto& { return c.model.units; }));
    f.push_back(bool_field("model", "residual", [](auto& c) -> auto& { return c.model.residual; }));
    f.push_back(double_field("model", "bn_eps", [](auto& c) -> auto& { return c.model.bn_eps; }));
    f.push_back(double_field("model", "bn_momentum", [](auto& c) -> auto& { return c.model.bn_momentum; }));

    f.push_back(size_field("simt", "workers", [](auto& c) -> auto& { return c.simt.num_workers; }));
    f.push_back(enum_field(
        "simt", "mode", [](auto& c) -> auto& { return c.simt.sampling; }, [](SamplingMode m) { return to_string(m); },
        sampling_mode_from_string));
    f.push_back(bool_field("simt", "syncbn", [](auto& c) -> auto& { return c.simt.syncbn; }));
    f.push_back(enum_field(
        "simt", "bn_backward", [](auto& c) -> auto& { return c.simt.bn_backward; },
        [](BnBackward b) { return to_string(b); }, bn_backward_from_string));
    f.push_back(enum_field(
        "simt", "routing", [](auto& c) -> auto& { return c.simt.routing; }, [](RoutingMode m) { return to_string(m); },
        routing_mode_from_string));
    f.push_back(size_field("simt", "seed", [](auto& c) -> auto& { return c.simt.seed; }));
    {
      ConfigField w{"simt", "sampling_weights", {}, {}};
      w.get = [](const C& c) {
        std::string s;
        for (std::size_t i = 0; i < c.simt.task_sampling_weights.size(); ++i)
          s += (i ? "," : "") + format_double(c.simt.task_sampling_weights[i]);
        return s;
      };
      w.set = [](C& c, const std::string& s) {
        c.simt.task_sampling_weights.clear();
        for (const auto& item : split_list(s))
          c.simt.task_sampling_weights.push_back(parse_double(ConfigField{"simt", "sampling_weights", {}, {}}, item));
      };
      f.push_back(std::move(w));
    }
    {
      ConfigField b{"simt", "batch_sizes", {}, {}};
      b.get = [](const C& c) {
        std::string s;
        for (std::size_t i = 0; i < c.simt.per_task_batch_size.size(); ++i)
          s += (i ? "," : "") + std::to_string(c.simt.per_task_batch_size[i]);
        return s;
      };
      b.set = [](C& c, const std::string& s) {
        c.simt.per_task_batch_size.clear();
        for (const auto& item : split_list(s))
          c.simt.per_task_batch_size.push_back(parse_int<std::size_t>(ConfigField{"simt", "batch_sizes", {}, {}}, item));
      };
      f.push_back(std::move(b));
    }
    f.push_back(double_field("simt", "momentum", [](auto& c) -> auto& { return c.simt.momentum; }));
    f.push_back(double_field("simt", "weight_decay", [](auto& c) -> auto& { return c.simt.weight_decay; }));
    f.push_back(double_field("simt", "controller_lr_scale", [](auto& c) -> auto& { return c.simt.controller_lr_scale; }));

    f.push_back(size_field("schedules", "steps", [](auto& c) -> auto& { return c.simt.total_steps; }));
    f.push_back(size_field("schedules", "warmup_steps", [](auto& c) -> auto& { return c.simt.warmup_steps; }));
    f.push_back(double_field("schedules", "base_lr", [](auto& c) -> auto& { return c.simt.base_lr; }));
    f.push_back(double_field("schedules", "tau_start", [](auto& c) -> auto& { return c.simt.tau_start; }));
    f.push_back(double_field("schedules", "tau_end", [](auto& c) -> auto& { return c.simt.tau_end; }));
    f.push_back(double_field("schedules", "decay_end_fraction", [](auto& c) -> auto& { return c.simt.decay_end_fraction; }));

    f.push_back(string_field("finetune", "base_task", [](auto& c) -> auto& { return c.finetune.base_task; }));
    f.push_back(string_field("finetune", "task_name", [](auto& c) -> auto& { return c.finetune.task_name; }));
    f.push_back(size_field("finetune", "shift_seed", [](auto& c) -> auto& { return c.finetune.shift_seed; }));
    f.push_back(double_field("finetune", "shift", [](auto& c) -> auto& { return c.finetune.shift; }));
    f.push_back(size_field("finetune", "steps", [](auto& c) -> auto& { return c.finetune.steps; }));
    f.push_back(size_field("finetune", "warmup_steps", [](auto& c) -> auto& { return c.finetune.warmup_steps; }));
    f.push_back(double_field("finetune", "base_lr", [](auto& c) -> auto& { return c.finetune.base_lr; }));
    f.push_back(double_field("finetune", "decay_end_fraction", [](auto& c) -> auto& { return c.finetune.decay_end_fraction; }));
    f.push_back(enum_field(
        "finetune", "routing", [](auto& c) -> auto& { return c.finetune.routing; },
        [](RoutingMode m) { return to_string(m); }, routing_mode_from_string));
    return f;
  }();
  return fields;
}

}  // namespace detail

inline std::string ExperimentConfig::to_ini() const {
  std::string out;
  std::string section;
  for (const auto& f : detail::config_fields()) {
    if (section != f.section) {
      if (!section.empty()) out += '\n';
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += std::string(f.key) + " = " + f.get(*this) + "\n";
  }
  return out;
}

inline ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax error: ") + e.what());
  }
  ExperimentConfig c;
  const auto& fields = detail::config_fields();
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError("key '" + section + "' appears outside of a section");
    }
    bool known_section = false;
    for (const auto& f : fields) known_section = known_section || section == f.section;
    if (!known_section) throw ConfigError("unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      const detail::ConfigField* field = nullptr;
      for (const auto& f : fields)
        if (section == f.section && key == f.key) field = &f;
      if (!field) throw ConfigError("unknown key '" + key + "' in section [" + section + "]");
      field->set(c, value.data());
    }
  }
  c.validate();
  return c;
}

inline void ExperimentConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(model.dim >= 1, "[model] dim must be >= 1");
  require(model.layers >= 1, "[model] layers must be >= 1");
  require(model.units >= 1, "[model] units must be >= 1");
  require(model.bn_eps >= 0, "[model] bn_eps must be >= 0");
  require(model.bn_momentum > 0 && model.bn_momentum <= 1, "[model] bn_momentum must be in (0, 1]");
  if (suite == SuiteKind::conflict) {
    require(conflict.num_groups >= 2, "[suite] groups must be >= 2");
    require(conflict.tasks_per_group >= 1, "[suite] tasks_per_group must be >= 1");
    require(conflict.outputs >= 1, "[suite] outputs must be >= 1");
    require(conflict.num_groups * conflict.outputs <= conflict.input_dim,
            "[suite] groups * outputs must not exceed input_dim (orthogonal group maps)");
    require(conflict.train_size >= conflict.batch_size && conflict.batch_size >= 1,
            "[suite] batch_size must be in [1, train_size]");
    require(conflict.val_size >= 1, "[suite] val_size must be >= 1");
    require(conflict.noise >= 0 && conflict.shift >= 0, "[suite] noise and shift must be >= 0");
    require(conflict.use_adapter || conflict.input_dim == model.layer_in(0),
            "[suite] input_dim must equal the backbone width unless use_adapter = true");
  }
  const auto names = task_names();
  simt.validate(names.size());
  require(std::find(names.begin(), names.end(), finetune.base_task) != names.end(),
          "[finetune] base_task: unknown task '" + finetune.base_task + "'");
  require(std::find(names.begin(), names.end(), finetune.task_name) == names.end(),
          "[finetune] task_name '" + finetune.task_name + "' collides with a pre-training task");
  require(finetune.decay_end_fraction > 0 && finetune.decay_end_fraction <= 1,
          "[finetune] decay_end_fraction must be in (0, 1]");
  require(finetune.warmup_steps <= finetune.steps, "[finetune] warmup_steps exceeds steps");
}

}  // namespace legoflow
