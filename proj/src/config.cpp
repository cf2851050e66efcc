#include "v2pe/config.hpp"

#include <charconv>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "v2pe/errors.hpp"

namespace v2pe {
namespace {

using Keys = std::initializer_list<const char*>;

void check_keys(const YAML::Node& node, const std::string& where, Keys allowed) {
  if (!node.IsMap()) throw ConfigError(where + ": expected a mapping");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!ok.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

std::string join(const std::string& where, const char* key) {
  return where.empty() ? key : where + "." + key;
}

template <typename T>
void read(const YAML::Node& node, const std::string& where, const char* key, T& out) {
  const auto v = node[key];
  if (!v) return;
  try {
    out = v.as<T>();
  } catch (const YAML::Exception& e) {
    throw ConfigError(join(where, key) + ": " + e.msg);
  }
}

Dyadic read_dyadic(const YAML::Node& v, const std::string& where) {
  try {
    return Dyadic::parse(v.as<std::string>());
  } catch (const YAML::Exception& e) {
    throw ConfigError(where + ": " + e.msg);
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

std::vector<Dyadic> read_dyadics(const YAML::Node& v, const std::string& where) {
  if (!v.IsSequence()) throw ConfigError(where + ": expected a list");
  std::vector<Dyadic> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.push_back(read_dyadic(v[i], where + "[" + std::to_string(i) + "]"));
  }
  return out;
}

void read_range(const YAML::Node& node, const std::string& where, const char* key, SizeRange& r) {
  const auto v = node[key];
  if (!v) return;
  if (!v.IsSequence() || v.size() != 2) throw ConfigError(join(where, key) + ": expected [min, max]");
  try {
    r = {v[0].as<std::uint32_t>(), v[1].as<std::uint32_t>()};
  } catch (const YAML::Exception& e) {
    throw ConfigError(join(where, key) + ": " + e.msg);
  }
}

std::string shortest(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

double read_double(const YAML::Node& node, const std::string& where, const char* key, double dflt) {
  const auto v = node[key];
  if (!v) return dflt;
  const auto text = v.as<std::string>();
  double out = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw ConfigError(join(where, key) + ": '" + text + "' is not a number");
  }
  return out;
}

void parse_model(const YAML::Node& n, ModelConfig& m) {
  const std::string w = "model";
  check_keys(n, w, {"layers", "heads", "head_dim", "vocab_size", "mlp_hidden",
                    "max_trained_window", "norm_eps", "seed", "rope"});
  read(n, w, "layers", m.layers);
  read(n, w, "heads", m.heads);
  read(n, w, "head_dim", m.head_dim);
  read(n, w, "vocab_size", m.vocab_size);
  read(n, w, "mlp_hidden", m.mlp_hidden);
  read(n, w, "max_trained_window", m.max_trained_window);
  read(n, w, "seed", m.seed);
  m.norm_eps = read_double(n, w, "norm_eps", m.norm_eps);
  if (const auto r = n["rope"]) {
    check_keys(r, "model.rope", {"base", "scheme"});
    m.rope.base = read_double(r, "model.rope", "base", m.rope.base);
    if (r["scheme"]) m.rope.scheme = parse_scheme(r["scheme"].as<std::string>());
  }
  m.rope.head_dim = m.head_dim;
}

void parse_data(const YAML::Node& n, GenConfig& g) {
  const std::string w = "data";
  check_keys(n, w, {"n_negatives", "needle_kind", "text_segment", "image_size", "vocab"});
  read(n, w, "n_negatives", g.n_negatives);
  if (n["needle_kind"]) g.needle_kind = parse_needle_kind(n["needle_kind"].as<std::string>());
  read_range(n, w, "text_segment", g.text_segment);
  read_range(n, w, "image_size", g.image_size);
  if (const auto v = n["vocab"]) {
    check_keys(v, "data.vocab", {"keys", "answers", "text_filler", "visual_filler"});
    read(v, "data.vocab", "keys", g.vocab.n_keys);
    read(v, "data.vocab", "answers", g.vocab.n_answers);
    read(v, "data.vocab", "text_filler", g.vocab.n_text_filler);
    read(v, "data.vocab", "visual_filler", g.vocab.n_visual_filler);
  }
}

void parse_suite(const YAML::Node& n, SuiteConfig& s) {
  check_keys(n, "suite", {"name", "buckets", "per_bucket", "seed"});
  read(n, "suite", "name", s.name);
  read(n, "suite", "buckets", s.buckets);
  read(n, "suite", "per_bucket", s.per_bucket);
  read(n, "suite", "seed", s.seed);
}

DeltaPolicy parse_policy(const YAML::Node& n) {
  const std::string w = "train.delta_policy";
  check_keys(n, w, {"mode", "delta", "delta_set", "window", "seed", "target"});
  DeltaPolicy p;
  std::string mode = "uniform";
  read(n, w, "mode", mode);
  std::vector<Dyadic> set = default_delta_set();
  if (n["delta_set"]) set = read_dyadics(n["delta_set"], w + ".delta_set");
  if (mode == "uniform") {
    p.mode = UniformDeltas{};
  } else if (mode == "fixed") {
    if (!n["delta"]) throw ConfigError(w + ": fixed mode needs 'delta'");
    p.mode = FixedDelta{read_dyadic(n["delta"], w + ".delta")};
  } else if (mode == "variable") {
    VariableDeltas v{set, 0};
    read(n, w, "seed", v.seed);
    p.mode = v;
  } else if (mode == "adaptive") {
    AdaptiveDelta a{512, set};
    read(n, w, "window", a.context_window);
    p.mode = a;
  } else {
    throw ConfigError(w + ".mode: unknown mode '" + mode + "'");
  }
  if (n["target"]) p.target = parse_modality_target(n["target"].as<std::string>());
  p.validate();
  return p;
}

void parse_train(const YAML::Node& n, TrainSection& t) {
  const std::string w = "train";
  check_keys(n, w, {"name", "steps", "seed", "log_every", "optimizer", "delta_policy", "curriculum"});
  read(n, w, "name", t.name);
  read(n, w, "steps", t.run.steps);
  read(n, w, "seed", t.run.seed);
  read(n, w, "log_every", t.run.log_every);
  if (const auto o = n["optimizer"]) {
    const std::string ow = "train.optimizer";
    check_keys(o, ow, {"lr", "beta1", "beta2", "epsilon", "weight_decay", "warmup_steps",
                       "cosine_decay", "min_lr_ratio", "grad_clip"});
    auto& a = t.run.adam;
    a.learning_rate = read_double(o, ow, "lr", a.learning_rate);
    a.beta1 = read_double(o, ow, "beta1", a.beta1);
    a.beta2 = read_double(o, ow, "beta2", a.beta2);
    a.epsilon = read_double(o, ow, "epsilon", a.epsilon);
    a.weight_decay = read_double(o, ow, "weight_decay", a.weight_decay);
    read(o, ow, "warmup_steps", a.warmup_steps);
    read(o, ow, "cosine_decay", a.cosine_decay);
    a.min_lr_ratio = read_double(o, ow, "min_lr_ratio", a.min_lr_ratio);
    a.grad_clip = read_double(o, ow, "grad_clip", a.grad_clip);
  }
  if (n["delta_policy"]) t.policy = parse_policy(n["delta_policy"]);
  if (const auto c = n["curriculum"]) {
    const std::string cw = "train.curriculum";
    check_keys(c, cw, {"batch_size", "warmup_steps", "warmup_length", "ramp_steps", "max_length",
                       "seed"});
    auto& cc = t.curriculum;
    read(c, cw, "batch_size", cc.batch_size);
    read(c, cw, "warmup_steps", cc.warmup_steps);
    read(c, cw, "warmup_length", cc.warmup_length);
    read(c, cw, "ramp_steps", cc.ramp_steps);
    read(c, cw, "max_length", cc.max_length);
    read(c, cw, "seed", cc.seed);
  }
}

void parse_eval(const YAML::Node& n, EvalSection& e) {
  const std::string w = "eval";
  check_keys(n, w, {"index", "embed", "trained_window", "adaptive_window", "compression",
                    "attention"});
  read(n, w, "trained_window", e.trained_window);
  read(n, w, "adaptive_window", e.adaptive_window);
  if (const auto v = n["index"]) {
    if (!v.IsSequence()) throw ConfigError("eval.index: expected a list");
    e.index.clear();
    for (const auto& x : v) e.index.push_back(parse_index_scheme(x.as<std::string>(), e.adaptive_window));
  }
  if (const auto v = n["embed"]) {
    if (!v.IsSequence()) throw ConfigError("eval.embed: expected a list");
    e.embed.clear();
    for (const auto& x : v) e.embed.push_back(parse_scheme(x.as<std::string>()));
  }
  if (n["compression"]) e.compression = read_dyadics(n["compression"], "eval.compression");
  if (const auto a = n["attention"]) {
    check_keys(a, "eval.attention", {"layer", "tail_rows", "sample"});
    read(a, "eval.attention", "layer", e.attention.layer);
    read(a, "eval.attention", "tail_rows", e.attention.tail_rows);
    read(a, "eval.attention", "sample", e.attention.sample);
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  data.validate();
  if (data.vocab.vocab_size() != static_cast<std::uint32_t>(model.vocab_size)) {
    throw ConfigError("model.vocab_size (" + std::to_string(model.vocab_size) +
                      ") != data vocabulary size (" + std::to_string(data.vocab.vocab_size()) + ")");
  }
  if (suite.buckets.empty()) throw ConfigError("suite.buckets is empty");
  for (std::size_t i = 1; i < suite.buckets.size(); ++i) {
    if (suite.buckets[i] <= suite.buckets[i - 1]) {
      throw ConfigError("suite.buckets must be strictly increasing");
    }
  }
  train.policy.validate();
  if (train.curriculum.batch_size == 0) throw ConfigError("train.curriculum.batch_size is 0");
  if (train.curriculum.max_length < train.curriculum.warmup_length) {
    throw ConfigError("train.curriculum.max_length < warmup_length");
  }
  if (eval.index.empty() || eval.embed.empty()) throw ConfigError("eval grids must be non-empty");
  if (eval.trained_window == 0 || eval.adaptive_window == 0) {
    throw ConfigError("eval windows must be positive");
  }
  for (const auto& r : eval.compression) {
    if (r <= Dyadic(0) || r > Dyadic(1)) throw ConfigError("compression ratio outside (0, 1]");
  }
  if (eval.attention.layer < 1 || eval.attention.layer > model.layers) {
    throw ConfigError("eval.attention.layer must be in [1, " + std::to_string(model.layers) + "]");
  }
}

ExperimentConfig parse_config(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  ExperimentConfig cfg;
  if (!root || root.IsNull()) return cfg;
  check_keys(root, "config", {"out_dir", "model", "data", "suite", "train", "eval"});
  try {
    if (root["out_dir"]) cfg.out_dir = root["out_dir"].as<std::string>();
    if (root["model"]) parse_model(root["model"], cfg.model);
    if (root["data"]) parse_data(root["data"], cfg.data);
    if (root["suite"]) parse_suite(root["suite"], cfg.suite);
    if (root["train"]) parse_train(root["train"], cfg.train);
    if (root["eval"]) parse_eval(root["eval"], cfg.eval);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  cfg.train.curriculum.gen = cfg.data;
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

std::string emit_config(const ExperimentConfig& cfg) {
  YAML::Emitter out;
  auto seq = [&](const auto& values, auto fmt) {
    out << YAML::Flow << YAML::BeginSeq;
    for (const auto& v : values) out << fmt(v);
    out << YAML::EndSeq;
  };
  auto dyadic = [](const Dyadic& d) { return d.to_string(); };

  out << YAML::BeginMap;
  out << YAML::Key << "out_dir" << YAML::Value << cfg.out_dir.string();

  const auto& m = cfg.model;
  out << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "layers" << YAML::Value << m.layers;
  out << YAML::Key << "heads" << YAML::Value << m.heads;
  out << YAML::Key << "head_dim" << YAML::Value << m.head_dim;
  out << YAML::Key << "vocab_size" << YAML::Value << m.vocab_size;
  out << YAML::Key << "mlp_hidden" << YAML::Value << m.mlp_hidden;
  out << YAML::Key << "max_trained_window" << YAML::Value << m.max_trained_window;
  out << YAML::Key << "norm_eps" << YAML::Value << shortest(m.norm_eps);
  out << YAML::Key << "seed" << YAML::Value << m.seed;
  out << YAML::Key << "rope" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "base" << YAML::Value << shortest(m.rope.base);
  out << YAML::Key << "scheme" << YAML::Value << scheme_spec(m.rope.scheme);
  out << YAML::EndMap << YAML::EndMap;

  const auto& g = cfg.data;
  out << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "n_negatives" << YAML::Value << g.n_negatives;
  out << YAML::Key << "needle_kind" << YAML::Value << to_string(g.needle_kind);
  out << YAML::Key << "text_segment" << YAML::Value << YAML::Flow << YAML::BeginSeq
      << g.text_segment.min << g.text_segment.max << YAML::EndSeq;
  out << YAML::Key << "image_size" << YAML::Value << YAML::Flow << YAML::BeginSeq
      << g.image_size.min << g.image_size.max << YAML::EndSeq;
  out << YAML::Key << "vocab" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "keys" << YAML::Value << g.vocab.n_keys;
  out << YAML::Key << "answers" << YAML::Value << g.vocab.n_answers;
  out << YAML::Key << "text_filler" << YAML::Value << g.vocab.n_text_filler;
  out << YAML::Key << "visual_filler" << YAML::Value << g.vocab.n_visual_filler;
  out << YAML::EndMap << YAML::EndMap;

  const auto& s = cfg.suite;
  out << YAML::Key << "suite" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "name" << YAML::Value << s.name;
  out << YAML::Key << "buckets" << YAML::Value;
  seq(s.buckets, [](std::uint64_t b) { return b; });
  out << YAML::Key << "per_bucket" << YAML::Value << s.per_bucket;
  out << YAML::Key << "seed" << YAML::Value << s.seed;
  out << YAML::EndMap;

  const auto& t = cfg.train;
  const auto& a = t.run.adam;
  out << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "name" << YAML::Value << t.name;
  out << YAML::Key << "steps" << YAML::Value << t.run.steps;
  out << YAML::Key << "seed" << YAML::Value << t.run.seed;
  out << YAML::Key << "log_every" << YAML::Value << t.run.log_every;
  out << YAML::Key << "optimizer" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "lr" << YAML::Value << shortest(a.learning_rate);
  out << YAML::Key << "beta1" << YAML::Value << shortest(a.beta1);
  out << YAML::Key << "beta2" << YAML::Value << shortest(a.beta2);
  out << YAML::Key << "epsilon" << YAML::Value << shortest(a.epsilon);
  out << YAML::Key << "weight_decay" << YAML::Value << shortest(a.weight_decay);
  out << YAML::Key << "warmup_steps" << YAML::Value << a.warmup_steps;
  out << YAML::Key << "cosine_decay" << YAML::Value << a.cosine_decay;
  out << YAML::Key << "min_lr_ratio" << YAML::Value << shortest(a.min_lr_ratio);
  out << YAML::Key << "grad_clip" << YAML::Value << shortest(a.grad_clip);
  out << YAML::EndMap;

  out << YAML::Key << "delta_policy" << YAML::Value << YAML::BeginMap;
  std::visit(
      [&](const auto& mode) {
        using M = std::decay_t<decltype(mode)>;
        if constexpr (std::is_same_v<M, UniformDeltas>) {
          out << YAML::Key << "mode" << YAML::Value << "uniform";
        } else if constexpr (std::is_same_v<M, FixedDelta>) {
          out << YAML::Key << "mode" << YAML::Value << "fixed";
          out << YAML::Key << "delta" << YAML::Value << mode.delta.to_string();
        } else if constexpr (std::is_same_v<M, VariableDeltas>) {
          out << YAML::Key << "mode" << YAML::Value << "variable";
          out << YAML::Key << "delta_set" << YAML::Value;
          seq(mode.delta_set, dyadic);
          out << YAML::Key << "seed" << YAML::Value << mode.seed;
        } else {
          out << YAML::Key << "mode" << YAML::Value << "adaptive";
          out << YAML::Key << "delta_set" << YAML::Value;
          seq(mode.delta_set, dyadic);
          out << YAML::Key << "window" << YAML::Value << mode.context_window;
        }
      },
      t.policy.mode);
  out << YAML::Key << "target" << YAML::Value << to_string(t.policy.target);
  out << YAML::EndMap;

  const auto& c = t.curriculum;
  out << YAML::Key << "curriculum" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "batch_size" << YAML::Value << c.batch_size;
  out << YAML::Key << "warmup_steps" << YAML::Value << c.warmup_steps;
  out << YAML::Key << "warmup_length" << YAML::Value << c.warmup_length;
  out << YAML::Key << "ramp_steps" << YAML::Value << c.ramp_steps;
  out << YAML::Key << "max_length" << YAML::Value << c.max_length;
  out << YAML::Key << "seed" << YAML::Value << c.seed;
  out << YAML::EndMap << YAML::EndMap;

  const auto& e = cfg.eval;
  out << YAML::Key << "eval" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "index" << YAML::Value;
  seq(e.index, [](const IndexScheme& i) { return i.label(); });
  out << YAML::Key << "embed" << YAML::Value;
  seq(e.embed, [](const RopeScheme& r) { return scheme_spec(r); });
  out << YAML::Key << "trained_window" << YAML::Value << e.trained_window;
  out << YAML::Key << "adaptive_window" << YAML::Value << e.adaptive_window;
  out << YAML::Key << "compression" << YAML::Value;
  seq(e.compression, dyadic);
  out << YAML::Key << "attention" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "layer" << YAML::Value << e.attention.layer;
  out << YAML::Key << "tail_rows" << YAML::Value << e.attention.tail_rows;
  out << YAML::Key << "sample" << YAML::Value << e.attention.sample;
  out << YAML::EndMap << YAML::EndMap;

  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

std::vector<IndexScheme> parse_index_list(std::string_view text, std::uint64_t window) {
  std::vector<IndexScheme> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto item = text.substr(start, comma == std::string_view::npos ? text.npos : comma - start);
    if (item.empty()) throw ConfigError("empty entry in delta list '" + std::string(text) + "'");
    out.push_back(parse_index_scheme(item, window));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::vector<RopeScheme> parse_embed_list(std::string_view text) {
  std::vector<RopeScheme> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto item = text.substr(start, comma == std::string_view::npos ? text.npos : comma - start);
    if (item.empty()) throw ConfigError("empty entry in scheme list '" + std::string(text) + "'");
    out.push_back(parse_scheme(item));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace v2pe
