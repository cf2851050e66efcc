#include "v2pe/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "v2pe/config.hpp"
#include "v2pe/errors.hpp"
#include "v2pe/longmr.hpp"

namespace v2pe {

namespace fs = std::filesystem;

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
}

std::size_t workers_from_env() {
  const char* env = std::getenv("V2PE_WORKERS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const unsigned long v = std::strtoul(env, &end, 10);
  if (*end != '\0' || v == 0) throw ConfigError("V2PE_WORKERS must be a positive integer");
  return v;
}

namespace {

struct Common {
  std::string config;
  std::string out_dir;
};

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  return cfg;
}

fs::path output(const std::string& flag, const fs::path& dir, const std::string& file) {
  fs::path p = flag.empty() ? dir / file : fs::path(flag);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  return p;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("--") + what + " is required");
  if (!fs::exists(path)) throw FormatError(std::string(what) + " file not found: " + path);
}

int cmd_gen(const Common& common, const std::string& out) {
  const auto cfg = load(common);
  const auto suite = make_suite(cfg.suite.buckets, cfg.suite.per_bucket, cfg.data, cfg.suite.seed);
  const auto path = output(out, cfg.out_dir / "suites", cfg.suite.name + ".jsonl");
  write_suite(suite, path);
  std::cout << "wrote " << suite.size() << " samples to " << path.string() << '\n';
  return 0;
}

int cmd_train(const Common& common, const std::string& out, std::optional<std::size_t> steps,
              const std::string& init) {
  auto cfg = load(common);
  if (steps) cfg.train.run.steps = *steps;
  const auto path = output(out, cfg.out_dir / "ckpt", cfg.train.name + ".ckpt");
  CurriculumSource source(cfg.train.curriculum);
  const auto print = [](const TrainLogEntry& e) {
    std::cout << "step " << e.step << " loss " << e.loss << std::endl;
  };
  TrainResult result{Model(cfg.model), {}};
  if (init.empty()) {
    result = train(cfg.model, cfg.train.run, source, cfg.train.policy, print);
  } else {
    require_file(init, "init");
    result.model = load_checkpoint(init);
    result.log = train_in_place(result.model, cfg.train.run, source, cfg.train.policy, print);
    cfg.model = result.model.config();
  }
  save_checkpoint(result.model, path);

  fs::path log_path = path;
  log_path.replace_extension(".log.csv");
  std::ofstream log(log_path);
  log << "step,loss\n";
  for (const auto& e : result.log) log << e.step << ',' << e.loss << '\n';

  fs::path cfg_path = path;
  cfg_path.replace_extension(".yaml");
  std::ofstream(cfg_path) << emit_config(cfg);
  std::cout << "wrote " << path.string() << '\n';
  return 0;
}

std::vector<EvalRecord> compressed_records(const Model& model, const std::vector<NeedleSample>& suite,
                                           const std::vector<Dyadic>& ratios) {
  std::vector<EvalRecord> out;
  for (const auto& ratio : ratios) {
    std::vector<std::uint64_t> buckets;
    for (const auto& s : suite) {
      if (buckets.empty() || buckets.back() != s.length_bucket) buckets.push_back(s.length_bucket);
    }
    for (const auto bucket : buckets) {
      EvalRecord r{"pooled:" + ratio.to_string(), "uniform", bucket, 0, 0};
      for (const auto& s : suite) {
        if (s.length_bucket != bucket) continue;
        ++r.n;
        r.correct += score_sample_compressed(model, s, ratio) ? 1 : 0;
      }
      out.push_back(r);
    }
  }
  return out;
}

int cmd_sweep(const Common& common, const std::string& model_path, const std::string& suite_path,
              const std::string& deltas, const std::string& schemes, const std::string& compression,
              const std::string& out, const char* default_name, bool single) {
  const auto cfg = load(common);
  require_file(model_path, "model");
  require_file(suite_path, "suite");
  const Model model = load_checkpoint(model_path);
  const auto suite = read_suite(fs::path(suite_path));
  SweepGrid grid{cfg.eval.index, cfg.eval.embed, cfg.eval.trained_window};
  if (!deltas.empty()) grid.index = parse_index_list(deltas, cfg.eval.adaptive_window);
  if (!schemes.empty()) grid.embed = parse_embed_list(schemes);
  if (single) {
    grid.index.resize(1);
    grid.embed.resize(1);
  }
  auto records = sweep(model, suite, grid, workers_from_env());

  std::vector<Dyadic> ratios = cfg.eval.compression;
  if (!compression.empty()) {
    ratios.clear();
    std::size_t start = 0;
    while (true) {
      const auto comma = compression.find(',', start);
      ratios.push_back(Dyadic::parse(compression.substr(start, comma - start)));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }
  for (auto& r : compressed_records(model, suite, ratios)) records.push_back(std::move(r));

  const auto path = output(out, cfg.out_dir / "results",
                           fs::path(model_path).stem().string() + "_" + default_name + ".csv");
  write_records_csv(records, path);
  write_records_csv(records, std::cout);
  return 0;
}

int cmd_dump_attn(const Common& common, const std::string& model_path, const std::string& suite_path,
                  std::optional<int> layer, std::optional<std::size_t> sample,
                  std::optional<std::size_t> tail, const std::string& delta,
                  const std::string& scheme, const std::string& out) {
  const auto cfg = load(common);
  require_file(model_path, "model");
  require_file(suite_path, "suite");
  const Model model = load_checkpoint(model_path);
  const auto suite = read_suite(fs::path(suite_path));
  const std::size_t index = sample.value_or(cfg.eval.attention.sample);
  if (index >= suite.size()) {
    throw RangeError("sample " + std::to_string(index) + " outside suite of " +
                     std::to_string(suite.size()));
  }
  const int l = layer.value_or(cfg.eval.attention.layer);
  if (l < 1 || l > model.config().layers) {
    throw RangeError("layer " + std::to_string(l) + " outside [1, " +
                     std::to_string(model.config().layers) + "]");
  }
  const auto& s = suite[index];
  const IndexScheme idx = delta.empty() ? cfg.eval.index.front()
                                        : parse_index_scheme(delta, cfg.eval.adaptive_window);
  const RopeScheme embed = scheme.empty() ? cfg.eval.embed.front() : parse_scheme(scheme);
  const RopeConfig rope =
      rope_for_bucket(model.config().rope, embed, s.length_bucket, cfg.eval.trained_window);
  const auto positions = derive_positions(s.haystack, idx.policy());
  const std::size_t rows = std::min(tail.value_or(cfg.eval.attention.tail_rows), s.haystack.size());
  const auto attn = dump_attention(model, s.haystack, positions, l - 1, rows, &rope);
  const auto path = output(out, cfg.out_dir / "attn",
                           fs::path(model_path).stem().string() + "_s" + std::to_string(index) +
                               "_l" + std::to_string(l) + ".csv");
  write_attention_csv(attn, path);
  std::cout << "wrote " << attn.rows() << "x" << attn.cols() << " attention to " << path.string()
            << '\n';
  return 0;
}

int cmd_selftest(std::uint64_t seed) {
  bool ok = true;
  for (const auto& r : run_selftest(seed)) {
    std::cout << (r.ok ? "PASS " : "FAIL ") << r.name;
    if (!r.detail.empty()) std::cout << " (" << r.detail << ")";
    std::cout << '\n';
    ok = ok && r.ok;
  }
  return ok ? 0 : 1;
}

}  // namespace

int run_cli(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Variable-increment positional encoding experiments"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config, "Experiment config (YAML)");
  app.add_option("--out-dir", common.out_dir, "Override the output directory");

  std::string out, model, suite, deltas, schemes, compression, delta, scheme, init;
  std::optional<std::size_t> steps, sample, tail;
  std::optional<int> layer;
  std::uint64_t seed = 0;

  auto* gen = app.add_subcommand("gen", "Generate the evaluation suite");
  gen->add_option("--out", out, "Output JSONL file");

  auto* tr = app.add_subcommand("train", "Train a model with the configured delta policy");
  tr->add_option("--out", out, "Output checkpoint");
  tr->add_option("--steps", steps, "Override train.steps");
  tr->add_option("--init", init, "Continue from this checkpoint instead of a fresh model");

  auto add_eval_options = [&](CLI::App* cmd) {
    cmd->add_option("--model", model, "Checkpoint")->required();
    cmd->add_option("--suite", suite, "Suite JSONL")->required();
    cmd->add_option("--out", out, "Output CSV");
    cmd->add_option("--compression", compression, "Pooling ratios, e.g. 1,1/64");
  };
  auto* ev = app.add_subcommand("eval", "Score a suite with one index/embedding scheme");
  add_eval_options(ev);
  ev->add_option("--delta", delta, "uniform | adaptive | rational such as 1/16");
  ev->add_option("--scheme", scheme, "standard | linear[:f] | ntk[:a]");

  auto* sw = app.add_subcommand("sweep", "Score a suite over delta and scheme grids");
  add_eval_options(sw);
  sw->add_option("--deltas", deltas, "Comma separated index schemes");
  sw->add_option("--schemes", schemes, "Comma separated embedding schemes");

  auto* da = app.add_subcommand("dump-attn", "Write tail attention rows of one layer as CSV");
  da->add_option("--model", model, "Checkpoint")->required();
  da->add_option("--suite", suite, "Suite JSONL")->required();
  da->add_option("--sample", sample, "Sample index in the suite");
  da->add_option("--layer", layer, "Layer (1-based)");
  da->add_option("--tail", tail, "Number of trailing query rows");
  da->add_option("--delta", delta, "Index scheme");
  da->add_option("--scheme", scheme, "Embedding scheme");
  da->add_option("--out", out, "Output CSV");

  auto* st = app.add_subcommand("selftest", "Run the invariant checks");
  st->add_option("--seed", seed, "Seed for the randomized checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) return cmd_gen(common, out);
    if (*tr) return cmd_train(common, out, steps, init);
    if (*ev) {
      return cmd_sweep(common, model, suite, delta, scheme, compression, out, "eval", true);
    }
    if (*sw) return cmd_sweep(common, model, suite, deltas, schemes, compression, out, "sweep", false);
    if (*da) return cmd_dump_attn(common, model, suite, layer, sample, tail, delta, scheme, out);
    if (*st) return cmd_selftest(seed);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace v2pe
