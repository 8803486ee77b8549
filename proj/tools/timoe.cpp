// timoe: ingest, train, eval, gen and analyze from the command line.
//
// Every subcommand reads an optional JSON run config (--config) whose keys are the
// long flag names with dashes turned into underscores. Flags override the file.
// The fully resolved config is written next to the outputs and can be fed back in.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "timoe/analysis.hpp"
#include "timoe/benchgen.hpp"
#include "timoe/checkpoint.hpp"
#include "timoe/corpus.hpp"
#include "timoe/eval.hpp"
#include "timoe/mixture.hpp"
#include "timoe/temporal.hpp"
#include "timoe/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace timoe;

namespace {

enum class Kind { string, integer, number, flag, list };

struct Key {
  std::string name;
  Kind kind;
  json fallback;  // null: no default
  std::string help;
};

/// Binds every key to a CLI11 option and resolves config file + flags into one document.
class Options {
 public:
  Options(CLI::App* app, std::vector<Key> keys) : app_(app), keys_(std::move(keys)) {
    app_->add_option("--config", config_path_, "JSON run config; flags override its values");
    for (const auto& k : keys_) {
      const std::string flag = "--" + dashed(k.name);
      auto& slot = raw_[k.name];
      if (k.kind == Kind::flag) {
        options_[k.name] = app_->add_flag(flag, flags_[k.name], k.help);
      } else if (k.kind == Kind::list) {
        options_[k.name] = app_->add_option(flag, lists_[k.name], k.help);
      } else {
        options_[k.name] = app_->add_option(flag, slot, k.help);
      }
    }
  }

  json resolve() const {
    json cfg = json::object();
    for (const auto& k : keys_) cfg[k.name] = k.fallback;
    if (!config_path_.empty()) {
      const auto file = json::parse(io::read_text(config_path_));
      require(file.is_object(), ErrorCode::ConfigError, "run config must be a JSON object");
      for (const auto& [key, value] : file.items()) {
        require(cfg.contains(key), ErrorCode::ConfigError, "unknown config key '" + key + "'");
        cfg[key] = value;
      }
    }
    for (const auto& k : keys_) {
      if (options_.at(k.name)->count() == 0) continue;
      switch (k.kind) {
        case Kind::flag: cfg[k.name] = flags_.at(k.name); break;
        case Kind::list: cfg[k.name] = lists_.at(k.name); break;
        case Kind::integer: cfg[k.name] = std::stoll(raw_.at(k.name)); break;
        case Kind::number: cfg[k.name] = std::stod(raw_.at(k.name)); break;
        case Kind::string: cfg[k.name] = raw_.at(k.name); break;
      }
    }
    return cfg;
  }

 private:
  static std::string dashed(std::string s) {
    for (auto& c : s) c = c == '_' ? '-' : c;
    return s;
  }

  CLI::App* app_;
  std::vector<Key> keys_;
  std::string config_path_;
  std::map<std::string, std::string> raw_;
  std::map<std::string, bool> flags_;
  std::map<std::string, std::vector<std::string>> lists_;
  std::map<std::string, CLI::Option*> options_;
};

// Typed access to a resolved config.
std::string str(const json& c, const std::string& k) {
  require(c.contains(k) && c[k].is_string() && !c[k].get<std::string>().empty(), ErrorCode::ConfigError,
          "missing required setting '" + k + "'");
  return c[k].get<std::string>();
}
std::optional<std::string> opt_str(const json& c, const std::string& k) {
  if (!c.contains(k) || c[k].is_null() || c[k].get<std::string>().empty()) return std::nullopt;
  return c[k].get<std::string>();
}
template <typename T>
T num(const json& c, const std::string& k) {
  require(c.contains(k) && c[k].is_number(), ErrorCode::ConfigError, "missing numeric setting '" + k + "'");
  return c[k].get<T>();
}
std::vector<std::string> list(const json& c, const std::string& k) {
  if (!c.contains(k) || c[k].is_null()) return {};
  return c[k].get<std::vector<std::string>>();
}

void snapshot(const fs::path& out_dir, const std::string& command, const json& cfg) {
  json doc = cfg;
  io::write_text(out_dir / "resolved_config.json", doc.dump(2) + "\n");
  std::fprintf(stderr, "[%s] resolved config written to %s\n", command.c_str(),
               (out_dir / "resolved_config.json").string().c_str());
}

Tokenizer load_tokenizer(const json& c) {
  if (auto vocab = opt_str(c, "vocab")) return Tokenizer::from_vocab_json(io::read_text(*vocab), c.value("strict_vocab", false));
  return Tokenizer::byte_level();
}

TimeWindow parse_window(const std::string& label) {
  const auto dash = label.find('-');
  require(dash != std::string::npos, ErrorCode::ConfigError, "window must look like 2013-2014");
  try {
    return make_window(std::stoi(label.substr(0, dash)), std::stoi(label.substr(dash + 1)));
  } catch (const std::invalid_argument&) {
    fail(ErrorCode::ConfigError, "window must look like 2013-2014");
  }
}

std::vector<TimeWindow> windows_from(const json& c) {
  return make_registry_windows(num<int>(c, "first_year"), num<int>(c, "last_year"), num<int>(c, "span"));
}

/// A registry from --registry (manifest) or --experts (checkpoints; a manifest is written to out_dir).
ExpertRegistry<float> registry_from(const json& c, const fs::path& out_dir) {
  if (auto manifest = opt_str(c, "registry")) return load_registry<float>(*manifest);
  const auto experts = list(c, "experts");
  require(!experts.empty(), ErrorCode::ConfigError, "give --registry or --experts");
  fs::create_directories(out_dir);
  std::vector<std::string> rel;
  for (const auto& e : experts) rel.push_back(fs::relative(fs::absolute(e), fs::absolute(out_dir)).generic_string());
  write_registry_manifest(out_dir / "registry.json", manifest_for_checkpoints(out_dir, rel));
  return load_registry<float>(out_dir / "registry.json");
}

std::vector<Shard> read_shards(const json& c) {
  std::vector<Shard> shards;
  for (const auto& p : list(c, "shards")) shards.push_back(read_shard(p));
  require(!shards.empty(), ErrorCode::ConfigError, "no --shards given");
  return shards;
}

void write_log(const fs::path& path, const std::vector<StepLog>& log) {
  std::string out;
  for (const auto& s : log) out += s.to_json().dump() + "\n";
  io::write_text(path, out);
}

// ---------------------------------------------------------------------------

const std::vector<Key> kIngestKeys{
    {"input", Kind::string, nullptr, "newline-delimited documents {id, text, timestamp}"},
    {"out_dir", Kind::string, nullptr, "output directory"},
    {"vocab", Kind::string, "", "external vocabulary (JSON array); byte-level if empty"},
    {"strict_vocab", Kind::flag, false, "reject text the vocabulary cannot encode"},
    {"length", Kind::integer, 257, "tokens per packed row"},
    {"first_year", Kind::integer, 2013, "first year of the first window"},
    {"last_year", Kind::integer, 2024, "last year of the last window"},
    {"span", Kind::integer, 2, "years per window"},
    {"threads", Kind::integer, 1, "tokenizer workers"},
};

int cmd_ingest(const json& c) {
  const fs::path out = str(c, "out_dir");
  const auto tokenizer = load_tokenizer(c);
  const auto windows = windows_from(c);
  const auto lines = io::split_lines(io::read_text(str(c, "input")));
  const auto result = ingest(lines, windows, tokenizer, num<std::size_t>(c, "length"), num<std::size_t>(c, "threads"));
  const ShardHeader header{static_cast<std::uint32_t>(num<std::size_t>(c, "length")),
                           static_cast<std::uint32_t>(tokenizer.vocab_size()), tokenizer.hash()};
  json stats = json::array();
  std::printf("%-12s %10s %14s %10s\n", "bin", "documents", "tokens", "rows");
  for (std::size_t i = 0; i < windows.size(); ++i) {
    write_shard(out / "bins" / (windows[i].label + ".shard"), header, result.bins[i]);
    const auto& s = result.stats[i];
    stats.push_back({{"window", s.window.label},
                     {"documents", s.documents},
                     {"stream_tokens", s.stream_tokens},
                     {"rows", s.rows}});
    std::printf("%-12s %10zu %14zu %10zu\n", s.window.label.c_str(), s.documents, s.stream_tokens, s.rows);
  }
  io::write_text(out / "stats.json", stats.dump(2) + "\n");
  std::string rejects;
  for (const auto& r : result.rejects) rejects += json{{"line", r.line}, {"reason", r.reason}}.dump() + "\n";
  io::write_text(out / "rejects.jsonl", rejects);
  if (!result.rejects.empty()) std::printf("%zu rejected records (see rejects.jsonl)\n", result.rejects.size());
  snapshot(out, "ingest", c);
  return 0;
}

// ---------------------------------------------------------------------------

const std::vector<Key> kTrainKeys{
    {"mode", Kind::string, "stage1", "stage1 | learned_avg | coadapt"},
    {"out_dir", Kind::string, nullptr, "output directory"},
    {"seed", Kind::integer, nullptr, "run seed (required)"},
    {"shards", Kind::list, nullptr, "training shards"},
    {"window", Kind::string, "", "stage1: the bin's window, e.g. 2013-2014"},
    {"registry", Kind::string, "", "stage2: registry manifest"},
    {"experts", Kind::list, nullptr, "stage2: expert checkpoints (instead of --registry)"},
    {"n_layers", Kind::integer, 4, "transformer blocks"},
    {"n_heads", Kind::integer, 4, "attention heads"},
    {"d_model", Kind::integer, 128, "model width"},
    {"context_length", Kind::integer, 256, "positions"},
    {"dropout", Kind::number, 0.0, "dropout probability"},
    {"untied", Kind::flag, false, "separate output head instead of tied embeddings"},
    {"batch_size", Kind::integer, 8, "rows per step"},
    {"token_budget", Kind::integer, nullptr, "tokens to train on (default depends on mode)"},
    {"lr_kind", Kind::string, nullptr, "wsd | constant (stage1 default wsd, stage2 constant)"},
    {"max_lr", Kind::number, nullptr, "peak learning rate"},
    {"warmup_fraction", Kind::number, 0.02, "wsd warmup share"},
    {"decay_fraction", Kind::number, 0.2, "wsd decay share"},
    {"final_lr_ratio", Kind::number, 0.1, "wsd final lr / max lr"},
    {"beta1", Kind::number, 0.9, "adam beta1"},
    {"beta2", Kind::number, 0.95, "adam beta2"},
    {"weight_decay", Kind::number, 0.1, "decoupled weight decay on matrices"},
    {"grad_clip", Kind::number, 1.0, "global gradient norm clip (0 disables)"},
    {"checkpoint_every", Kind::integer, 0, "stage1: intermediate checkpoint cadence in steps"},
    {"router_hidden", Kind::integer, 0, "stage2: router hidden width (0 = affine)"},
    {"router_input", Kind::string, "latest_eligible", "stage2: latest_eligible | mean_eligible"},
    {"threads", Kind::integer, 1, "training always runs single-threaded (reference mode)"},
};

LrPolicy lr_policy(const json& c, LrKind default_kind, double default_lr) {
  LrPolicy p;
  p.kind = default_kind;
  if (auto k = opt_str(c, "lr_kind")) p = LrPolicy::from_json({{"kind", *k}}, p);
  p.max_lr = c["max_lr"].is_null() ? default_lr : num<double>(c, "max_lr");
  p.warmup_fraction = num<double>(c, "warmup_fraction");
  p.decay_fraction = num<double>(c, "decay_fraction");
  p.final_lr_ratio = num<double>(c, "final_lr_ratio");
  if (p.kind == LrKind::constant) p.final_lr_ratio = 1.0;
  return p;
}

AdamWOptions adam_options(const json& c) {
  AdamWOptions a;
  a.beta1 = num<double>(c, "beta1");
  a.beta2 = num<double>(c, "beta2");
  a.weight_decay = num<double>(c, "weight_decay");
  a.grad_clip = num<double>(c, "grad_clip");
  return a;
}

int cmd_train(json c) {
  require(c["seed"].is_number_integer(), ErrorCode::ConfigError, "--seed is required for training");
  const fs::path out = str(c, "out_dir");
  const auto mode = str(c, "mode");
  const auto seed = num<std::uint64_t>(c, "seed");
  const auto shards = read_shards(c);
  auto print_step = [](const StepLog& s) {
    if (s.step % 50 == 0) std::fprintf(stderr, "step %zu lr %.3g loss %.4f tokens %zu\n", s.step, s.lr, s.loss, s.tokens_seen);
  };

  if (mode == "stage1") {
    ExpertConfig cfg;
    cfg.n_layers = num<std::size_t>(c, "n_layers");
    cfg.n_heads = num<std::size_t>(c, "n_heads");
    cfg.d_model = num<std::size_t>(c, "d_model");
    cfg.context_length = num<std::size_t>(c, "context_length");
    cfg.dropout = num<double>(c, "dropout");
    cfg.tie_weights = !c["untied"].get<bool>();
    cfg.vocab_size = shards.front().header.vocab_size;
    TrainOptions o;
    o.batch_size = num<std::size_t>(c, "batch_size");
    if (c["token_budget"].is_null()) c["token_budget"] = 1'000'000;
    o.token_budget = num<std::size_t>(c, "token_budget");
    o.lr = lr_policy(c, LrKind::wsd, 1e-4);
    o.adam = adam_options(c);
    o.seed = seed;
    o.checkpoint_every = num<std::size_t>(c, "checkpoint_every");
    o.checkpoint_dir = out / "checkpoints";
    o.on_step = print_step;
    const auto window = parse_window(str(c, "window"));
    auto run = train_expert<float>(cfg, window, shards, shards.front().header.tokenizer_hash, o);
    save_model(run.model, out / (window.label + ".ckpt"));
    write_log(out / "train_log.jsonl", run.log);
    std::printf("trained %s: %zu steps, final loss %.4f -> %s\n", window.label.c_str(), run.log.size(),
                run.log.back().loss, (out / (window.label + ".ckpt")).string().c_str());
  } else {
    const auto kind = strategy_from_string(mode);
    require(uses_router(kind), ErrorCode::ConfigError, "mode must be stage1, learned_avg or coadapt");
    const auto registry = registry_from(c, out);
    RouterConfig rc{registry.d_model(), registry.size(), num<std::size_t>(c, "router_hidden"),
                    RouterConfig::from_json({{"input", str(c, "router_input")}}).input};
    Strategy<float> strategy{kind, make_router<float>(rc, seed)};
    Stage2Options o;
    o.batch_size = num<std::size_t>(c, "batch_size");
    const bool coadapt = kind == StrategyKind::coadapt;
    if (c["token_budget"].is_null()) c["token_budget"] = coadapt ? 1'000'000 : 200'000;
    o.token_budget = num<std::size_t>(c, "token_budget");
    o.lr = lr_policy(c, LrKind::constant, coadapt ? 1e-4 : 1e-5);
    o.adam = adam_options(c);
    o.seed = seed;
    o.on_step = print_step;
    auto run = train_stage2(registry, strategy, shards, o);
    save_router(run.router, kind, run.registry.identity(), out / "router.ckpt");
    if (coadapt) {
      std::vector<std::string> names;
      for (std::size_t k = 0; k < run.registry.size(); ++k) {
        names.push_back("experts/" + run.registry.windows()[k].label + ".ckpt");
        save_model(run.registry.expert(k), out / names.back());
      }
      write_registry_manifest(out / "registry.json", manifest_for_checkpoints(out, names));
    }
    write_log(out / "train_log.jsonl", run.log);
    std::printf("trained %s router: %zu steps, final loss %.4f\n", mode.c_str(), run.log.size(), run.log.back().loss);
  }
  snapshot(out, "train", c);
  return 0;
}

// ---------------------------------------------------------------------------

const std::vector<Key> kEvalKeys{
    {"benchmark", Kind::string, nullptr, "benchmark file (one item per line)"},
    {"out_dir", Kind::string, nullptr, "output directory"},
    {"registry", Kind::string, "", "registry manifest"},
    {"experts", Kind::list, nullptr, "expert checkpoints (instead of --registry)"},
    {"strategy", Kind::string, "avg", "year | avg | learned_avg | coadapt"},
    {"router", Kind::string, "", "router checkpoint for learned_avg / coadapt"},
    {"rule", Kind::string, "containing", "eligibility: containing | strict"},
    {"scoring", Kind::string, "final_token", "final_token | sum"},
    {"single_experts", Kind::flag, false, "also report every expert alone plus mean and best"},
    {"vocab", Kind::string, "", "external vocabulary; byte-level if empty"},
    {"strict_vocab", Kind::flag, false, "reject text the vocabulary cannot encode"},
    {"threads", Kind::integer, 1, "item workers"},
};

int cmd_eval(const json& c) {
  const fs::path out = str(c, "out_dir");
  const auto registry = registry_from(c, out);
  const auto tokenizer = load_tokenizer(c);
  require(tokenizer.hash() == registry.tokenizer_hash(), ErrorCode::TokenizerMismatch,
          "tokenizer differs from the registry's");
  const auto bench = read_benchmark(str(c, "benchmark"));
  std::string rejects;
  for (const auto& r : bench.rejects) rejects += json{{"line", r.line}, {"reason", r.reason}}.dump() + "\n";
  io::write_text(out / "rejects.jsonl", rejects);
  for (const auto& r : bench.rejects) std::fprintf(stderr, "rejected line %zu: %s\n", r.line, r.reason.c_str());

  const auto kind = strategy_from_string(str(c, "strategy"));
  Strategy<float> strategy{kind, std::nullopt};
  const auto rule = str(c, "rule");
  require(rule == "containing" || rule == "strict", ErrorCode::ConfigError, "rule must be containing or strict");
  strategy.rule = rule == "strict" ? EligibilityRule::strict : EligibilityRule::containing;
  if (uses_router(kind)) {
    auto loaded = load_router<float>(str(c, "router"));
    require(loaded.kind == kind, ErrorCode::ConfigError,
            "router was trained for " + to_string(loaded.kind) + ", not " + to_string(kind));
    require(loaded.registry_identity == registry.identity(), ErrorCode::ConfigError,
            "router was trained against a different registry");
    strategy.router = std::move(loaded.router);
  }
  const auto mode = scoring_from_string(str(c, "scoring"));
  const auto threads = num<std::size_t>(c, "threads");
  MixturePredictor<float> predictor(registry, strategy);
  const auto report = evaluate(predictor, tokenizer, bench.items, mode, threads);
  io::write_text(out / "report.json", report.to_json().dump(2) + "\n");
  std::printf("%s", format_summary(predictor.name(), report).c_str());

  if (c["single_experts"].get<bool>()) {
    const auto singles = report_single_experts(registry, tokenizer, bench.items, mode, threads);
    json doc{{"mean", singles.mean.to_json()}, {"best", singles.best}, {"per_expert", json::array()}};
    for (std::size_t k = 0; k < singles.per_expert.size(); ++k) {
      doc["per_expert"].push_back({{"window", registry.windows()[k].label}, {"report", singles.per_expert[k].to_json()}});
      std::printf("%s", format_summary("expert:" + registry.windows()[k].label, singles.per_expert[k]).c_str());
    }
    io::write_text(out / "single_experts.json", doc.dump(2) + "\n");
    std::printf("%s", format_summary("year (mean)", singles.mean).c_str());
    std::printf("%s", format_summary("year expert (max)", singles.max()).c_str());
  }
  snapshot(out, "eval", c);
  return 0;
}

// ---------------------------------------------------------------------------

const std::vector<Key> kGenKeys{
    {"timelines", Kind::string, nullptr, "timeline records, one per line"},
    {"out_dir", Kind::string, nullptr, "output directory"},
    {"endpoint", Kind::string, "http://127.0.0.1:8000/v1/chat/completions", "chat-completion URL"},
    {"auth_env", Kind::string, "TIMOE_API_KEY", "environment variable holding the bearer token"},
    {"model", Kind::string, "deepseek-chat", "model name sent to the endpoint"},
    {"temperature", Kind::number, 0.0, "sampling temperature"},
    {"max_tokens", Kind::integer, 512, "completion limit"},
    {"concurrency", Kind::integer, 4, "requests in flight"},
    {"cache", Kind::string, "", "response cache file (replayed before calling the endpoint)"},
    {"timeout", Kind::integer, 120, "per-request timeout in seconds"},
};

int cmd_gen(const json& c) {
  const fs::path out = str(c, "out_dir");
  const auto auth_env = str(c, "auth_env");
  const char* token = std::getenv(auth_env.c_str());
  require(token != nullptr && *token != '\0', ErrorCode::ConfigError,
          "environment variable " + auth_env + " with the endpoint token is not set");
  const auto timelines = read_timelines(str(c, "timelines"));
  HttpChatClient client({str(c, "endpoint"), auth_env, num<int>(c, "timeout")});
  GenerateOptions o;
  o.model = str(c, "model");
  o.temperature = num<double>(c, "temperature");
  o.max_tokens = num<int>(c, "max_tokens");
  o.concurrency = num<std::size_t>(c, "concurrency");
  std::unique_ptr<ResponseCache> cache;
  if (auto path = opt_str(c, "cache")) cache = std::make_unique<ResponseCache>(*path);
  const auto result = generate(timelines, client, o, cache.get());
  const auto items = result.items();
  write_benchmark(out / "benchmark.jsonl", items);
  io::write_text(out / "rejects.jsonl", result.rejects_ndjson());
  std::printf("%zu items written, %zu rejected\n", items.size(), result.rejects().size());
  snapshot(out, "gen", c);
  return 0;
}

// ---------------------------------------------------------------------------

const std::vector<Key> kAnalyzeKeys{
    {"out_dir", Kind::string, nullptr, "output directory"},
    {"registry", Kind::string, "", "registry manifest"},
    {"experts", Kind::list, nullptr, "expert checkpoints (instead of --registry)"},
    {"anchor", Kind::string, nullptr, "anchor word or phrase"},
    {"targets", Kind::list, nullptr, "words or phrases compared with the anchor"},
    {"vocab", Kind::string, "", "external vocabulary; byte-level if empty"},
    {"strict_vocab", Kind::flag, false, "reject text the vocabulary cannot encode"},
};

int cmd_analyze(const json& c) {
  const fs::path out = str(c, "out_dir");
  const auto registry = registry_from(c, out);
  const auto tokenizer = load_tokenizer(c);
  require(tokenizer.hash() == registry.tokenizer_hash(), ErrorCode::TokenizerMismatch,
          "tokenizer differs from the registry's");
  const auto targets = list(c, "targets");
  require(!targets.empty(), ErrorCode::ConfigError, "no --targets given");
  const auto series = distance_series(registry, tokenizer, str(c, "anchor"), targets);
  const auto csv = series_csv(series);
  io::write_text(out / "distances.csv", csv);
  std::printf("%-12s %-16s %-16s %10s %10s\n", "window", "anchor", "target", "cosine", "distance");
  for (const auto& s : series) {
    for (const auto& p : s.points) {
      std::printf("%-12s %-16s %-16s %10.4f %10.4f\n", p.window.label.c_str(), s.anchor.c_str(), s.target.c_str(),
                  p.similarity, 1.0 - p.similarity);
    }
  }
  snapshot(out, "analyze", c);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Time-sliced language-model experts with causally masked mixtures"};
  app.require_subcommand(1);
  auto* ingest_cmd = app.add_subcommand("ingest", "bin and pack timestamped documents into shards");
  auto* train_cmd = app.add_subcommand("train", "train one expert (stage1) or a router (learned_avg / coadapt)");
  auto* eval_cmd = app.add_subcommand("eval", "multiple-choice evaluation of a mixture strategy");
  auto* gen_cmd = app.add_subcommand("gen", "generate multiple-choice items from answer timelines");
  auto* analyze_cmd = app.add_subcommand("analyze", "cosine similarity of word pairs across experts");
  Options ingest_opts(ingest_cmd, kIngestKeys), train_opts(train_cmd, kTrainKeys), eval_opts(eval_cmd, kEvalKeys),
      gen_opts(gen_cmd, kGenKeys), analyze_opts(analyze_cmd, kAnalyzeKeys);

  CLI11_PARSE(app, argc, argv);
  try {
    if (ingest_cmd->parsed()) return cmd_ingest(ingest_opts.resolve());
    if (train_cmd->parsed()) return cmd_train(train_opts.resolve());
    if (eval_cmd->parsed()) return cmd_eval(eval_opts.resolve());
    if (gen_cmd->parsed()) return cmd_gen(gen_opts.resolve());
    if (analyze_cmd->parsed()) return cmd_analyze(analyze_opts.resolve());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
