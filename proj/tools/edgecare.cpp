/* Copyright 2026 The EdgeCare Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// edgecare: command-line front end for the home-monitoring pipeline.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "edgecare/checkpoint.hpp"
#include "edgecare/datagen.hpp"
#include "edgecare/edge_sim.hpp"
#include "edgecare/error.hpp"
#include "edgecare/hash.hpp"
#include "edgecare/pipeline.hpp"
#include "edgecare/stream_infer.hpp"
#include "edgecare/transfer.hpp"

namespace fs = std::filesystem;
using edgecare::json;

namespace {

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

LogLevel g_log_level = LogLevel::kError;

void log_at(LogLevel level, const std::string& msg) {
  if (level > g_log_level) return;
  static const char* names[] = {"error", "info", "debug"};
  std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << '\n';
}

void init_logging() {
  const char* env = std::getenv("EDGECARE_LOG");
  if (!env || !*env) return;
  const std::string v = env;
  if (v == "error") {
    g_log_level = LogLevel::kError;
  } else if (v == "info") {
    g_log_level = LogLevel::kInfo;
  } else if (v == "debug") {
    g_log_level = LogLevel::kDebug;
  } else {
    throw edgecare::ConfigError("EDGECARE_LOG must be one of error, info, debug (got '" + v + "')");
  }
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw edgecare::ConfigError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::parse_error& e) {
    throw edgecare::ConfigError("invalid JSON in " + p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  edgecare::detail::write_file_atomic(p, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// Records what produced an output directory. Contains no timestamps, so equal
// manifests imply equal artifacts.
class RunManifest {
 public:
  RunManifest(std::string subcommand, int argc, char** argv) : subcommand_(std::move(subcommand)) {
    for (int i = 1; i < argc; ++i) command_line_.push_back(argv[i]);
  }
  void config(const fs::path& path) { configs_[path.string()] = hex64(edgecare::fnv1a(read_text(path))); }
  void seed(const std::string& name, std::uint64_t v) { seeds_[name] = v; }
  void artifact(const std::string& name) { artifacts_.push_back(name); }

  void write(const fs::path& dir) const {
    json j{{"tool", "edgecare"},      {"version", EDGECARE_VERSION}, {"subcommand", subcommand_},
           {"command_line", command_line_}, {"config_hashes", configs_},  {"seeds", seeds_},
           {"artifacts", artifacts_}};
    write_text(dir / "manifest.json", j.dump(2) + "\n");
  }

 private:
  std::string subcommand_;
  std::vector<std::string> command_line_;
  std::map<std::string, std::string> configs_;
  std::map<std::string, std::uint64_t> seeds_;
  std::vector<std::string> artifacts_;
};

// A preset name, or a JSON freeze-policy file.
edgecare::FreezePolicy policy_from_arg(const std::string& arg, RunManifest& m) {
  if (arg.size() > 5 && arg.ends_with(".json")) {
    m.config(arg);
    return edgecare::freeze_policy_from_json(read_json(arg));
  }
  return edgecare::preset_policy(arg);
}

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

std::uint64_t require_seed(const Globals& g) {
  if (!g.seed) throw edgecare::ConfigError("--seed is required");
  return *g.seed;
}

fs::path prepare_out(const Globals& g) {
  fs::path out = g.out;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw edgecare::ConfigError("cannot create output directory " + out.string() + ": " + ec.message());
  return out;
}

// --- datagen ---------------------------------------------------------------

struct DatagenArgs {
  std::string preset = "target";
  std::size_t segments = 12;
  std::size_t min_len = 16;
  std::size_t max_len = 48;
  std::size_t channels = 0;
  std::string name = "stream.tlds";
};

int cmd_datagen(const Globals& g, const DatagenArgs& a, RunManifest& m) {
  const std::uint64_t seed = require_seed(g);
  edgecare::GeneratorSpec spec;
  if (!g.config.empty()) {
    spec = edgecare::generator_spec_from_json(read_json(g.config));
    m.config(g.config);
  } else if (a.preset == "source") {
    spec = edgecare::default_source_spec(0);
  } else if (a.preset == "target") {
    spec = edgecare::default_target_spec(0);
  } else {
    throw edgecare::ConfigError("--preset must be source or target");
  }
  if (a.channels) spec.channels = a.channels;
  spec.seed = edgecare::derive_seed(seed, 1);
  const auto segs = edgecare::random_segments(spec.classes.size(), a.segments, a.min_len, a.max_len,
                                              edgecare::derive_seed(seed, 2));
  const auto stream = edgecare::generate(spec, segs);
  const fs::path out = prepare_out(g);
  edgecare::save_stream(stream, out / a.name);
  write_text(out / "generator.json", edgecare::to_json(spec).dump(2) + "\n");
  m.seed("seed", seed);
  m.artifact(a.name);
  m.artifact("generator.json");
  m.write(out);
  log_at(LogLevel::kInfo, "wrote " + std::to_string(stream.length()) + " frames to " + (out / a.name).string());
  return 0;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::optional<std::size_t> epochs;
  std::string data;
  std::string name = "pretrained.tlec";
};

int cmd_train(const Globals& g, const TrainArgs& a, RunManifest& m) {
  const std::uint64_t seed = require_seed(g);
  edgecare::CloudTrainingConfig cfg;
  if (!g.config.empty()) {
    cfg = edgecare::cloud_training_config_from_json(read_json(g.config));
    m.config(g.config);
  }
  if (a.epochs) cfg.train.epochs = *a.epochs;
  const fs::path out = prepare_out(g);
  edgecare::CloudTrainingResult result;
  if (a.data.empty()) {
    result = edgecare::cloud_pretrain(cfg, seed);
  } else {
    const auto data = edgecare::load_stream(a.data);
    for (auto l : data.labels) {
      if (l >= cfg.source.classes.size()) throw edgecare::DataError("label " + std::to_string(l) + " has no class");
    }
    auto [train, holdout] = edgecare::split(data, cfg.train_fraction,
                                            edgecare::stage_seed(seed, edgecare::SeedSalt::kSourceSplit),
                                            cfg.split_window);
    const auto& s = cfg.source;
    auto init = edgecare::build_model(edgecare::reference_architecture({s.channels, s.frame_h, s.frame_w}, s.classes.size()),
                                      edgecare::stage_seed(seed, edgecare::SeedSalt::kInit));
    auto tc = cfg.train;
    tc.seed = edgecare::stage_seed(seed, edgecare::SeedSalt::kTrain);
    auto r = edgecare::fine_tune(init, edgecare::preset_policy("case1"), train, holdout, tc);
    result = {{edgecare::kCheckpointVersion, std::move(r.best), s.class_names(),
               {"stream-" + a.data, r.best_epoch, seed}},
              std::move(r.history),
              r.best_epoch};
    m.artifact(a.data);
  }
  for (const auto& h : result.history) {
    log_at(LogLevel::kInfo, "epoch " + std::to_string(h.epoch) + " loss " + std::to_string(h.mean_loss) +
                                " holdout_acc " + std::to_string(h.holdout_accuracy));
  }
  edgecare::save_checkpoint(result.checkpoint, out / a.name);
  write_text(out / "history.json", edgecare::to_json(result.history).dump(2) + "\n");
  m.seed("seed", seed);
  m.artifact(a.name);
  m.artifact("history.json");
  m.write(out);
  return 0;
}

// --- finetune --------------------------------------------------------------

struct FinetuneArgs {
  std::string checkpoint;
  std::string policy;
  std::optional<std::size_t> epochs;
  std::string name = "finetuned.tlec";
};

int cmd_finetune(const Globals& g, const FinetuneArgs& a, RunManifest& m) {
  const std::uint64_t seed = require_seed(g);
  edgecare::EdgeFineTuneConfig cfg;
  if (!g.config.empty()) {
    cfg = edgecare::edge_fine_tune_config_from_json(read_json(g.config));
    m.config(g.config);
  }
  if (!a.policy.empty()) cfg.policy = policy_from_arg(a.policy, m);
  if (a.epochs) cfg.tune.epochs = *a.epochs;
  const auto pretrained = edgecare::load_checkpoint(a.checkpoint);
  auto [train, holdout] = edgecare::edge_labeled_data(cfg, seed);
  auto result = edgecare::edge_fine_tune(pretrained, cfg, train, holdout, seed);
  const fs::path out = prepare_out(g);
  edgecare::save_checkpoint(result.checkpoint, out / a.name);
  write_text(out / "history.json", edgecare::to_json(result.tuning.history).dump(2) + "\n");
  const auto& b = result.budget;
  write_text(out / "budget.json", json{{"policy", edgecare::to_json(cfg.policy)},
                                       {"total", b.total},
                                       {"trainable", b.trainable},
                                       {"frozen", b.frozen},
                                       {"trainable_fraction", b.trainable_fraction}}
                                      .dump(2) + "\n");
  log_at(LogLevel::kInfo, "best epoch " + std::to_string(result.tuning.best_epoch) + ", trainable " +
                              std::to_string(b.trainable) + "/" + std::to_string(b.total));
  m.seed("seed", seed);
  m.artifact(a.checkpoint);
  for (const char* f : {"history.json", "budget.json"}) m.artifact(f);
  m.artifact(a.name);
  m.write(out);
  return 0;
}

// --- budget ----------------------------------------------------------------

struct BudgetArgs {
  std::string policy = "all";
  std::string checkpoint;
  std::size_t classes = 3;
  bool write = false;
};

int cmd_budget(const Globals& g, const BudgetArgs& a, RunManifest& m) {
  edgecare::Architecture arch = edgecare::reference_architecture({1, 16, 16}, a.classes);
  if (!g.config.empty()) {
    arch = edgecare::architecture_from_json(read_json(g.config));
    m.config(g.config);
  }
  if (!a.checkpoint.empty() && !g.config.empty()) throw edgecare::ConfigError("--checkpoint and --config are exclusive");
  const auto model = a.checkpoint.empty() ? edgecare::build_model(arch, g.seed.value_or(0))
                                          : edgecare::load_checkpoint(a.checkpoint).model;
  if (!a.checkpoint.empty()) m.artifact(a.checkpoint);
  std::vector<std::string> policies;
  if (a.policy == "all") {
    policies = {"case1", "case2", "case3"};
  } else {
    policies = {a.policy};
  }
  json rows = json::array();
  std::printf("%-6s %10s %10s %10s %9s | %16s %16s %9s\n", "policy", "total", "trainable", "frozen", "fraction",
              "reported_train", "reported_total", "fraction");
  for (const auto& name : policies) {
    const auto b = edgecare::apply_freeze(model, policy_from_arg(name, m));
    const std::string label = name.ends_with(".json") ? fs::path(name).stem().string() : name;
    json row{{"policy", label}, {"total", b.total}, {"trainable", b.trainable}, {"frozen", b.frozen},
             {"trainable_fraction", b.trainable_fraction}};
    std::printf("%-6s %10zu %10zu %10zu %9.4f", label.c_str(), b.total, b.trainable, b.frozen, b.trainable_fraction);
    for (const auto& r : edgecare::kReportedBudgets) {
      if (name != r.policy) continue;
      const auto ref = edgecare::ParameterBudget::from_counts(r.trainable, r.total);
      std::printf(" | %16zu %16zu %9.4f", r.trainable, r.total, ref.trainable_fraction);
      row["reported"] = {{"trainable", r.trainable}, {"total", r.total}, {"trainable_fraction", ref.trainable_fraction}};
    }
    std::printf("\n");
    rows.push_back(row);
  }
  if (a.write) {
    const fs::path out = prepare_out(g);
    write_text(out / "budget.json", rows.dump(2) + "\n");
    m.artifact("budget.json");
    m.write(out);
  }
  return 0;
}

// --- simulate --------------------------------------------------------------

struct SimulateArgs {
  std::string scenario;
  bool baseline = false;
};

void write_jsonl(const fs::path& p, const std::vector<std::string>& lines) {
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  write_text(p, text);
}

int cmd_simulate(const Globals& g, const SimulateArgs& a, RunManifest& m) {
  const std::uint64_t seed = require_seed(g);
  const std::string path = !a.scenario.empty() ? a.scenario : g.config;
  edgecare::Scenario scenario = edgecare::default_scenario();
  if (!path.empty()) {
    scenario = edgecare::scenario_from_json(read_json(path));
    m.config(path);
  }
  const auto mode = a.baseline ? edgecare::SimulationMode::kRawStreamingBaseline : edgecare::SimulationMode::kEdgeInference;
  if (a.baseline) log_at(LogLevel::kInfo, "baseline mode: raw frames leave the home (anti-pattern, for comparison only)");
  const auto result = edgecare::run_simulation(scenario, seed, mode);
  const fs::path out = prepare_out(g);
  write_jsonl(out / "events.jsonl", result.log);
  write_text(out / "ledger.json", edgecare::to_json(result.ledger).dump(2) + "\n");
  write_text(out / "report.json", result.report.dump(2) + "\n");
  m.seed("seed", seed);
  for (const char* f : {"events.jsonl", "ledger.json", "report.json"}) m.artifact(f);
  if (result.deployed) {
    edgecare::save_checkpoint(*result.deployed, out / "deployed.tlec");
    m.artifact("deployed.tlec");
  }
  m.write(out);
  log_at(LogLevel::kInfo, "boundary bytes " + std::to_string(result.ledger.boundary_bytes));
  return 0;
}

// --- evaluate --------------------------------------------------------------

struct EvaluateArgs {
  std::string checkpoint;
  std::string data;
  std::size_t window_len = 8;
  std::size_t stride = 4;
  std::string stream_id = "stream0";
};

int cmd_evaluate(const Globals& g, const EvaluateArgs& a, RunManifest& m) {
  edgecare::CategoryMap categories;
  if (!g.config.empty()) {
    const json j = read_json(g.config);
    if (j.contains("category_map")) categories = edgecare::category_map_from_json(j.at("category_map"));
    m.config(g.config);
  }
  const auto ck = edgecare::load_checkpoint(a.checkpoint);
  const auto data = edgecare::load_stream(a.data);
  const edgecare::WindowConfig wc{a.window_len, a.stride};
  wc.validate();
  const auto scores = edgecare::score_frames(edgecare::score_windows(ck.model, data.frames, wc), wc, data.length());
  const auto report = edgecare::evaluate(scores, data.labels, ck.label_space);
  const auto events = edgecare::segment_events(scores, ck.label_space, categories, a.stream_id, 0);
  std::vector<std::string> lines;
  for (const auto& e : events) lines.push_back(edgecare::to_json_line(e));
  const fs::path out = prepare_out(g);
  write_text(out / "report.json", edgecare::to_json(report).dump(2) + "\n");
  write_jsonl(out / "events.jsonl", lines);
  std::printf("mean_ap %.6f frame_accuracy %.6f\n", report.mean_ap, report.frame_accuracy);
  m.artifact(a.checkpoint);
  m.artifact(a.data);
  m.artifact("report.json");
  m.artifact("events.jsonl");
  m.write(out);
  return 0;
}

int fail(int code, const char* kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"exit_code", code}, {"message", message}}.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"edgecare: cloud pre-training, edge fine-tuning and in-home activity monitoring"};
  app.require_subcommand(1);
  app.set_version_flag("--version", EDGECARE_VERSION);

  Globals g;
  auto add_globals = [&](CLI::App* sub) {
    sub->add_option("--config", g.config, "JSON configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", g.seed, "Run seed (required wherever randomness is used)");
    sub->add_option("--out", g.out, "Output directory")->capture_default_str();
  };

  DatagenArgs dg;
  auto* datagen = app.add_subcommand("datagen", "Generate a labeled synthetic activity stream (TLDS file)");
  add_globals(datagen);
  datagen->add_option("--preset", dg.preset, "Built-in generator when --config is absent: source or target")
      ->capture_default_str();
  datagen->add_option("--segments", dg.segments, "Number of activity segments")->capture_default_str();
  datagen->add_option("--min-len", dg.min_len, "Minimum segment length in frames")->capture_default_str();
  datagen->add_option("--max-len", dg.max_len, "Maximum segment length in frames")->capture_default_str();
  datagen->add_option("--channels", dg.channels, "Override channel count (1 depth/thermal-like, 3 RGB-like)");
  datagen->add_option("--name", dg.name, "Output file name")->capture_default_str();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Pre-train the reference network on source data (cloud stage)");
  add_globals(train);
  train->add_option("--epochs", tr.epochs, "Override epoch count; 0 writes the initialization");
  train->add_option("--data", tr.data, "Train on this TLDS stream instead of generated source data")
      ->check(CLI::ExistingFile);
  train->add_option("--name", tr.name, "Output checkpoint name")->capture_default_str();

  FinetuneArgs ft;
  auto* finetune = app.add_subcommand("finetune", "Realign the head and fine-tune on home data (edge stage)");
  add_globals(finetune);
  finetune->add_option("--checkpoint", ft.checkpoint, "Pre-trained TLEC checkpoint")->required()->check(CLI::ExistingFile);
  finetune->add_option("--policy", ft.policy, "Freeze preset (case1, case2, case3) or freeze-policy JSON file; overrides the config");
  finetune->add_option("--epochs", ft.epochs, "Override epoch count");
  finetune->add_option("--name", ft.name, "Output checkpoint name")->capture_default_str();

  BudgetArgs bg;
  auto* budget = app.add_subcommand("budget", "Print trainable/frozen parameter counts per freeze preset");
  add_globals(budget);
  budget->add_option("--policy", bg.policy, "case1, case2, case3, all, or a freeze-policy JSON file")
      ->capture_default_str();
  budget->add_option("--checkpoint", bg.checkpoint, "Count parameters of this TLEC checkpoint instead")
      ->check(CLI::ExistingFile);
  budget->add_option("--classes", bg.classes, "Head width of the reference network")->capture_default_str();
  budget->add_flag("--write", bg.write, "Also write budget.json and a manifest to --out");

  SimulateArgs sm;
  auto* simulate = app.add_subcommand("simulate", "Run the sensor/edge/cloud/caregiver simulation");
  add_globals(simulate);
  simulate->add_option("--scenario", sm.scenario, "Scenario JSON (defaults to the built-in home)")
      ->check(CLI::ExistingFile);
  simulate->add_flag("--baseline", sm.baseline, "Raw-streaming baseline: ship frames to the cloud (anti-pattern)");

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "Score a labeled stream with a checkpoint (frame mAP and accuracy)");
  add_globals(evaluate);
  evaluate->add_option("--checkpoint", ev.checkpoint, "TLEC checkpoint")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--data", ev.data, "Labeled TLDS stream")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--window-len", ev.window_len, "Sliding window length")->capture_default_str();
  evaluate->add_option("--stride", ev.stride, "Sliding window stride")->capture_default_str();
  evaluate->add_option("--stream-id", ev.stream_id, "Stream id written into events")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(2, "config", e.what());
  }

  try {
    init_logging();
    auto* sub = app.get_subcommands().front();
    RunManifest manifest(sub->get_name(), argc, argv);
    log_at(LogLevel::kDebug, "subcommand " + sub->get_name());
    if (sub == datagen) return cmd_datagen(g, dg, manifest);
    if (sub == train) return cmd_train(g, tr, manifest);
    if (sub == finetune) return cmd_finetune(g, ft, manifest);
    if (sub == budget) return cmd_budget(g, bg, manifest);
    if (sub == simulate) return cmd_simulate(g, sm, manifest);
    if (sub == evaluate) return cmd_evaluate(g, ev, manifest);
    return fail(4, "invariant", "unhandled subcommand");
  } catch (const edgecare::ConfigError& e) {
    return fail(2, "config", e.what());
  } catch (const edgecare::DataError& e) {
    return fail(3, "data", e.what());
  } catch (const edgecare::InvariantError& e) {
    return fail(4, "invariant", e.what());
  } catch (const std::exception& e) {
    return fail(4, "invariant", e.what());
  }
}
