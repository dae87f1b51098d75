#include "ampl/trainer.hpp"
#include "ampl/verify.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ampl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

/// Thrown for problems the user can fix by changing flags or inputs.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string g_command_line;

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json manifest(const std::string& subcommand, const json& extra) {
  json m = {{"subcommand", subcommand}, {"build_hash", AMPL_BUILD_HASH}, {"command_line", g_command_line}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  return m;
}

OfflineDataset load_dataset(const std::string& path) {
  if (path.empty()) throw UsageError("--dataset is required");
  if (!fs::exists(path)) throw UsageError("dataset not found: " + path);
  return OfflineDataset::load(path);
}

RunConfig build_config(const std::string& config_path, bool desk, const std::string& variant,
                       std::optional<int> epochs) {
  RunConfig c = desk ? RunConfig::desk() : RunConfig::paper_scale();
  std::vector<std::string> errors;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw UsageError("cannot read config " + config_path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw UsageError("config " + config_path + " is not valid JSON: " + e.what());
    }
    c = RunConfig::from_json(j, c, errors);
  }
  if (!variant.empty()) {
    try {
      c.variant = parse_variant(variant);
    } catch (const std::invalid_argument& e) {
      errors.push_back(std::string("variant: ") + e.what());
    }
  }
  if (epochs) c.epochs = *epochs;
  if (errors.empty()) errors = c.validate();
  if (!errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw UsageError(msg);
  }
  return c;
}

fs::path checkpoint_stem(const std::string& path, const std::string& name) {
  fs::path p(path);
  if (fs::is_directory(p)) {
    if (fs::exists(p / "checkpoint" / (name + ".json"))) return p / "checkpoint" / name;
    return p / name;
  }
  return p;
}

// --- verify ------------------------------------------------------------------

struct VerifyFlags {
  std::uint64_t seed = 0;
  int num_mdps = 100;
  int num_discrete = 1000;
  std::string tolerance_overrides;
  bool inject_fault = false;
  std::string report;
  std::string failures;
};

int cmd_verify(const VerifyFlags& f) {
  verify::Options o;
  o.seed = f.seed;
  o.num_mdps = f.num_mdps;
  o.num_discrete = f.num_discrete;
  try {
    o.tolerance_overrides = verify::parse_tolerance_overrides(f.tolerance_overrides);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("--tolerance-overrides: ") + e.what());
  }
  if (f.inject_fault) o.prefactor_sign = -1.0;
  verify::Report r = verify::run_suite(o);
  verify::print_report(r, std::cout);

  json failures = json::array();
  for (const auto& c : r.checks)
    if (!c.passed) failures.push_back({{"check", c.name}, {"instance", *c.violating_instance}});
  if (!failures.empty()) {
    std::cerr << "violating instances:\n" << failures.dump() << "\n";
    if (!f.failures.empty()) write_json(f.failures, failures);
  }
  if (!f.report.empty()) {
    json checks = json::array();
    for (const auto& c : r.checks)
      checks.push_back({{"name", c.name},
                        {"instances", c.instances},
                        {"max_violation", c.max_violation},
                        {"tolerance", c.tolerance},
                        {"passed", c.passed}});
    write_json(f.report, manifest("verify", {{"seed", f.seed},
                                             {"num_mdps", f.num_mdps},
                                             {"num_discrete", f.num_discrete},
                                             {"inject_fault", f.inject_fault},
                                             {"checks", checks},
                                             {"all_passed", r.all_passed()}}));
  }
  return r.all_passed() ? kExitOk : kExitCheckFailed;
}

// --- gen-dataset -----------------------------------------------------------------

struct GenFlags {
  std::string quality = "medium";
  int episodes = 200;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_gen_dataset(const GenFlags& f) {
  auto q = pointmass::parse_quality(f.quality);
  if (!q) throw UsageError("--quality must be one of medium, medium-replay, expert (got '" + f.quality + "')");
  if (f.episodes < 1) throw UsageError("--episodes must be >= 1");
  if (f.out.empty()) throw UsageError("--out is required");
  fs::path out(f.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  OfflineDataset d = pointmass::collect_dataset(*q, f.episodes, f.seed);
  d.save(out);
  write_json(out.string() + ".manifest.json",
             manifest("gen-dataset", {{"quality", f.quality},
                                      {"episodes", f.episodes},
                                      {"seed", f.seed},
                                      {"transitions", d.size()},
                                      {"mean_episode_return", d.mean_episode_return()}}));
  std::cout << "wrote " << d.size() << " transitions to " << out.string() << "\n";
  return kExitOk;
}

// --- train -----------------------------------------------------------------

struct TrainFlags {
  std::string config;
  std::string dataset;
  std::string out;
  std::string variant;
  bool desk_scale = false;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  bool quiet = false;
};

json schedule_audit(const ScheduleCounts& observed, const RunConfig& c) {
  ScheduleCounts expected = expected_schedule(c);
  return {{"observed", observed.to_json()}, {"expected", expected.to_json()}, {"match", observed == expected}};
}

int cmd_train(const TrainFlags& f) {
  if (f.out.empty()) throw UsageError("--out is required");
  OfflineDataset dataset = load_dataset(f.dataset);
  RunConfig c = build_config(f.config, f.desk_scale, f.variant, f.epochs);
  const std::uint64_t seed = f.seed.value_or(c.seeds.front());
  fs::path out(f.out);
  fs::create_directories(out);

  json m = manifest("train", {{"config", c.to_json()},
                              {"seed", seed},
                              {"variant", to_string(c.variant)},
                              {"dataset", fs::absolute(f.dataset).string()},
                              {"dataset_quality", dataset.quality},
                              {"dataset_seed", dataset.seed},
                              {"dataset_transitions", dataset.size()}});
  write_json(out / "manifest.json", m);

  std::ofstream csv(out / "metrics.csv", std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write " + (out / "metrics.csv").string());
  csv << metrics_csv_header() << "\n";
  Trainer trainer(c, dataset, seed);
  trainer.run([&](const EpochMetrics& e) {
    csv << metrics_csv_row(e) << "\n" << std::flush;
    if (!f.quiet) {
      char line[160];
      std::snprintf(line, sizeof line, "epoch %d  mean_return %.3f  std %.3f\n", e.epoch, e.mean_return,
                    e.std_return);
      std::cout << line << std::flush;
    }
  });
  trainer.save_checkpoints(out / "checkpoint");
  json audit = schedule_audit(trainer.counts(), c);
  write_json(out / "schedule.json", audit);
  m["schedule"] = audit;
  m["dataset_mean_return"] = dataset.mean_episode_return();
  write_json(out / "manifest.json", m);
  return kExitOk;
}

// --- eval ------------------------------------------------------------------

struct EvalFlags {
  std::string checkpoint;
  int episodes = pointmass::kEvalEpisodes;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_eval(const EvalFlags& f) {
  if (f.checkpoint.empty()) throw UsageError("--checkpoint is required");
  if (f.episodes < 1) throw UsageError("--episodes must be >= 1");
  fs::path stem = checkpoint_stem(f.checkpoint, "agent");
  if (!fs::exists(stem.string() + ".json")) throw UsageError("agent checkpoint not found: " + stem.string());
  agent::Agent agent = agent::Agent::from_checkpoint(nn::Checkpoint::load(stem));
  auto r = EnvironmentHooks::pointmass().evaluate(agent, f.episodes, f.seed);
  json j = manifest("eval", {{"checkpoint", fs::absolute(stem).string()},
                             {"episodes", f.episodes},
                             {"seed", f.seed},
                             {"mean_return", r.mean_return},
                             {"std_return", r.std_return},
                             {"returns", r.returns}});
  std::cout << j.dump(2) << "\n";
  if (!f.out.empty()) write_json(f.out, j);
  return kExitOk;
}

// --- ablate ------------------------------------------------------------------

struct AblateFlags {
  std::string config;
  std::string dataset;
  std::string out;
  std::string variants = "main,nw,wpr,rew_test,value_disc,gaussian";
  std::string seeds;
  bool desk_scale = false;
  std::optional<int> epochs;
};

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_ablate(const AblateFlags& f) {
  if (f.out.empty()) throw UsageError("--out is required");
  OfflineDataset dataset = load_dataset(f.dataset);
  RunConfig base = build_config(f.config, f.desk_scale, "", f.epochs);
  std::vector<Variant> variants;
  for (const auto& v : split(f.variants)) {
    try {
      variants.push_back(parse_variant(v));
    } catch (const std::invalid_argument& e) {
      throw UsageError(std::string("--variants: ") + e.what());
    }
  }
  std::vector<std::uint64_t> seeds = base.seeds;
  if (!f.seeds.empty()) {
    seeds.clear();
    for (const auto& s : split(f.seeds)) {
      try {
        seeds.push_back(std::stoull(s));
      } catch (const std::exception&) {
        throw UsageError("--seeds: '" + s + "' is not a seed");
      }
    }
  }
  fs::path out(f.out);
  fs::create_directories(out);
  write_json(out / "manifest.json", manifest("ablate", {{"config", base.to_json()},
                                                        {"variants", split(f.variants)},
                                                        {"seeds", seeds},
                                                        {"dataset", fs::absolute(f.dataset).string()}}));
  std::ofstream summary(out / "summary.csv", std::ios::trunc);
  summary << "variant,seed,final_mean_return,final_std_return,dataset_mean_return\n";
  for (Variant v : variants) {
    RunConfig c = base;
    c.variant = v;
    for (std::uint64_t seed : seeds) {
      fs::path run_dir = out / to_string(v) / ("seed_" + std::to_string(seed));
      fs::create_directories(run_dir);
      std::ofstream csv(run_dir / "metrics.csv", std::ios::trunc);
      csv << metrics_csv_header() << "\n";
      RunResult r = run_ampl(c, dataset, seed, run_dir / "checkpoint",
                             [&](const EpochMetrics& e) { csv << metrics_csv_row(e) << "\n"; });
      const EpochMetrics& last = r.metrics.back();
      char line[256];
      std::snprintf(line, sizeof line, "%s,%llu,%.17g,%.17g,%.17g\n", to_string(v).c_str(),
                    static_cast<unsigned long long>(seed), last.mean_return, last.std_return, r.dataset_mean_return);
      summary << line << std::flush;
      std::cout << line << std::flush;
    }
  }
  return kExitOk;
}

// --- miw-dump ------------------------------------------------------------------

struct DumpFlags {
  std::string checkpoint;
  std::string dataset;
  std::string out;
};

int cmd_miw_dump(const DumpFlags& f) {
  if (f.checkpoint.empty()) throw UsageError("--checkpoint is required");
  if (f.out.empty()) throw UsageError("--out is required");
  OfflineDataset dataset = load_dataset(f.dataset);
  fs::path stem = checkpoint_stem(f.checkpoint, "miw");
  if (!fs::exists(stem.string() + ".json")) throw UsageError("omega checkpoint not found: " + stem.string());
  miw::MiwEstimator est = miw::MiwEstimator::from_checkpoint(nn::Checkpoint::load(stem));
  if (est.state_dim() != dataset.state_dim || est.action_dim() != dataset.action_dim)
    throw UsageError("checkpoint dims (" + std::to_string(est.state_dim()) + ", " + std::to_string(est.action_dim()) +
                     ") do not match the dataset (" + std::to_string(dataset.state_dim) + ", " +
                     std::to_string(dataset.action_dim) + ")");
  fs::path out(f.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  miw::write_weights_csv(out.string(), est.raw_weights(dataset));
  write_json(out.string() + ".manifest.json", manifest("miw-dump", {{"checkpoint", fs::absolute(stem).string()},
                                                                    {"dataset", fs::absolute(f.dataset).string()},
                                                                    {"rows", dataset.size()}}));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 0; i < argc; ++i) g_command_line += (i ? " " : "") + std::string(argv[i]);

  CLI::App app{"Offline model-based RL with weighted model training"};
  app.require_subcommand(1);

  VerifyFlags vf;
  auto* verify_cmd = app.add_subcommand("verify", "Run the tabular verification suite");
  verify_cmd->add_option("--seed", vf.seed, "Base seed");
  verify_cmd->add_option("--num-mdps", vf.num_mdps, "Random MDP instances")->check(CLI::PositiveNumber);
  verify_cmd->add_option("--num-discrete", vf.num_discrete, "Random discrete instances for the KL checks")
      ->check(CLI::PositiveNumber);
  verify_cmd->add_option("--tolerance-overrides", vf.tolerance_overrides, "name=value[,name=value...]");
  verify_cmd->add_option("--report", vf.report, "Write the report as JSON");
  verify_cmd->add_option("--failures", vf.failures, "Write violating instances as JSON");
  verify_cmd->add_flag("--inject-fault", vf.inject_fault, "Flip the bound prefactor (negative test)")
      ->group("");

  GenFlags gf;
  auto* gen_cmd = app.add_subcommand("gen-dataset", "Collect a point-mass offline dataset");
  gen_cmd->add_option("--quality", gf.quality, "medium, medium-replay or expert");
  gen_cmd->add_option("--episodes", gf.episodes, "Episodes to roll out");
  gen_cmd->add_option("--seed", gf.seed, "Seed");
  gen_cmd->add_option("--out", gf.out, "Output .jsonl path");

  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "Train one seed");
  train_cmd->add_option("--config", tf.config, "Config JSON");
  train_cmd->add_option("--dataset", tf.dataset, "Dataset .jsonl");
  train_cmd->add_option("--out", tf.out, "Output directory");
  train_cmd->add_option("--variant", tf.variant, "main, nw, wpr, rew_test, value_disc or gaussian");
  train_cmd->add_flag("--desk-scale", tf.desk_scale, "Start from the desk-scale configuration");
  train_cmd->add_option("--seed", tf.seed, "Seed (default: first seed of the config)");
  train_cmd->add_option("--epochs", tf.epochs, "Override the number of epochs")->check(CLI::PositiveNumber);
  train_cmd->add_flag("--quiet", tf.quiet, "No per-epoch progress");

  EvalFlags ef;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a trained policy");
  eval_cmd->add_option("--checkpoint", ef.checkpoint, "Run directory or agent checkpoint stem");
  eval_cmd->add_option("--episodes", ef.episodes, "Episodes");
  eval_cmd->add_option("--seed", ef.seed, "Seed");
  eval_cmd->add_option("--out", ef.out, "Write the result as JSON");

  AblateFlags af;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train every variant over the seeds");
  ablate_cmd->add_option("--config", af.config, "Config JSON");
  ablate_cmd->add_option("--dataset", af.dataset, "Dataset .jsonl");
  ablate_cmd->add_option("--out", af.out, "Output directory");
  ablate_cmd->add_option("--variants", af.variants, "Comma-separated variants");
  ablate_cmd->add_option("--seeds", af.seeds, "Comma-separated seeds (default: config seeds)");
  ablate_cmd->add_flag("--desk-scale", af.desk_scale, "Start from the desk-scale configuration");
  ablate_cmd->add_option("--epochs", af.epochs, "Override the number of epochs")->check(CLI::PositiveNumber);

  DumpFlags df;
  auto* dump_cmd = app.add_subcommand("miw-dump", "Write per-transition omega as CSV");
  dump_cmd->add_option("--checkpoint", df.checkpoint, "Run directory or omega checkpoint stem");
  dump_cmd->add_option("--dataset", df.dataset, "Dataset .jsonl");
  dump_cmd->add_option("--out", df.out, "Output CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*verify_cmd) return cmd_verify(vf);
    if (*gen_cmd) return cmd_gen_dataset(gf);
    if (*train_cmd) return cmd_train(tf);
    if (*eval_cmd) return cmd_eval(ef);
    if (*ablate_cmd) return cmd_ablate(af);
    if (*dump_cmd) return cmd_miw_dump(df);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  }
  return kExitUsage;
}
