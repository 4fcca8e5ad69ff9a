// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: train, infer, bench, fixtures, and the verify
// suites. Configuration is one flat namespaced key set; a plain-text config
// file fills it, flags override, and the effective values are echoed into
// the run directory.
#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "odegan/bench/bench.hpp"
#include "odegan/data/dataset.hpp"
#include "odegan/train/trainer.hpp"
#include "odegan/verify/suites.hpp"

namespace fs = std::filesystem;
using namespace odegan;

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

// Every tunable under one namespaced key set: the trainer's canonical map
// plus the data and bench knobs owned by the front end.
struct Settings {
  std::map<std::string, std::string> kv;

  Settings() {
    kv = train::config_to_map(train::TrainConfig{});
    kv["data.root"] = "";
    kv["data.image_size"] = "256";
    kv["data.fixtures"] = "0";
    kv["bench.image_size"] = "256";
    kv["bench.runs"] = "50";
    kv["bench.warmup"] = "2";
    kv["bench.input_seed"] = "99";
  }

  void set(const std::string& key, const std::string& value) {
    auto it = kv.find(key);
    if (it == kv.end())
      throw core::ConfigError("unknown config key '" + key + "'");
    it->second = value;
  }

  std::uint64_t get_u64(const std::string& key) const {
    return train::detail::parse_u64(key, kv.at(key));
  }

  train::TrainConfig train_config() const {
    std::map<std::string, std::string> t;
    for (const auto& [k, v] : kv)
      if (k.rfind("data.", 0) != 0 && k.rfind("bench.", 0) != 0) t[k] = v;
    return train::config_from_map(t);
  }
};

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
}

// Plain key = value lines; [section] headers prefix unqualified keys;
// # and ; start comments.
std::map<std::string, std::string> parse_config_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw core::IoError("config: cannot open '" + path.string() + "'");
  std::map<std::string, std::string> entries;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    auto where = [&] { return "config: line " + std::to_string(lineno); };
    if (auto hash = line.find_first_of("#;"); hash != std::string::npos)
      line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw core::ConfigError(where() + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw core::ConfigError(where() + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty()) throw core::ConfigError(where() + ": empty key");
    if (!section.empty() && key.find('.') == std::string::npos)
      key = section + "." + key;
    entries[key] = val;
  }
  return entries;
}

std::string config_key_help() {
  std::ostringstream os;
  os << "Config keys and defaults (config-file sections map to the prefix "
        "before the dot):\n";
  for (const auto& [k, v] : Settings{}.kv)
    os << "  " << k << " = " << (v.empty() ? "(unset)" : v) << "\n";
  return os.str();
}

data::DatasetLayout discover_layout(const fs::path& root,
                                    std::size_t image_size) {
  data::DatasetLayout lay{root / "pseudo_src", root / "pseudo_tgt",
                          root / "unpaired_src", root / "unpaired_tgt",
                          image_size};
  for (const auto& d : {lay.pseudo_src_dir, lay.pseudo_tgt_dir,
                        lay.unpaired_src_dir, lay.unpaired_tgt_dir})
    if (!fs::is_directory(d))
      throw core::ConfigError("dataset: missing directory '" + d.string() +
                              "' (use --fixtures N to generate a synthetic "
                              "set)");
  return lay;
}

std::vector<fs::path> png_files(const fs::path& dir) {
  if (!fs::is_directory(dir))
    throw core::ConfigError("input: '" + dir.string() +
                            "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

// Flag holders; only flags the user actually passed become overrides.
struct FlagOverrides {
  CLI::App* cmd = nullptr;
  std::vector<std::pair<std::string, std::string>> bound;  // flag -> key
  std::map<std::string, std::string> values;

  void add(const std::string& flag, const std::string& key,
           const std::string& help) {
    bound.emplace_back(flag, key);
    cmd->add_option(flag, values[flag], help);
  }
  void apply(Settings& s) const {
    for (const auto& [flag, key] : bound)
      if (cmd->count(flag) > 0) s.set(key, values.at(flag));
  }
};

struct TrainArgs {
  std::string config_file;
  std::string out_dir = "out";
  std::string name = "run";
  FlagOverrides overrides;
};

int cmd_train(const TrainArgs& a) {
  Settings s;
  if (!a.config_file.empty())
    for (const auto& [k, v] : parse_config_file(a.config_file)) s.set(k, v);
  a.overrides.apply(s);

  auto tc = s.train_config();
  tc.validate();

  const fs::path root = s.kv.at("data.root");
  if (root.empty())
    throw core::ConfigError("dataset: data.root is not set (--data)");
  const std::size_t image_size = s.get_u64("data.image_size");
  const std::size_t n_fixtures = s.get_u64("data.fixtures");
  data::DatasetLayout layout =
      n_fixtures > 0 ? data::make_fixtures(root, n_fixtures, tc.seed,
                                           image_size)
                     : discover_layout(root, image_size);

  const fs::path run_dir = fs::path(a.out_dir) / a.name;
  fs::create_directories(run_dir);
  {
    std::ofstream echo(run_dir / "config.echo");
    if (!echo)
      throw core::IoError("cannot write '" +
                          (run_dir / "config.echo").string() + "'");
    for (const auto& [k, v] : s.kv) echo << k << "=" << v << "\n";
  }

  train::Trainer<float> trainer(tc, layout, run_dir);
  std::cout << "training: " << trainer.steps_per_epoch() << " steps/epoch x "
            << tc.epochs << " epochs -> " << run_dir.string() << std::endl;
  auto res = trainer.run([&](std::size_t global_step, std::size_t epoch,
                             const loss::LossReport& r) {
    if (global_step % trainer.steps_per_epoch() == 0)
      std::cout << "epoch " << epoch << ": total " << r.total << " (sup "
                << r.sup_total << ", unsup " << r.unsup_total << ")"
                << std::endl;
  });

  // A few translated pseudo-source images for eyeballing the run.
  auto sample_in = png_files(layout.pseudo_src_dir);
  if (sample_in.size() > 4) sample_in.resize(4);
  if (!sample_in.empty())
    train::infer<float>(res.final_checkpoint, sample_in, run_dir / "samples");

  std::cout << "done: " << res.steps_run << " steps, metrics "
            << res.metrics_csv.string() << ", checkpoint "
            << res.final_checkpoint.string() << std::endl;
  return kOk;
}

struct InferArgs {
  std::string ckpt, in_dir, out_dir;
  std::string solver, dt, rtol, atol;
  CLI::App* cmd = nullptr;
};

int cmd_infer(const InferArgs& a) {
  std::optional<ode::SolverConfig> override;
  if (a.cmd->count("--solver") > 0) {
    ode::SolverConfig sc;
    sc.method = ode::method_from_name(a.solver);
    if (a.cmd->count("--dt") > 0)
      sc.fixed_step = train::detail::parse_double("solver.fixed_step", a.dt);
    if (a.cmd->count("--rtol") > 0)
      sc.rtol = train::detail::parse_double("solver.rtol", a.rtol);
    if (a.cmd->count("--atol") > 0)
      sc.atol = train::detail::parse_double("solver.atol", a.atol);
    override = sc;
  } else if (a.cmd->count("--dt") + a.cmd->count("--rtol") +
                 a.cmd->count("--atol") >
             0) {
    throw core::ConfigError(
        "infer: --dt/--rtol/--atol require --solver to name the method");
  }

  auto inputs = png_files(a.in_dir);
  if (inputs.empty())
    throw core::ConfigError("infer: no .png inputs in '" + a.in_dir + "'");
  auto outs = train::infer<float>(a.ckpt, inputs, a.out_dir, override);
  std::cout << "translated " << outs.size() << " images -> " << a.out_dir
            << std::endl;
  return kOk;
}

struct BenchArgs {
  std::string ckpt;
  std::size_t size = 256;
  std::size_t runs = 50;
  std::size_t warmup = 2;
  std::uint64_t input_seed = 99;
  bool csv = false;
};

int cmd_bench(const BenchArgs& a) {
  bench::BenchOptions opt;
  opt.image_size = a.size;
  opt.runs_long = a.runs;
  opt.runs_short = std::min<std::size_t>(5, a.runs);
  opt.n_warm = a.warmup;
  opt.input_seed = a.input_seed;
  auto r = bench::bench_generator<float>(a.ckpt, opt);
  if (a.csv)
    std::cout << bench::report_csv_header() << "\n"
              << bench::report_csv_row(r) << std::endl;
  else
    std::cout << bench::report_table(r) << std::flush;
  return kOk;
}

struct FixtureArgs {
  std::string out_dir;
  std::size_t n = 8;
  std::uint64_t seed = 7;
  std::size_t size = 64;
};

int cmd_fixtures(const FixtureArgs& a) {
  auto layout = data::make_fixtures(a.out_dir, a.n, a.seed, a.size);
  std::cout << "fixtures: " << a.n << " pseudo pairs + unpaired sets under "
            << fs::path(a.out_dir).string() << "\n"
            << "  " << layout.pseudo_src_dir.string() << "\n"
            << "  " << layout.pseudo_tgt_dir.string() << "\n"
            << "  " << layout.unpaired_src_dir.string() << "\n"
            << "  " << layout.unpaired_tgt_dir.string() << std::endl;
  return kOk;
}

int cmd_verify(const std::string& suite, std::uint64_t seed) {
  std::vector<verify::CheckResult> checks;
  if (suite == "gradcheck")
    checks = verify::run_gradient_checks();
  else if (suite == "odeorder")
    checks = verify::run_solver_order_checks();
  else if (suite == "lossoracle")
    checks = verify::run_loss_oracle_checks(seed);
  else
    checks = verify::run_param_checks();
  bool all = true;
  for (const auto& c : checks) {
    all = all && c.pass;
    std::cout << (c.pass ? "[pass] " : "[FAIL] ") << c.name << ": " << c.detail
              << "\n";
  }
  std::cout << (all ? "verify: all checks passed"
                    : "verify: some checks FAILED")
            << std::endl;
  return all ? kOk : kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"odegan: image-to-image translation with a Neural-ODE "
               "bottleneck generator"};
  app.require_subcommand(1);
  app.footer(config_key_help());

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand(
      "train", "Train on a dataset root (or generated fixtures)");
  train_cmd->add_option("--config", ta.config_file,
                        "Plain-text config file with [section] key = value");
  train_cmd->add_option("--out", ta.out_dir, "Output root directory");
  train_cmd->add_option("--name", ta.name,
                        "Run name (run dir = <out>/<name>)");
  ta.overrides.cmd = train_cmd;
  ta.overrides.add("--data", "data.root", "Dataset root directory");
  ta.overrides.add("--fixtures", "data.fixtures",
                   "Generate N synthetic fixture pairs into the data root");
  ta.overrides.add("--size", "data.image_size", "Training image size");
  ta.overrides.add("--seed", "train.seed", "Master seed");
  ta.overrides.add("--epochs", "train.epochs", "Epochs to run");
  ta.overrides.add("--steps", "train.steps_per_epoch",
                   "Steps per epoch (0: one pseudo-pair pass)");
  ta.overrides.add("--batch", "train.batch_size", "Batch size");
  ta.overrides.add("--lr", "train.lr", "Adam learning rate");
  ta.overrides.add("--solver", "solver.method",
                   "ODE solver: euler|rk4|dopri5");
  ta.overrides.add("--dt", "solver.fixed_step", "Fixed solver step");
  ta.overrides.add("--rtol", "solver.rtol", "Adaptive relative tolerance");
  ta.overrides.add("--atol", "solver.atol", "Adaptive absolute tolerance");
  ta.overrides.add("--bottleneck", "model.bottleneck",
                   "Generator bottleneck: ode|resnet");
  ta.overrides.add("--lambda-perc", "loss.lambda_perc",
                   "Perceptual loss weight");

  InferArgs ia;
  auto* infer_cmd =
      app.add_subcommand("infer", "Translate a directory of .png images");
  ia.cmd = infer_cmd;
  infer_cmd->add_option("--ckpt", ia.ckpt, "Training checkpoint")->required();
  infer_cmd->add_option("--in", ia.in_dir, "Input directory")->required();
  infer_cmd->add_option("--out", ia.out_dir, "Output directory")->required();
  infer_cmd->add_option("--solver", ia.solver,
                        "Override solver: euler|rk4|dopri5");
  infer_cmd->add_option("--dt", ia.dt, "Override fixed step");
  infer_cmd->add_option("--rtol", ia.rtol, "Override relative tolerance");
  infer_cmd->add_option("--atol", ia.atol, "Override absolute tolerance");

  BenchArgs ba;
  auto* bench_cmd = app.add_subcommand(
      "bench", "Time and account the generator from a checkpoint");
  bench_cmd->add_option("--ckpt", ba.ckpt, "Training checkpoint")->required();
  bench_cmd->add_option("--size", ba.size, "Benchmark image size");
  bench_cmd->add_option("--runs", ba.runs, "Timed runs (5 and 50 canonical)");
  bench_cmd->add_option("--warmup", ba.warmup, "Untimed warm-up runs");
  bench_cmd->add_option("--input-seed", ba.input_seed, "Input stream seed");
  bench_cmd->add_flag("--csv", ba.csv, "Emit CSV instead of the table");

  FixtureArgs fa;
  auto* fix_cmd = app.add_subcommand(
      "fixtures", "Generate the synthetic photo/stylized dataset");
  fix_cmd->add_option("--out", fa.out_dir, "Dataset root to create")
      ->required();
  fix_cmd->add_option("--n", fa.n, "Pseudo-pair count");
  fix_cmd->add_option("--seed", fa.seed, "Fixture seed");
  fix_cmd->add_option("--size", fa.size, "Image size");

  std::string suite;
  std::uint64_t verify_seed = 2026;
  auto* verify_cmd = app.add_subcommand(
      "verify", "Run a named verification suite (exit 0 iff all pass)");
  verify_cmd
      ->add_option("suite", suite,
                   "One of: gradcheck, odeorder, lossoracle, params")
      ->required()
      ->check(CLI::IsMember({"gradcheck", "odeorder", "lossoracle",
                             "params"}));
  verify_cmd->add_option("--seed", verify_seed, "Oracle instance seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(ta);
    if (infer_cmd->parsed()) return cmd_infer(ia);
    if (bench_cmd->parsed()) return cmd_bench(ba);
    if (fix_cmd->parsed()) return cmd_fixtures(fa);
    if (verify_cmd->parsed()) return cmd_verify(suite, verify_seed);
  } catch (const core::ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kConfigError;
  } catch (const core::UsageError& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kRuntimeError;
  }
  return kOk;
}
