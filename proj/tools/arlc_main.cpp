// Command-line front end: puzzle generation, rule programming, training,
// evaluation, rule inspection and gradient checking.
//
// Exit codes: 0 success, 1 validation/configuration error, 2 runtime failure.
// Artifacts are deterministic for a fixed seed; wall-clock readings go to
// stdout only, never into output files.
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "arlc/autodiff.hpp"
#include "arlc/model.hpp"
#include "arlc/rpm.hpp"
#include "arlc/trainer.hpp"
#include "arlc/vsa.hpp"

namespace fs = std::filesystem;
using arlc::rpm::Attr;
using arlc::rpm::RuleFamily;

namespace {

std::uint64_t resolve_seed(std::int64_t flag_seed) {
  if (flag_seed >= 0) return static_cast<std::uint64_t>(flag_seed);
  if (const char* env = std::getenv("ARLC_SEED"))
    return static_cast<std::uint64_t>(std::strtoull(env, nullptr, 10));
  return 42;
}

void print_header(const std::string& command, std::uint64_t seed) {
  std::time_t now = std::time(nullptr);
  char buf[64];
  std::strftime(buf, sizeof(buf), "%Y-%m-%d %H:%M:%S", std::gmtime(&now));
  std::cout << "# arlc " << command << " | " << buf << " UTC\n";
  std::cout << "seed: " << seed << "\n";
}

arlc::rpm::AttrRulePair parse_pair(const std::string& s) {
  auto colon = s.find(':');
  if (colon == std::string::npos)
    throw arlc::ValidationError("expected attr:rule, got '" + s + "'");
  return {arlc::rpm::attr_from(s.substr(0, colon)),
          arlc::rpm::family_from(s.substr(colon + 1))};
}

std::vector<arlc::model::RuleProgram> load_programs(const std::string& spec) {
  if (spec == "default4") return arlc::model::default_programs(false);
  if (spec == "default4v") return arlc::model::default_programs(true);
  std::ifstream in(spec);
  if (!in) throw arlc::ValidationError("--rules: cannot open '" + spec + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw arlc::ParseError("--rules file: " + std::string(e.what()));
  }
  auto slot_from = [](const std::string& name) {
    const auto& names = arlc::model::basis_names();
    for (int i = 0; i < arlc::model::kBasis; ++i)
      if (names[static_cast<std::size_t>(i)] == name) return i;
    throw arlc::ParseError("--rules file: unknown symbol '" + name + "'");
  };
  std::vector<arlc::model::RuleProgram> programs;
  for (const auto& rj : j) {
    arlc::model::RuleProgram p;
    p.name = rj.value("name", "rule" + std::to_string(programs.size()));
    for (const auto& s : rj.at("plus")) p.plus.push_back(slot_from(s.get<std::string>()));
    if (rj.contains("minus"))
      for (const auto& s : rj.at("minus")) p.minus.push_back(slot_from(s.get<std::string>()));
    programs.push_back(std::move(p));
  }
  return programs;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw arlc::ConfigError("cannot open '" + path.string() + "' for writing");
  out << text;
}

// Reports are persisted deterministically: timings stay on stdout.
void write_report(const arlc::train::RunReport& rep, const fs::path& path) {
  arlc::train::RunReport copy = rep;
  copy.wall_seconds = 0.0;
  write_text(path, arlc::train::report_to_json(copy).dump(2) + "\n");
}

void print_report(const arlc::train::RunReport& rep) {
  auto line = [](const std::string& name, const arlc::train::GroupStats& g) {
    std::cout << "  " << std::left << std::setw(26) << name << std::right
              << std::setw(6) << g.n << std::fixed << std::setprecision(1)
              << std::setw(9) << g.acc_all() << std::setw(12) << g.acc_excl_hard()
              << std::setw(10) << (g.n_hard ? g.acc_hard() : 0.0) << std::setw(8)
              << g.n_hard << "\n";
  };
  std::cout << "  " << std::left << std::setw(26) << "group" << std::right
            << std::setw(6) << "n" << std::setw(9) << "acc%" << std::setw(12)
            << "acc%!hard" << std::setw(10) << "acc%hard" << std::setw(8)
            << "n_hard" << "\n";
  line("overall", rep.overall);
  for (const auto& [name, g] : rep.constellations) line(name, g);
  for (const auto& [name, g] : rep.rule_families) line("rule:" + name, g);
  std::cout << "  parameters: " << rep.parameter_count << "\n";
}

arlc::model::Encoder encoder_for(const arlc::model::RuleSet& rs) {
  arlc::vsa::Dims dims = rs.dims;
  if (dims.D == 0) dims = {1024, 4};
  if (rs.codebook_seeds.empty())
    throw arlc::LoadError("checkpoint carries no codebook seeds");
  std::map<std::string, std::uint64_t> seeds = rs.codebook_seeds;
  return arlc::model::Encoder(dims, seeds);
}

struct CommonOpts {
  std::int64_t seed = -1;
  std::string out = ".";
  int dim = 1024;
  int blocks = 4;
  double temperature = 1.0;
  int jobs = static_cast<int>(std::thread::hardware_concurrency());
};

void add_common(CLI::App* cmd, CommonOpts& o, bool with_dims = true) {
  cmd->add_option("--seed", o.seed, "RNG seed (fallback: ARLC_SEED env, then 42)");
  cmd->add_option("--out", o.out, "Output directory")->capture_default_str();
  if (with_dims) {
    cmd->add_option("--dim", o.dim, "Vector dimension D")->capture_default_str();
    cmd->add_option("--blocks", o.blocks, "Block count B")->capture_default_str();
  }
  cmd->add_option("--temperature", o.temperature, "Soft-selection temperature")
      ->capture_default_str();
  cmd->add_option("--jobs", o.jobs, "Worker threads (1 = sequential)")
      ->capture_default_str();
}

int run(int argc, char** argv) {
  CLI::App app{"arlc: abductive rule learning over sparse block codes"};
  app.require_subcommand(1);

  // generate
  CommonOpts gen_o;
  std::string gen_constellation = "center";
  int gen_n = 1000;
  bool gen_no_hard = false;
  std::vector<std::string> gen_holdout;
  std::vector<std::string> gen_force;
  CLI::App* gen = app.add_subcommand("generate", "Generate a puzzle dataset");
  add_common(gen, gen_o, false);
  gen->add_option("--constellation", gen_constellation,
                  "center|2x2|3x3|left-right|up-down|in-out-center|in-out-grid")
      ->capture_default_str();
  gen->add_option("--n", gen_n, "Number of puzzles")->capture_default_str();
  gen->add_flag("--no-hard", gen_no_hard,
                "Exclude hard position rules (progression/arithmetic on masks)");
  gen->add_option("--holdout", gen_holdout,
                  "attr:rule pair to exclude from sampling (repeatable)");
  gen->add_option("--force", gen_force,
                  "attr:rule pair to force as the governing rule (repeatable)");

  // program
  CommonOpts prog_o;
  std::string prog_rules = "default4";
  CLI::App* prog = app.add_subcommand("program", "Compile programmed rules");
  add_common(prog, prog_o);
  prog->add_option("--rules", prog_rules, "default4 | default4v | JSON file")
      ->capture_default_str();

  // train
  CommonOpts train_o;
  std::string train_data;
  std::string train_mode = "learn";
  std::string train_rules = "default4";
  std::string train_init;
  int train_epochs = 50;
  double train_lr = 0.01;
  int train_batch = 8;
  int train_terms = 12;
  int train_rules_n = 5;
  bool train_mean = false;
  bool train_early = false;
  CLI::App* tr = app.add_subcommand("train", "Train a rule set");
  add_common(tr, train_o);
  tr->add_option("--data", train_data, "Training JSONL path")->required();
  tr->add_option("--mode", train_mode, "learn|program|program-then-learn")
      ->capture_default_str();
  tr->add_option("--rules", train_rules,
                 "Programs for program modes: default4 | default4v | file")
      ->capture_default_str();
  tr->add_option("--init", train_init, "Checkpoint to initialize from");
  tr->add_option("--epochs", train_epochs, "Training epochs")->capture_default_str();
  tr->add_option("--lr", train_lr, "Learning rate")->capture_default_str();
  tr->add_option("--batch", train_batch, "Batch size")->capture_default_str();
  tr->add_option("--terms", train_terms, "Rule template terms T (6 or 12)")
      ->capture_default_str();
  tr->add_option("--num-rules", train_rules_n, "Rule count R")->capture_default_str();
  tr->add_flag("--loss-mean", train_mean, "Average the loss over attributes");
  tr->add_flag("--early-stop", train_early, "10% validation split, patience 10");

  // eval
  CommonOpts eval_o;
  std::string eval_model, eval_data;
  CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(ev, eval_o, false);
  ev->add_option("--model", eval_model, "Checkpoint path")->required();
  ev->add_option("--data", eval_data, "Evaluation JSONL path")->required();

  // inspect
  std::string inspect_model;
  CLI::App* insp = app.add_subcommand("inspect", "Render a rule set");
  insp->add_option("--model", inspect_model, "Checkpoint path")->required();

  // gradcheck
  CommonOpts gc_o;
  gc_o.dim = 64;
  int gc_trials = 100;
  double gc_eps = 1e-5;
  CLI::App* gc = app.add_subcommand("gradcheck",
                                    "Finite-difference check of the full loss");
  add_common(gc, gc_o);
  gc->add_option("--trials", gc_trials, "Number of random puzzles")
      ->capture_default_str();
  gc->add_option("--eps", gc_eps, "Central-difference step")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;  // flag/usage problems are validation errors
  }

  if (gen->parsed()) {
    std::uint64_t seed = resolve_seed(gen_o.seed);
    print_header("generate", seed);
    arlc::rpm::GenConfig cfg;
    cfg.constellation = arlc::rpm::constellation_from(gen_constellation);
    cfg.include_hard_position = !gen_no_hard;
    for (const std::string& s : gen_holdout) cfg.excluded.insert(parse_pair(s));
    for (const std::string& s : gen_force) {
      auto p = parse_pair(s);
      cfg.forced[p.first] = p.second;
    }
    std::cout << "constellation: " << gen_constellation << "  n: " << gen_n
              << "  hard-position: " << (cfg.include_hard_position ? "yes" : "no")
              << "\n";
    fs::create_directories(gen_o.out);
    std::vector<arlc::rpm::Puzzle> puzzles = arlc::rpm::generate_dataset(cfg, gen_n, seed);
    fs::path path = fs::path(gen_o.out) / "puzzles.jsonl";
    arlc::rpm::write_jsonl(puzzles, path.string());
    std::cout << "wrote " << puzzles.size() << " puzzles to " << path.string() << "\n";
    return 0;
  }

  if (prog->parsed()) {
    std::uint64_t seed = resolve_seed(prog_o.seed);
    print_header("program", seed);
    std::cout << "rules: " << prog_rules << "  dim: " << prog_o.dim << "/"
              << prog_o.blocks << "\n";
    arlc::model::RuleSet rs = arlc::model::program_rules(load_programs(prog_rules));
    rs.dims = {prog_o.dim, prog_o.blocks};
    rs.codebook_seeds = arlc::model::Encoder::default_seeds(seed);
    fs::create_directories(prog_o.out);
    fs::path path = fs::path(prog_o.out) / "ckpt.json";
    arlc::model::save_checkpoint(rs, path.string());
    std::cout << arlc::model::inspect_rules(rs);
    std::cout << "wrote " << path.string() << "\n";
    return 0;
  }

  if (tr->parsed()) {
    std::uint64_t seed = resolve_seed(train_o.seed);
    print_header("train", seed);
    arlc::train::TrainConfig cfg;
    cfg.optimizer.lr = train_lr;
    cfg.epochs = train_epochs;
    cfg.batch_size = train_batch;
    cfg.seed = seed;
    cfg.temperature = train_o.temperature;
    cfg.loss_mean_over_attrs = train_mean;
    cfg.early_stop = train_early;
    cfg.jobs = train_o.jobs;
    if (train_mode == "learn")
      cfg.mode = arlc::train::Mode::Learn;
    else if (train_mode == "program")
      cfg.mode = arlc::train::Mode::Program;
    else if (train_mode == "program-then-learn")
      cfg.mode = arlc::train::Mode::ProgramThenLearn;
    else
      throw arlc::ValidationError("--mode: unknown mode '" + train_mode + "'");

    arlc::vsa::Dims dims{train_o.dim, train_o.blocks};
    arlc::model::RuleSet rs;
    if (!train_init.empty()) {
      rs = arlc::model::load_checkpoint(train_init);
      if (rs.T != train_terms)
        throw arlc::LoadError("checkpoint field 'T': checkpoint has T=" +
                              std::to_string(rs.T) + " but the run requested T=" +
                              std::to_string(train_terms));
      if (rs.dims.D != 0) dims = rs.dims;
    } else if (cfg.mode == arlc::train::Mode::Learn) {
      rs = arlc::model::init_ruleset(train_rules_n, train_terms, seed);
    } else {
      rs = arlc::model::program_rules(load_programs(train_rules), train_terms);
    }
    rs.dims = dims;
    if (rs.codebook_seeds.empty())
      rs.codebook_seeds = arlc::model::Encoder::default_seeds(seed);
    arlc::model::Encoder enc(dims, rs.codebook_seeds);

    std::cout << "mode: " << arlc::train::to_string(cfg.mode) << "  data: "
              << train_data << "\n"
              << "dim: " << dims.D << "/" << dims.B << "  R: " << rs.R
              << "  T: " << rs.T << "  epochs: " << cfg.epochs << "  lr: "
              << cfg.optimizer.lr << "  batch: " << cfg.batch_size
              << "  temperature: " << cfg.temperature << "  jobs: " << cfg.jobs
              << "\n";

    std::vector<arlc::rpm::Puzzle> data = arlc::rpm::read_jsonl(train_data);
    auto t0 = std::chrono::steady_clock::now();
    arlc::train::TrainResult result = arlc::train::train(data, cfg, rs, enc);
    double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    fs::create_directories(train_o.out);
    arlc::model::save_checkpoint(rs, (fs::path(train_o.out) / "ckpt.json").string());
    arlc::train::write_metrics_csv(result.metrics,
                                   (fs::path(train_o.out) / "metrics.csv").string());
    arlc::train::RunReport final_rep = result.report;
    write_report(final_rep, fs::path(train_o.out) / "report.json");
    if (!result.metrics.empty()) {
      const auto& last = result.metrics.back();
      std::cout << "final epoch " << last.epoch << ": loss " << last.loss
                << ", train acc " << last.train_acc << "%\n";
    }
    std::cout << "trainable parameters: " << rs.trainable_parameters() << "\n";
    std::cout << "wall: " << std::fixed << std::setprecision(1) << secs << " s\n";
    std::cout << "wrote ckpt.json, metrics.csv, report.json to " << train_o.out << "\n";
    return 0;
  }

  if (ev->parsed()) {
    std::uint64_t seed = resolve_seed(eval_o.seed);
    print_header("eval", seed);
    arlc::model::RuleSet rs = arlc::model::load_checkpoint(eval_model);
    arlc::model::Encoder enc = encoder_for(rs);
    std::cout << "model: " << eval_model << "  data: " << eval_data << "  dim: "
              << enc.dims().D << "/" << enc.dims().B << "\n";
    std::vector<arlc::rpm::Puzzle> data = arlc::rpm::read_jsonl(eval_data);
    arlc::train::RunReport rep =
        arlc::train::evaluate(data, rs, enc, eval_o.temperature, eval_o.jobs);
    print_report(rep);
    std::cout << "wall: " << std::fixed << std::setprecision(1) << rep.wall_seconds
              << " s\n";
    fs::create_directories(eval_o.out);
    write_report(rep, fs::path(eval_o.out) / "report.json");
    std::cout << "wrote report.json to " << eval_o.out << "\n";
    return 0;
  }

  if (insp->parsed()) {
    arlc::model::RuleSet rs = arlc::model::load_checkpoint(inspect_model);
    std::cout << arlc::model::inspect_rules(rs);
    return 0;
  }

  if (gc->parsed()) {
    std::uint64_t seed = resolve_seed(gc_o.seed);
    print_header("gradcheck", seed);
    arlc::vsa::Dims dims{gc_o.dim, gc_o.blocks};
    std::cout << "dim: " << dims.D << "/" << dims.B << "  trials: " << gc_trials
              << "  eps: " << gc_eps << "\n";
    arlc::model::Encoder enc(dims, seed);
    arlc::rpm::GenConfig gcfg;
    gcfg.constellation = arlc::rpm::Constellation::Center;
    // Keep attribute values inside the small codebook's index range.
    int max_value = dims.L() / 2 - 1;
    gcfg.color_range.hi = std::min(gcfg.color_range.hi, max_value);
    double worst = 0.0;
    for (int trial = 0; trial < gc_trials; ++trial) {
      arlc::rpm::Puzzle p = arlc::rpm::sample_puzzle(gcfg, arlc::derive_seed(seed, static_cast<std::uint64_t>(trial)));
      arlc::model::RuleSet rs =
          arlc::model::init_ruleset(5, 12, arlc::derive_seed(seed, 50000 + static_cast<std::uint64_t>(trial)));
      rs.dims = dims;
      rs.codebook_seeds = enc.seeds();
      std::vector<arlc::grad::ParamBlock*> params;
      for (auto& pb : rs.logits) params.push_back(&pb);
      arlc::grad::Tape tape;
      auto objective = [&](bool with_grad) {
        if (with_grad) return arlc::model::puzzle_loss(p, rs, enc, 1.0, false, &tape);
        return arlc::model::puzzle_loss(p, rs, enc, 1.0, false, nullptr);
      };
      worst = std::max(worst, arlc::grad::finite_diff_check(objective, params, gc_eps));
    }
    std::cout << "max relative error: " << std::scientific << worst << "\n";
    if (worst >= 1e-4) {
      std::cout << "FAIL: exceeds 1e-4\n";
      return 2;
    }
    std::cout << "OK (< 1e-4)\n";
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const arlc::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return 2;
  }
}
