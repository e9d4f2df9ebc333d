// Command-line entry point: synth / pretrain / adapt / eval / ablate.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctsfda/config.hpp"
#include "ctsfda/eval.hpp"
#include "ctsfda/ingest.hpp"

namespace fs = std::filesystem;
using Real = float;

namespace {

ctsfda::RunConfig<Real> load_run_config(const std::string& path) {
  auto cfg = ctsfda::ConfigMap::parse_file(path);
  auto rc = ctsfda::RunConfig<Real>::from(cfg);
  if (const char* env = std::getenv("CT_SFDA_SEED")) {
    rc.seed = static_cast<std::uint64_t>(std::stoull(env));
    rc.shift.seed = rc.seed;
  }
  return rc;
}

std::pair<ctsfda::DomainDataset<Real>, ctsfda::DomainDataset<Real>>
load_pair(const ctsfda::RunConfig<Real>& rc) {
  if (rc.synthetic)
    return ctsfda::generate_synthetic_pair<Real>(
        rc.synth_classes, rc.synth_n_per_class, rc.synth_d, rc.synth_length,
        rc.shift);
  return {ctsfda::load_dataset<Real>(rc.source_path),
          ctsfda::load_dataset<Real>(rc.target_path)};
}

ctsfda::DomainDataset<Real> load_target_only(
    const ctsfda::RunConfig<Real>& rc) {
  if (rc.synthetic) {
    // Generation yields the pair; only the target half is kept here.
    auto pair = ctsfda::generate_synthetic_pair<Real>(
        rc.synth_classes, rc.synth_n_per_class, rc.synth_d, rc.synth_length,
        rc.shift);
    return std::move(pair.second);
  }
  return ctsfda::load_dataset<Real>(rc.target_path);
}

void write_hash(const fs::path& out, std::uint64_t hash) {
  fs::create_directories(out);
  std::ofstream(out / "config.hash") << std::hex << hash << "\n";
}

void check_hash(const fs::path& out, std::uint64_t hash) {
  std::ifstream in(out / "config.hash");
  if (!in)
    throw ctsfda::ConfigError("missing " + (out / "config.hash").string() +
                              "; run `ctsfda pretrain` first");
  std::uint64_t stored = 0;
  in >> std::hex >> stored;
  if (stored != hash)
    throw ctsfda::ConfigError(
        "config hash mismatch between stages; rerun pretrain with this "
        "config");
}

void print_log(const ctsfda::TrainLog& log) {
  for (const auto& e : log.epochs) {
    nlohmann::json j{{"stage", log.stage}, {"epoch", e.epoch}};
    for (const auto& [k, v] : e.losses) j[k] = v;
    std::cout << j.dump() << "\n";
  }
}

void append_run_json(const fs::path& out, const ctsfda::TrainLog& log,
                     std::uint64_t seed, std::uint64_t hash) {
  nlohmann::json j;
  const fs::path file = out / "run.json";
  if (std::ifstream in(file); in) in >> j;
  if (!j.contains("stages")) {
    j["seed"] = seed;
    j["config_hash"] = hash;
    j["stages"] = nlohmann::json::object();
  }
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : log.epochs) {
    nlohmann::json ej{{"epoch", e.epoch}};
    for (const auto& [k, v] : e.losses) ej[k] = v;
    epochs.push_back(ej);
  }
  j["stages"][log.stage] = epochs;
  fs::create_directories(out);
  std::ofstream(file) << j.dump(2) << "\n";
}

int cmd_synth(std::int64_t classes, std::int64_t n, std::int64_t channels,
              std::int64_t length, const ctsfda::ShiftConfig& shift,
              const std::string& out) {
  auto [source, target] =
      ctsfda::generate_synthetic_pair<Real>(classes, n, channels, length,
                                            shift);
  ctsfda::save_dataset(source, fs::path(out) / "source");
  ctsfda::save_dataset(target, fs::path(out) / "target");
  std::cout << "wrote " << out << "/source and " << out << "/target ("
            << source.n() << " instances each)\n";
  return 0;
}

int cmd_pretrain(const std::string& config_path) {
  auto rc = load_run_config(config_path);
  auto [source, target] = load_pair(rc);
  (void)target;
  auto p = ctsfda::pretrain_pipeline(source, rc);
  const fs::path out(rc.out_dir);
  ctsfda::save_checkpoint(p.theta, out / "checkpoints" / "theta");
  ctsfda::save_checkpoint(p.backbone_params, out / "checkpoints" / "backbone");
  write_hash(out, rc.config_hash);
  print_log(p.log_s1);
  print_log(p.log_s2);
  append_run_json(out, p.log_s1, rc.seed, rc.config_hash);
  append_run_json(out, p.log_s2, rc.seed, rc.config_hash);
  return 0;
}

ctsfda::Pipeline<Real> load_pipeline(const ctsfda::RunConfig<Real>& rc,
                                     std::int64_t d, std::int64_t l,
                                     std::int64_t k) {
  const fs::path out(rc.out_dir);
  check_hash(out, rc.config_hash);
  ctsfda::Pipeline<Real> p;
  p.spec = ctsfda::make_reshape_spec(d, l, rc.reshape_h, rc.reshape_w);
  p.unet = rc.unet;
  p.unet.in_ch = d;
  p.backbone = rc.backbone;
  p.backbone.in_ch = d;
  p.backbone.length = l;
  p.backbone.num_classes = k;
  p.theta = ctsfda::load_checkpoint<Real>(out / "checkpoints" / "theta");
  p.backbone_params =
      ctsfda::load_checkpoint<Real>(out / "checkpoints" / "backbone");
  if (!p.theta.all_frozen() || !p.backbone_params.all_frozen())
    throw ctsfda::InvariantError("loaded pretraining checkpoints not frozen");
  return p;
}

int cmd_adapt(const std::string& config_path) {
  auto rc = load_run_config(config_path);
  const auto opened_before = ctsfda::opened_dataset_paths().size();
  auto target = load_target_only(rc);
  target.labels.reset();  // adaptation never sees target labels
  auto p = load_pipeline(rc, target.d(), target.l(),
                         rc.synthetic ? rc.synth_classes : target.k);

  // source-free audit: nothing under the source path may have been opened
  if (!rc.synthetic) {
    for (std::size_t i = opened_before;
         i < ctsfda::opened_dataset_paths().size(); ++i)
      if (ctsfda::opened_dataset_paths()[i].rfind(rc.source_path, 0) == 0)
        throw ctsfda::InvariantError(
            "source-free contract violated: adapt opened " +
            ctsfda::opened_dataset_paths()[i]);
  }

  ctsfda::WarpBlock<Real> warp = rc.warp;
  warp.in_ch = target.d();
  ctsfda::TrainLog log;
  auto [phi, factors] = ctsfda::adapt_group_with(
      target, p.theta, p.unet, p.backbone_params, p.backbone, warp,
      warp.init(rc.seed ^ 0x7f4a7c15u), p.spec, rc.adapt, rc.sched, rc.seed,
      &log);
  const fs::path out(rc.out_dir);
  ctsfda::freeze(phi);
  ctsfda::save_checkpoint(phi, out / "checkpoints" / "warp");
  ctsfda::ModelParams<Real> scale;
  scale.add("v_t", ctsfda::Tensor<Real>({1}, {factors.v_t}));
  scale.add("v_s", ctsfda::Tensor<Real>({1}, {factors.v_s}));
  ctsfda::save_checkpoint(scale, out / "checkpoints" / "scale");
  print_log(log);
  append_run_json(out, log, rc.seed, rc.config_hash);
  return 0;
}

int cmd_eval(const std::string& config_path) {
  auto rc = load_run_config(config_path);
  auto [source, target] = load_pair(rc);
  const fs::path out(rc.out_dir);
  ctsfda::ScenarioResult r;
  ctsfda::TrainLog log_s3;
  if (fs::exists(out / "config.hash")) {
    auto p = load_pipeline(rc, source.d(), source.l(), source.k);
    r = ctsfda::run_scenario(source, target, rc, &p, &log_s3);
  } else {
    r = ctsfda::run_scenario(source, target, rc,
                             static_cast<ctsfda::Pipeline<Real>*>(nullptr),
                             &log_s3);
  }
  std::ostringstream run_id;
  run_id << std::hex << rc.config_hash << "-" << std::dec << rc.seed;
  const fs::path dir = out / "results" / run_id.str();
  ctsfda::write_scenario_files(r, dir);
  print_log(log_s3);
  std::cout << r.to_json().dump(2) << "\n";
  std::cout << "results written to " << dir << "\n";
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& suite) {
  auto rc = load_run_config(config_path);
  auto [source, target] = load_pair(rc);
  auto rows = ctsfda::run_ablation(suite, source, target, rc);
  std::ostringstream run_id;
  run_id << std::hex << rc.config_hash << "-" << std::dec << rc.seed;
  const fs::path dir =
      fs::path(rc.out_dir) / "results" / (run_id.str() + "-" + suite);
  ctsfda::write_ablation_files(suite, rows, dir);
  for (const auto& row : rows)
    std::cout << row.variant << "\t" << row.mf1 << "\n";
  std::cout << "results written to " << dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compositional time-series reconstruction for source-free "
               "domain adaptation"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth",
                                   "generate a synthetic source/target pair");
  std::int64_t classes = 3, n = 40, channels = 1, length = 256;
  ctsfda::ShiftConfig shift;
  std::string out_dir = "data/synthetic";
  synth->add_option("--classes", classes, "number of classes");
  synth->add_option("--n", n, "instances per class");
  synth->add_option("--channels", channels, "channels d");
  synth->add_option("--length", length, "series length L");
  synth->add_option("--shift-amplitude", shift.amplitude_scale,
                    "target amplitude scale");
  synth->add_option("--shift-warp", shift.time_warp_strength,
                    "time warp strength");
  synth->add_option("--shift-noise", shift.noise_sigma, "noise sigma");
  synth->add_option("--shift-offset", shift.channel_offset, "channel offset");
  synth->add_option("--seed", shift.seed, "generator seed");
  synth->add_option("--out", out_dir, "output directory");

  std::string config_path, suite = "branch";
  auto* pretrain = app.add_subcommand("pretrain",
                                      "stages 1-2: reconstructor + backbone");
  pretrain->add_option("--config", config_path)->required();
  auto* adapt = app.add_subcommand("adapt", "stage 3: group adaptation");
  adapt->add_option("--config", config_path)->required();
  auto* eval_cmd = app.add_subcommand("eval", "run a full scenario");
  eval_cmd->add_option("--config", config_path)->required();
  auto* ablate = app.add_subcommand("ablate", "run an ablation suite");
  ablate->add_option("--config", config_path)->required();
  ablate->add_option("--suite", suite,
                     "reconstructor-config | branch | loss | ia-weighting");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      if (const char* env = std::getenv("CT_SFDA_SEED"))
        shift.seed = static_cast<std::uint64_t>(std::stoull(env));
      return cmd_synth(classes, n, channels, length, shift, out_dir);
    }
    if (pretrain->parsed()) return cmd_pretrain(config_path);
    if (adapt->parsed()) return cmd_adapt(config_path);
    if (eval_cmd->parsed()) return cmd_eval(config_path);
    if (ablate->parsed()) return cmd_ablate(config_path, suite);
  } catch (const ctsfda::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 4;
  } catch (const ctsfda::InvariantError& e) {
    std::cerr << "invariant violation: " << e.what() << "\n";
    return 3;
  } catch (const ctsfda::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ctsfda::ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
