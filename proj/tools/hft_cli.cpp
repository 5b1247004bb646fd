// Command-line front end: dataset generation, training, evaluation,
// ablations, visualization and parameter accounting.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "hft/harness.hpp"

namespace {

std::vector<int> parse_id_list(const std::string& csv) {
  std::vector<int> ids;
  std::stringstream ss(csv);
  std::string token;
  while (std::getline(ss, token, ',')) {
    if (token.empty()) continue;
    try {
      ids.push_back(std::stoi(token));
    } catch (const std::exception&) {
      throw hft::ConfigError("--ids: cannot parse '" + token + "' as an integer");
    }
  }
  if (ids.empty()) throw hft::ConfigError("--ids: empty id list");
  return ids;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HFT: hybrid frontal-view to BEV feature transformation toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::string gen_config, gen_out;
  std::uint64_t gen_seed = 0;
  gen->add_option("--config", gen_config, "Generation config JSON")->required();
  gen->add_option("--out", gen_out, "Output dataset directory")->required();
  gen->add_option("--seed", gen_seed, "Root seed")->required();

  // train
  auto* train = app.add_subcommand("train", "Train a model");
  std::string train_config, train_out, train_resume;
  train->add_option("--config", train_config, "Run config JSON")->required();
  train->add_option("--out", train_out, "Output directory (overrides config out_dir)")->required();
  train->add_option("--resume", train_resume, "Checkpoint to resume from");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  std::string eval_ckpt, eval_data, eval_split = "val", eval_report;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--split", eval_split, "Split name");
  eval->add_option("--report", eval_report, "Write the metric report JSON here")->required();

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Run an ablation along one axis");
  std::string ab_config, ab_axis, ab_out;
  ablate->add_option("--config", ab_config, "Base run config JSON")->required();
  ablate->add_option("--axis", ab_axis, "scheme | distance | mode")->required();
  ablate->add_option("--out", ab_out, "Output directory")->required();

  // viz
  auto* viz = app.add_subcommand("viz", "Render FV / predicted BEV / GT BEV images");
  std::string viz_ckpt, viz_data, viz_ids, viz_out;
  viz->add_option("--checkpoint", viz_ckpt, "Checkpoint file")->required();
  viz->add_option("--data", viz_data, "Dataset directory")->required();
  viz->add_option("--ids", viz_ids, "Comma-separated sample ids")->required();
  viz->add_option("--out", viz_out, "Output directory")->required();

  // params
  auto* params = app.add_subcommand("params", "Print per-module parameter counts for all modes");
  std::string params_config;
  params->add_option("--config", params_config, "Run config JSON")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto cfg = hft::GenConfig::from_file(gen_config);
      hft::generate_dataset(cfg, gen_out, gen_seed);
      std::cout << "wrote dataset to " << gen_out << "\n";
    } else if (train->parsed()) {
      auto cfg = hft::RunConfig::from_file(train_config);
      cfg.out_dir = train_out;
      const auto result = hft::train_run(cfg, train_resume);
      for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << "best val mIoU " << result.best_val_miou << "\n";
      std::cout << "best checkpoint: " << result.best_checkpoint << "\n";
      std::cout << "last checkpoint: " << result.last_checkpoint << "\n";
    } else if (eval->parsed()) {
      const auto report = hft::evaluate_checkpoint(eval_ckpt, eval_data, eval_split, eval_report);
      std::cout << report.to_json().dump(2) << "\n";
    } else if (ablate->parsed()) {
      auto cfg = hft::RunConfig::from_file(ab_config);
      const auto result = hft::ablate_run(cfg, ab_axis, ab_out);
      std::cout << result.to_text();
    } else if (viz->parsed()) {
      hft::visualize_run(viz_ckpt, viz_data, parse_id_list(viz_ids), viz_out);
      std::cout << "wrote visualizations to " << viz_out << "\n";
    } else if (params->parsed()) {
      const auto cfg = hft::RunConfig::from_file(params_config);
      const auto j = hft::params_report(cfg);
      std::cout << hft::params_report_text(j);
      std::cout << j.dump(2) << "\n";
    }
  } catch (const hft::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const hft::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const hft::NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
