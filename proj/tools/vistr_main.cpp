// vistr command-line tool: synthetic dataset generation, training, inference,
// evaluation and a self-test battery.

#include <iostream>

#include <CLI11.hpp>

#include "vistr/selftest.hpp"
#include "vistr/trainer.hpp"

namespace {

int cmd_gen_data(const std::string& config_path, const std::string& out_dir) {
  auto cfg = vistr::Config::parse_file(config_path);
  vistr::apply_env_seed(cfg);
  auto sc = vistr::synth_config_from(cfg);
  std::vector<vistr::DatasetClip> clips;
  for (int64_t c = 0; c < sc.clips; ++c) {
    auto [clip, truths] = vistr::generate_clip(sc, c);
    clips.push_back({c, std::move(clip), std::move(truths)});
  }
  vistr::save_dataset(out_dir, clips);
  std::cout << "wrote " << clips.size() << " clips to " << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              bool force_deterministic) {
  auto cfg = vistr::Config::parse_file(config_path);
  vistr::apply_env_seed(cfg);
  if (force_deterministic) cfg.set("train.deterministic", true);
  try {
    auto res = vistr::train(cfg, out_dir);
    std::cout << "trained " << res.steps << " steps, final loss " << res.final_loss
              << "\ncheckpoint: " << res.checkpoint_path << "\n";
  } catch (const vistr::train_abort_error& e) {
    std::cerr << "training aborted: " << e.what() << "\nsee " << out_dir
              << "/nan_dump.txt for the offending batch\n";
    return 3;
  }
  return 0;
}

int cmd_infer(const std::string& config_path, const std::string& checkpoint,
              const std::string& data_dir, const std::string& out_path,
              const std::string& overlay_dir) {
  auto cfg = vistr::Config::parse_file(config_path);
  vistr::apply_env_seed(cfg);
  auto mc = vistr::model_config_from(cfg);
  vistr::Rng rng(0);
  vistr::VisTRModel<float> model(mc, rng);
  model.load_checkpoint(checkpoint);
  std::string dir = data_dir.empty() ? vistr::train_config_from(cfg).data_dir : data_dir;
  auto ds = vistr::load_dataset(dir);
  vistr::detail::validate_dataset_against(ds, mc);
  auto results = vistr::run_inference(model, ds);
  vistr::save_results(out_path, results);
  std::cout << "wrote " << results.size() << " results to " << out_path << "\n";
  if (!overlay_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(overlay_dir);
    for (const auto& dc : ds.clips) {
      std::vector<const vistr::InstanceResult*> mine;
      for (const auto& r : results)
        if (r.video_id == dc.video_id) mine.push_back(&r);
      for (int64_t t = 0; t < ds.T; ++t) {
        std::vector<const vistr::BinaryMask*> masks;
        for (const auto* r : mine) masks.push_back(&r->masks[t]);
        auto frame = vistr::reshape(vistr::slice(dc.clip.frames, {{t, t + 1}}),
                                    {3, ds.H0, ds.W0});
        char name[64];
        std::snprintf(name, sizeof(name), "%s_f%02d.ppm", dc.clip.clip_id.c_str(),
                      static_cast<int>(t));
        vistr::write_overlay_ppm((fs::path(overlay_dir) / name).string(), frame, masks);
      }
    }
    std::cout << "overlays in " << overlay_dir << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& results_path, const std::string& annotations_dir,
             const std::string& out_path) {
  auto ds = vistr::load_dataset(annotations_dir, /*load_frames=*/false);
  auto results = vistr::load_results(results_path, ds.H0, ds.W0);
  auto rep = vistr::evaluate(results, vistr::truths_by_video(ds), ds.category_ids);
  std::cout << "AP " << rep.AP << "  AP50 " << rep.AP50 << "  AP75 " << rep.AP75
            << "  AR1 " << rep.AR1 << "  AR10 " << rep.AR10 << "\n";
  if (!out_path.empty()) vistr::save_report(out_path, rep);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VisTR-style video instance segmentation at desk scale"};
  app.require_subcommand(1);

  std::string config_path, out_path, checkpoint, data_dir, results_path, annotations_dir,
      overlay_dir;
  bool deterministic = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--config", config_path, "config file")->required();
  gen->add_option("--out", out_path, "output directory")->required();

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--out", out_path, "run directory")->default_val("runs/default");
  train->add_flag("--deterministic", deterministic, "force deterministic mode");

  auto* infer = app.add_subcommand("infer", "run inference and write results JSON");
  infer->add_option("--config", config_path, "config file")->required();
  infer->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  infer->add_option("--data", data_dir, "dataset directory (default: data.dir from config)");
  infer->add_option("--out", out_path, "results JSON path")->default_val("results.json");
  infer->add_option("--overlays", overlay_dir, "directory for mask overlay images");

  auto* eval = app.add_subcommand("eval", "evaluate results against annotations");
  eval->add_option("--results", results_path, "results JSON")->required();
  eval->add_option("--annotations", annotations_dir, "dataset directory")->required();
  eval->add_option("--out", out_path, "report JSON path")->default_val("report.json");

  auto* selftest = app.add_subcommand("selftest", "run the verification battery");
  (void)selftest;

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_path);
    if (train->parsed()) return cmd_train(config_path, out_path, deterministic);
    if (infer->parsed())
      return cmd_infer(config_path, checkpoint, data_dir, out_path, overlay_dir);
    if (eval->parsed()) return cmd_eval(results_path, annotations_dir, out_path);
    if (selftest->parsed()) return vistr::run_selftest() ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
