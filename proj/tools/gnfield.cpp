// Command-line front end: dataset generation, training, rendering,
// cross-scene evaluation, gradient checking, and embedding export.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "gnfield/evaluation.hpp"
#include "gnfield/trainer.hpp"

using namespace gnfield;

namespace {

std::vector<SceneDataset> load_split(const std::string& root, const std::vector<std::string>& ids,
                                     bool with_depth = false) {
  std::vector<SceneDataset> scenes;
  for (const std::string& id : ids) scenes.push_back(load_scene_dataset(root, id, with_depth));
  return scenes;
}

struct LoadedModel {
  CheckpointData ckpt;
  std::unique_ptr<Model<float>> model;
};

LoadedModel load_model(const std::string& ckpt_path) {
  LoadedModel lm;
  lm.ckpt = load_checkpoint(ckpt_path);
  lm.model = std::make_unique<Model<float>>(lm.ckpt.config.model_config());
  restore_store(lm.model->store, lm.ckpt);
  return lm;
}

Pose parse_pose(const std::string& csv) {
  std::vector<double> vals;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) vals.push_back(std::stod(tok));
  if (vals.size() != 16) throw std::invalid_argument("--pose expects 16 comma-separated values");
  Pose p;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) p.R[r * 3 + c] = vals[static_cast<size_t>(r * 4 + c)];
  p.t = {vals[3], vals[7], vals[11]};
  if (!p.rotation_orthonormal(1e-4))
    throw std::invalid_argument("--pose rotation block is not orthonormal");
  return p;
}

int run(int argc, char** argv) {
  CLI::App app{"gnfield: hypernetwork-conditioned generalizable neural fields on toy scenes"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a procedural multi-view dataset");
  int g_scenes = 10, g_views = 24;
  std::string g_res = "64x64", g_out, g_difficulty = "medium";
  uint64_t g_seed = 0;
  double g_heldout = 0.2;
  gen->add_option("--scenes", g_scenes, "number of scenes");
  gen->add_option("--views", g_views, "views per scene");
  gen->add_option("--res", g_res, "resolution WxH");
  gen->add_option("--seed", g_seed, "dataset seed");
  gen->add_option("--out", g_out, "output directory")->required();
  gen->add_option("--difficulty", g_difficulty, "small|medium");
  gen->add_option("--heldout-frac", g_heldout, "fraction of scenes held out");

  // train
  auto* train = app.add_subcommand("train", "train a model from a config file");
  std::string t_config, t_resume;
  uint64_t t_seed = 0;
  bool t_seed_set = false;
  train->add_option("--config", t_config, "key=value config file")->required();
  train->add_option("--resume", t_resume, "checkpoint to resume from");
  train->add_option("--seed", t_seed, "override the config seed")->each([&](const std::string&) {
    t_seed_set = true;
  });

  // render
  auto* render = app.add_subcommand("render", "render one view of a scene");
  std::string r_ckpt, r_scene, r_pose, r_out;
  int r_view_idx = -1, r_chunk = 2048, r_stride = 1;
  uint64_t r_seed = 0;
  render->add_option("--ckpt", r_ckpt)->required();
  render->add_option("--scene", r_scene, "scene directory (with cameras.json)")->required();
  render->add_option("--view-idx", r_view_idx, "render this dataset view");
  render->add_option("--pose", r_pose, "16 comma-separated row-major world-to-cam values");
  render->add_option("--out", r_out, "output prefix (.png and .pfm)")->required();
  render->add_option("--chunk", r_chunk, "rays per chunk");
  render->add_option("--stride", r_stride, "render every Nth pixel");
  render->add_option("--seed", r_seed);

  // eval
  auto* eval = app.add_subcommand("eval", "cross-scene evaluation");
  std::string e_ckpt, e_data, e_split = "heldout", e_out = "-";
  int e_stride = 1, e_chunk = 2048;
  uint64_t e_seed = 0;
  eval->add_option("--ckpt", e_ckpt)->required();
  eval->add_option("--data", e_data)->required();
  eval->add_option("--split", e_split, "train|heldout");
  eval->add_option("--stride", e_stride);
  eval->add_option("--chunk", e_chunk);
  eval->add_option("--out", e_out, "report JSON path ('-' for stdout)");
  eval->add_option("--seed", e_seed);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check (float64)");
  std::string gc_config;
  int gc_max = 512;
  double gc_tol = 1e-4;
  uint64_t gc_seed = 0;
  bool gc_seed_set = false;
  gc->add_option("--config", gc_config)->required();
  gc->add_option("--max-params", gc_max);
  gc->add_option("--tol", gc_tol, "failure threshold on max relative error");
  gc->add_option("--seed", gc_seed)->each([&](const std::string&) { gc_seed_set = true; });

  // export-embeddings
  auto* ex = app.add_subcommand("export-embeddings", "CSV of mean-pooled H_0 per sampled ray");
  std::string x_ckpt, x_data, x_out, x_split = "all";
  int x_rays = 64;
  uint64_t x_seed = 0;
  ex->add_option("--ckpt", x_ckpt)->required();
  ex->add_option("--data", x_data)->required();
  ex->add_option("--out", x_out)->required();
  ex->add_option("--rays", x_rays, "rays per scene");
  ex->add_option("--split", x_split, "train|heldout|all");
  ex->add_option("--seed", x_seed);

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    const size_t x = g_res.find('x');
    if (x == std::string::npos) throw std::invalid_argument("--res expects WxH");
    const int w = std::stoi(g_res.substr(0, x));
    const int h = std::stoi(g_res.substr(x + 1));
    const Difficulty diff = g_difficulty == "small" ? Difficulty::kSmall : Difficulty::kMedium;
    std::filesystem::create_directories(g_out);
    const DatasetManifest m =
        generate_dataset(g_out, g_scenes, g_views, w, h, g_seed, diff, g_heldout);
    std::printf("wrote %zu train + %zu heldout scenes to %s\n", m.train_scenes.size(),
                m.heldout_scenes.size(), g_out.c_str());
    return 0;
  }

  if (train->parsed()) {
    TrainConfig cfg = load_train_config(t_config);
    if (t_seed_set) cfg.seed = t_seed;
    if (cfg.data_dir.empty()) throw std::invalid_argument("config: data_dir is required");
    const DatasetManifest m = load_dataset_manifest(cfg.data_dir);
    Trainer<float> trainer(cfg, load_split(cfg.data_dir, m.train_scenes));
    if (!t_resume.empty()) trainer.restore(load_checkpoint(t_resume));
    const auto dir = std::filesystem::path(cfg.out_checkpoint).parent_path();
    if (!dir.empty()) std::filesystem::create_directories(dir);
    while (trainer.step_index() < cfg.steps) {
      const LossReport r = trainer.step();
      if (cfg.log_every > 0 && (r.step % cfg.log_every == 0 || r.step + 1 == cfg.steps))
        std::printf("step=%lld mse=%.6f backbone=%.6f dy=%.6f total=%.6f\n",
                    static_cast<long long>(r.step), r.l_mse, r.l_backbone, r.l_dy, r.total);
      if (cfg.checkpoint_every > 0 && (r.step + 1) % cfg.checkpoint_every == 0)
        trainer.save(cfg.out_checkpoint);
    }
    trainer.save(cfg.out_checkpoint);
    std::printf("saved %s at step %lld\n", cfg.out_checkpoint.c_str(),
                static_cast<long long>(trainer.step_index()));
    return 0;
  }

  if (render->parsed()) {
    LoadedModel lm = load_model(r_ckpt);
    const std::filesystem::path scene_path(r_scene);
    const SceneDataset scene = load_scene_dataset(scene_path.parent_path().string(),
                                                  scene_path.filename().string(), false);
    CameraView target;
    int exclude = -1;
    if (r_view_idx >= 0) {
      if (r_view_idx >= static_cast<int>(scene.views.size()))
        throw std::invalid_argument("--view-idx out of range");
      target = scene.views[static_cast<size_t>(r_view_idx)];
      exclude = r_view_idx;
    } else if (!r_pose.empty()) {
      target.intr = scene.views.at(0).intr;
      target.world_to_cam = parse_pose(r_pose);
    } else {
      throw std::invalid_argument("render: need --view-idx or --pose");
    }
    const SceneFeatureCache<float> cache = build_feature_cache(*lm.model, scene);
    const RenderedView rv = render_view(*lm.model, scene, cache, target, exclude,
                                        lm.ckpt.config.n_references, r_chunk, r_stride);
    save_png(r_out + ".png", rv.rgb);
    save_pfm(r_out + ".pfm", rv.depth);
    std::printf("wrote %s.png and %s.pfm\n", r_out.c_str(), r_out.c_str());
    return 0;
  }

  if (eval->parsed()) {
    LoadedModel lm = load_model(e_ckpt);
    const DatasetManifest m = load_dataset_manifest(e_data);
    const std::vector<std::string>& ids =
        e_split == "heldout" ? m.heldout_scenes : m.train_scenes;
    if (e_split != "heldout" && e_split != "train")
      throw std::invalid_argument("--split must be train or heldout");
    const std::vector<std::string> guard =
        e_split == "heldout" ? lm.ckpt.train_scenes : std::vector<std::string>{};
    const EvalReport report =
        evaluate(*lm.model, e_data, ids, guard, lm.ckpt.config, e_stride, e_chunk);
    const std::string text = report.to_json().dump(1) + "\n";
    if (e_out == "-") {
      std::fputs(text.c_str(), stdout);
    } else {
      std::ofstream f(e_out);
      if (!f) throw std::runtime_error("cannot write " + e_out);
      f << text;
    }
    return 0;
  }

  if (gc->parsed()) {
    TrainConfig cfg = load_train_config(gc_config);
    if (gc_seed_set) cfg.seed = gc_seed;
    if (cfg.data_dir.empty()) throw std::invalid_argument("config: data_dir is required");
    const DatasetManifest m = load_dataset_manifest(cfg.data_dir);
    Trainer<double> trainer(cfg, load_split(cfg.data_dir, m.train_scenes));
    const GradCheckReport report = gradcheck(trainer, gc_max);
    for (const GradCheckGroup& g : report.groups)
      std::printf("group=%s checked=%d max_rel_err=%.6e\n", g.name.c_str(), g.checked,
                  g.max_rel_err);
    std::printf("overall checked=%d max_rel_err=%.6e\n", report.checked, report.max_rel_err);
    if (report.max_rel_err >= gc_tol)
      throw std::runtime_error("gradcheck failed: max relative error " +
                               std::to_string(report.max_rel_err) + " >= tolerance");
    return 0;
  }

  if (ex->parsed()) {
    LoadedModel lm = load_model(x_ckpt);
    const DatasetManifest m = load_dataset_manifest(x_data);
    std::vector<std::string> ids;
    if (x_split == "train" || x_split == "all")
      ids.insert(ids.end(), m.train_scenes.begin(), m.train_scenes.end());
    if (x_split == "heldout" || x_split == "all")
      ids.insert(ids.end(), m.heldout_scenes.begin(), m.heldout_scenes.end());
    if (ids.empty()) throw std::invalid_argument("--split matched no scenes");
    export_embeddings(*lm.model, x_data, ids, x_rays, x_out, x_seed,
                      lm.ckpt.config.n_references);
    std::printf("wrote %s\n", x_out.c_str());
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
