#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "unihand/datagen.hpp"
#include "unihand/error.hpp"
#include "unihand/trainer.hpp"

namespace {

using namespace unihand;

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  if (text == "train" || text == "test") {
    const auto r = text == "train" ? datagen::kTrainSeeds : datagen::kTestSeeds;
    std::vector<std::uint64_t> out;
    for (auto s = r.first; s <= r.last; ++s) out.push_back(s);
    return out;
  }
  std::vector<std::uint64_t> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const auto item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (!item.empty()) {
      const auto dash = item.find('-');
      if (dash == std::string::npos) {
        out.push_back(std::stoull(item));
      } else {
        const auto lo = std::stoull(item.substr(0, dash));
        const auto hi = std::stoull(item.substr(dash + 1));
        for (auto s = lo; s <= hi; ++s) out.push_back(s);
      }
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

std::vector<datagen::Stream> parse_streams(const std::string& text) {
  std::vector<datagen::Stream> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto comma = text.find(',', pos);
    const auto item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (item == "vision") out.push_back(datagen::Stream::vision);
    else if (item == "2d" || item == "keypoints2d") out.push_back(datagen::Stream::keypoints2d);
    else if (item == "3d" || item == "keypoints3d") out.push_back(datagen::Stream::keypoints3d);
    else if (item == "mano") out.push_back(datagen::Stream::mano);
    else if (item == "none" || item.empty()) {
    } else {
      throw UnknownKind("unknown condition stream: " + item);
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

hand::HandPose read_pose_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open pose file " + path);
  const auto doc = nlohmann::json::parse(in);
  const auto values = (doc.is_object() ? doc.at("pose") : doc).get<std::vector<double>>();
  if (values.size() != hand::kPoseDim) throw ShapeMismatch("pose file must hold 61 values");
  return hand::HandPose::from_vector(values);
}

struct SamplerFlags {
  std::string method = "ddim";
  int64_t steps = 10;
  double cfg_scale = 2.0;
  double eta = 0.0;
  std::string streams = "vision,2d";
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--method", method, "ddim or ddpm")->capture_default_str();
    app->add_option("--steps", steps, "DDIM steps")->capture_default_str();
    app->add_option("--cfg-scale", cfg_scale, "guidance scale")->capture_default_str();
    app->add_option("--eta", eta, "DDIM eta")->capture_default_str();
    app->add_option("--streams", streams, "comma list of vision,2d,3d,mano (or none)")->capture_default_str();
    app->add_option("--seed", seed, "sampling seed")->capture_default_str();
  }

  train::InferOptions options() const {
    train::InferOptions o;
    o.sampler.method = diffusion::parse_sampler_method(method);
    o.sampler.steps = steps;
    o.sampler.cfg_scale = cfg_scale;
    o.sampler.eta = eta;
    o.streams = parse_streams(streams);
    o.seed = seed;
    return o;
  }
};

train::TrainConfig training_config(const std::string& path, train::Stage stage) {
  train::TrainConfig config;
  if (!path.empty()) {
    config = train::load_config(path);
  } else {
    train::apply_seed_override(config);
  }
  config.stage = stage;
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unihand: synthetic hand-motion data, two-stage training, inference and evaluation"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "worker threads; 1 is deterministic")->capture_default_str();

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic split");
  std::string seeds_text = "train", out_dir, camera_mode = "static", regime = "clean";
  datagen::GenSpec spec;
  gen->add_option("--seeds", seeds_text, "train, test, or a list like 0-9,20")->capture_default_str();
  gen->add_option("--out-dir", out_dir, "output directory")->required();
  gen->add_option("--camera-mode", camera_mode, "static or dynamic")->capture_default_str();
  gen->add_option("--occlusion-regime", regime, "clean or bursty")->capture_default_str();
  gen->add_option("--frames", spec.frames, "frames per scene")->capture_default_str();
  gen->add_option("--keyframes", spec.keyframes, "spline keyframes")->capture_default_str();

  // train-vae / train-diffusion
  std::string config_path, data_dir, ckpt_out, vae_ckpt;
  std::optional<std::uint64_t> train_seed;
  std::optional<int64_t> iters;
  auto* tvae = app.add_subcommand("train-vae", "stage 1: train the joint VAE");
  auto* tdiff = app.add_subcommand("train-diffusion", "stage 2: train the denoiser on a frozen VAE");
  for (auto* sub : {tvae, tdiff}) {
    sub->add_option("--config", config_path, "JSON training config");
    sub->add_option("--data", data_dir, "split directory with manifest.json")->required();
    sub->add_option("--out", ckpt_out, "checkpoint path (overrides config)");
    sub->add_option("--seed", train_seed, "overrides config and UNIHAND_SEED");
    sub->add_option("--iters", iters, "overrides total_iters");
  }
  tdiff->add_option("--vae", vae_ckpt, "stage-1 checkpoint (overrides config)");

  // infer
  auto* inf = app.add_subcommand("infer", "sample a motion for one scene");
  std::string scene_path, first_pose_path, motion_out, diff_ckpt;
  SamplerFlags infer_flags;
  inf->add_option("--vae", vae_ckpt, "stage-1 checkpoint")->required();
  inf->add_option("--diffusion", diff_ckpt, "stage-2 checkpoint")->required();
  inf->add_option("--scene", scene_path, "scene file")->required();
  inf->add_option("--first-pose", first_pose_path, "JSON with 61 pose values (default: scene ground truth)");
  inf->add_option("--out", motion_out, "output JSON (default: stdout)");
  infer_flags.add(inf);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate on a split and write CSV/JSON reports");
  std::string csv_out = "report.csv", json_out = "report.json";
  SamplerFlags eval_flags;
  ev->add_option("--vae", vae_ckpt, "stage-1 checkpoint")->required();
  ev->add_option("--diffusion", diff_ckpt, "stage-2 checkpoint")->required();
  ev->add_option("--data", data_dir, "split directory")->required();
  ev->add_option("--csv", csv_out, "CSV report path")->capture_default_str();
  ev->add_option("--json", json_out, "JSON report path")->capture_default_str();
  eval_flags.add(ev);

  CLI11_PARSE(app, argc, argv);

  try {
    torch::set_num_threads(std::max(1, threads));
    if (gen->parsed()) {
      spec.camera_mode = datagen::parse_camera_mode(camera_mode);
      spec.occlusion = datagen::parse_occlusion_regime(regime);
      const auto seeds = parse_seeds(seeds_text);
      const auto manifest = datagen::generate_split(seeds, spec, out_dir, threads);
      std::cout << "wrote " << manifest.at("scenes").size() << " scenes to " << out_dir << '\n';
    } else if (tvae->parsed() || tdiff->parsed()) {
      auto config = training_config(config_path, tvae->parsed() ? train::Stage::vae : train::Stage::diffusion);
      if (train_seed) config.seed = *train_seed;
      if (iters) {
        config.total_iters = *iters;
        config.warmup_iters = std::min(config.warmup_iters, *iters);
      }
      if (!ckpt_out.empty()) config.checkpoint_out = ckpt_out;
      if (!vae_ckpt.empty()) config.vae_checkpoint = vae_ckpt;
      if (config.checkpoint_out.empty()) throw Error("no checkpoint path: pass --out or set checkpoint_out");
      config.validate();
      const auto scenes = train::load_split(data_dir);
      const auto losses = tvae->parsed() ? train::train_stage1_vae(config, scenes).losses
                                         : train::train_stage2_diffusion(config, scenes).losses;
      std::cout << "trained " << losses.size() << " iterations, final loss " << (losses.empty() ? 0.0 : losses.back())
                << ", checkpoint " << config.checkpoint_out << '\n';
    } else if (inf->parsed()) {
      auto vae = train::load_vae(vae_ckpt);
      auto model = train::load_diffusion(diff_ckpt);
      const auto scene = datagen::load_scene(scene_path);
      const auto conditions = datagen::render_conditions(scene);
      const auto first = first_pose_path.empty() ? scene.motion.front() : read_pose_file(first_pose_path);
      const auto result = train::infer(vae, model, train::scene_batch(scene, conditions), first, infer_flags.options());
      nlohmann::json doc = {{"frames", result.motion.size()}, {"padded_frames", result.padded_frames}};
      doc["motion"] = nlohmann::json::array();
      for (const auto& p : result.motion) doc["motion"].push_back(p.to_vector());
      if (motion_out.empty()) {
        std::cout << doc.dump() << '\n';
      } else {
        std::ofstream(motion_out) << doc.dump(2) << '\n';
      }
    } else if (ev->parsed()) {
      auto vae = train::load_vae(vae_ckpt);
      auto model = train::load_diffusion(diff_ckpt);
      const auto scenes = train::load_split(data_dir);
      const auto report = train::evaluate(vae, model, scenes, eval_flags.options(), csv_out, json_out);
      const auto& all = report.aggregates.front().metrics;
      std::cout << "scenes " << report.scenes.size() << " PA-MPJPE " << all.pa_mpjpe << " mm, AUC_J " << all.auc_j
                << ", F@5 " << all.f5 << ", F@15 " << all.f15 << ", G-MPJPE " << all.g_mpjpe << " mm, GA-MPJPE "
                << all.ga_mpjpe << " mm, AccEr " << all.acc_err << " mm/frame^2\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
