#include "unihand/trainer.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "unihand/archive.hpp"
#include "unihand/error.hpp"
#include "unihand/random.hpp"

namespace unihand::train {
namespace {

using datagen::Stream;
using vae::ConditionKind;

constexpr std::uint64_t kBatchStream = 1'000'000;
constexpr std::uint64_t kInitStream = 2'000'000;
constexpr std::uint64_t kScaleStream = 3'000'000;

Stream stream_for(ConditionKind kind) {
  switch (kind) {
    case ConditionKind::keypoints2d: return Stream::keypoints2d;
    case ConditionKind::keypoints3d: return Stream::keypoints3d;
    case ConditionKind::mano: return Stream::mano;
  }
  throw UnknownKind("condition kind");
}

std::size_t idx(ConditionKind kind) { return static_cast<std::size_t>(kind); }

torch::Tensor mask_tensor(const std::vector<std::uint8_t>& mask) {
  std::vector<float> v(mask.begin(), mask.end());
  return torch::tensor(v, torch::kFloat32);
}

template <typename Rows>
torch::Tensor rows_tensor(const std::vector<Rows>& rows) {
  const auto n = static_cast<int64_t>(rows.size());
  const auto width = static_cast<int64_t>(Rows::RowsAtCompileTime * Rows::ColsAtCompileTime);
  auto out = torch::empty({n, width}, torch::kFloat32);
  auto acc = out.accessor<float, 2>();
  for (int64_t i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    for (int64_t k = 0; k < width; ++k) acc[i][k] = static_cast<float>(r.data()[k]);
  }
  return out;
}

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

void check_finite(const torch::Tensor& loss, int64_t iter, const std::string& detail) {
  const double v = loss.item<double>();
  if (!std::isfinite(v)) {
    throw NonFiniteLoss("non-finite loss at iteration " + std::to_string(iter) + " (" + detail + ")");
  }
}

std::vector<torch::Tensor> gradients(const std::vector<torch::Tensor>& params) {
  std::vector<torch::Tensor> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(p.grad().defined() ? p.grad() : torch::zeros_like(p));
  return grads;
}

AdamHyper hyper_for(const TrainConfig& config, int64_t iter) {
  AdamHyper h;
  h.lr = lr_at(iter, config);
  h.weight_decay = config.weight_decay;
  return h;
}

/// Zeroes a random subset of frames in every stream for some samples.
void drop_frames(Batch& batch, double probability, Rng& rng) {
  if (probability <= 0.0) return;
  const int64_t b = batch.size(), n = batch.frames();
  auto keep = torch::ones({b, n}, torch::kFloat32);
  auto acc = keep.accessor<float, 2>();
  for (int64_t i = 0; i < b; ++i) {
    if (!rng.bernoulli(probability)) continue;
    const double fraction = rng.uniform(0.2, 0.7);
    for (int64_t f = 0; f < n; ++f) {
      if (rng.bernoulli(fraction)) acc[i][f] = 0.0f;
    }
  }
  for (auto& m : batch.masks) m = m * keep;
  batch.vision_mask = batch.vision_mask * keep;
}

nlohmann::json scales_json(double z, double g) { return {{"z", z}, {"g", g}}; }

// Config as stored in checkpoints: file locations are left out so that
// identical runs in different directories produce identical bytes.
nlohmann::json stored_config(const TrainConfig& config) {
  nlohmann::json j = config;
  j.erase("checkpoint_out");
  j.erase("vae_checkpoint");
  return j;
}

}  // namespace

Stage parse_stage(std::string_view name) {
  if (name == "vae") return Stage::vae;
  if (name == "diffusion") return Stage::diffusion;
  throw UnknownKind("unknown stage: " + std::string(name));
}

std::string_view to_string(Stage stage) { return stage == Stage::vae ? "vae" : "diffusion"; }

void adamw_step(std::vector<torch::Tensor>& params, const std::vector<torch::Tensor>& grads, AdamState& state,
                const AdamHyper& hyper) {
  if (params.size() != grads.size()) throw ShapeMismatch("adamw_step: params and grads differ in count");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(torch::zeros_like(p));
      state.v.push_back(torch::zeros_like(p));
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeMismatch("adamw_step: moment count differs from params");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].sizes() != grads[i].sizes() || params[i].sizes() != state.m[i].sizes() ||
        params[i].sizes() != state.v[i].sizes()) {
      throw ShapeMismatch("adamw_step: shape mismatch at parameter " + std::to_string(i));
    }
  }
  torch::NoGradGuard no_grad;
  state.step += 1;
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const auto& g = grads[i];
    p.mul_(1.0 - hyper.lr * hyper.weight_decay);
    state.m[i].mul_(hyper.beta1).add_(g, 1.0 - hyper.beta1);
    state.v[i].mul_(hyper.beta2).addcmul_(g, g, 1.0 - hyper.beta2);
    auto denom = (state.v[i] / c2).sqrt_().add_(hyper.eps);
    p.addcdiv_(state.m[i], denom, -hyper.lr / c1);
  }
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw Error("TrainConfig: lr must be positive");
  if (warmup_iters < 0 || total_iters < 0 || warmup_iters > total_iters) {
    throw Error("TrainConfig: need 0 <= warmup_iters <= total_iters");
  }
  if (batch_size < 1) throw Error("TrainConfig: batch_size must be positive");
  if (window < vae.segment_length || window % vae.segment_length != 0) {
    throw LengthNotMultiple("TrainConfig: window must be a positive multiple of the segment length");
  }
  if (diffusion_steps < 1) throw Error("TrainConfig: diffusion_steps must be positive");
  vae.validate();
  denoiser.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"stage", std::string(to_string(c.stage))},
       {"lr", c.lr},
       {"warmup_iters", c.warmup_iters},
       {"total_iters", c.total_iters},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"window", c.window},
       {"weight_decay", c.weight_decay},
       {"vae_weights", c.vae_weights},
       {"diff_weights", {{"rec", c.diff_weights.rec}}},
       {"vae", c.vae},
       {"denoiser", c.denoiser},
       {"diffusion_steps", c.diffusion_steps},
       {"condition_dropout", c.condition_dropout},
       {"stream_dropout", c.stream_dropout},
       {"frame_dropout", c.frame_dropout},
       {"checkpoint_out", c.checkpoint_out},
       {"vae_checkpoint", c.vae_checkpoint},
       {"log_every", c.log_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("stage")) c.stage = parse_stage(j.at("stage").get<std::string>());
  c.lr = j.value("lr", c.lr);
  c.warmup_iters = j.value("warmup_iters", c.warmup_iters);
  c.total_iters = j.value("total_iters", c.total_iters);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.window = j.value("window", c.window);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.contains("vae_weights")) c.vae_weights = j.at("vae_weights").get<vae::VaeLossWeights>();
  if (j.contains("diff_weights")) c.diff_weights.rec = j.at("diff_weights").value("rec", c.diff_weights.rec);
  if (j.contains("vae")) {
    const auto& v = j.at("vae");
    if (v.is_string()) {
      c.vae = v.get<std::string>() == "paper" ? vae::VaeConfig::paper() : vae::VaeConfig::desk();
    } else {
      c.vae = v.get<vae::VaeConfig>();
    }
  }
  if (j.contains("denoiser")) {
    const auto& d = j.at("denoiser");
    if (d.is_string()) {
      c.denoiser = d.get<std::string>() == "paper" ? diffusion::DenoiserConfig::paper() : diffusion::DenoiserConfig::desk();
    } else {
      c.denoiser = d.get<diffusion::DenoiserConfig>();
    }
  }
  c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
  c.condition_dropout = j.value("condition_dropout", c.condition_dropout);
  c.stream_dropout = j.value("stream_dropout", c.stream_dropout);
  c.frame_dropout = j.value("frame_dropout", c.frame_dropout);
  c.checkpoint_out = j.value("checkpoint_out", c.checkpoint_out);
  c.vae_checkpoint = j.value("vae_checkpoint", c.vae_checkpoint);
  c.log_every = j.value("log_every", c.log_every);
}

void apply_seed_override(TrainConfig& config) {
  if (const char* env = std::getenv("UNIHAND_SEED"); env != nullptr && *env != '\0') {
    config.seed = std::stoull(env);
  }
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config " + path.string());
  auto config = nlohmann::json::parse(in).get<TrainConfig>();
  apply_seed_override(config);
  config.validate();
  return config;
}

double lr_at(int64_t iter, const TrainConfig& config) {
  if (iter < 0) throw Error("lr_at: negative iteration");
  if (iter >= config.total_iters) return 0.0;
  if (iter < config.warmup_iters) {
    return config.lr * static_cast<double>(iter) / static_cast<double>(config.warmup_iters);
  }
  return config.lr * static_cast<double>(config.total_iters - iter) /
         static_cast<double>(config.total_iters - config.warmup_iters);
}

Batch scene_batch(const datagen::SyntheticScene& scene, const datagen::ConditionSet& conditions) {
  Batch b;
  b.x = hand::poses_to_tensor(scene.motion).unsqueeze(0);
  b.conditions[idx(ConditionKind::keypoints2d)] = rows_tensor(conditions.keypoints2d).unsqueeze(0);
  b.conditions[idx(ConditionKind::keypoints3d)] = rows_tensor(conditions.keypoints3d).unsqueeze(0);
  b.conditions[idx(ConditionKind::mano)] = hand::poses_to_tensor(conditions.mano).unsqueeze(0);
  for (auto kind : vae::kAllConditionKinds) {
    b.masks[idx(kind)] = mask_tensor(conditions.masks[static_cast<std::size_t>(stream_for(kind))]).unsqueeze(0);
  }
  b.grid = conditions.vision.to_tensor().unsqueeze(0);
  b.vision_mask = mask_tensor(conditions.masks[static_cast<std::size_t>(Stream::vision)]).unsqueeze(0);
  return b;
}

Batch stack_batches(const std::vector<Batch>& parts) {
  if (parts.empty()) throw ShapeMismatch("stack_batches: nothing to stack");
  auto cat = [&](auto field) {
    std::vector<torch::Tensor> ts;
    for (const auto& p : parts) ts.push_back(field(p));
    return torch::cat(ts, 0);
  };
  Batch out;
  out.x = cat([](const Batch& b) { return b.x; });
  for (std::size_t k = 0; k < 3; ++k) {
    out.conditions[k] = cat([k](const Batch& b) { return b.conditions[k]; });
    out.masks[k] = cat([k](const Batch& b) { return b.masks[k]; });
  }
  out.grid = cat([](const Batch& b) { return b.grid; });
  out.vision_mask = cat([](const Batch& b) { return b.vision_mask; });
  return out;
}

Batch pad_batch(const Batch& batch, int64_t frames) {
  Batch out;
  out.x = vae::pad_repeat_last(batch.x, frames);
  for (std::size_t k = 0; k < 3; ++k) {
    out.conditions[k] = vae::pad_repeat_last(batch.conditions[k], frames);
    out.masks[k] = vae::pad_repeat_last(batch.masks[k], frames);
  }
  out.grid = vae::pad_repeat_last(batch.grid, frames);
  out.vision_mask = vae::pad_repeat_last(batch.vision_mask, frames);
  return out;
}

Batch slice_batch(const Batch& batch, int64_t frames) {
  Batch out;
  out.x = batch.x.narrow(1, 0, frames);
  for (std::size_t k = 0; k < 3; ++k) {
    out.conditions[k] = batch.conditions[k].narrow(1, 0, frames);
    out.masks[k] = batch.masks[k].narrow(1, 0, frames);
  }
  out.grid = batch.grid.narrow(1, 0, frames);
  out.vision_mask = batch.vision_mask.narrow(1, 0, frames);
  return out;
}

Batch sample_batch(const std::vector<datagen::SyntheticScene>& scenes, int64_t window, int64_t batch_size, Rng& rng) {
  if (scenes.empty()) throw ShapeMismatch("sample_batch: empty dataset");
  std::vector<Batch> parts;
  parts.reserve(static_cast<std::size_t>(batch_size));
  for (int64_t i = 0; i < batch_size; ++i) {
    const auto& scene = scenes[static_cast<std::size_t>(rng.integer(0, static_cast<int64_t>(scenes.size()) - 1))];
    if (scene.frames() < window) throw SequenceTooShort("scene shorter than the training window");
    const int64_t start = rng.integer(0, scene.frames() - window);
    const auto crop = datagen::crop_scene(scene, start, window);
    parts.push_back(scene_batch(crop, datagen::render_conditions(crop)));
  }
  return stack_batches(parts);
}

std::vector<datagen::SyntheticScene> load_split(const std::filesystem::path& dir) {
  std::vector<datagen::SyntheticScene> scenes;
  for (const auto& e : datagen::read_manifest(dir)) scenes.push_back(datagen::load_scene(e.file));
  return scenes;
}

Checkpoint make_checkpoint(Stage stage, int64_t iteration, torch::nn::Module& module, const AdamState& adam,
                           nlohmann::json metadata) {
  Checkpoint c;
  c.stage = stage;
  c.iteration = iteration;
  c.metadata = std::move(metadata);
  for (const auto& item : module.named_parameters()) c.params.emplace_back(item.key(), item.value().detach().clone());
  c.adam.step = adam.step;
  for (const auto& m : adam.m) c.adam.m.push_back(m.detach().clone());
  for (const auto& v : adam.v) c.adam.v.push_back(v.detach().clone());
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::Archive a;
  a.kind = "checkpoint";
  a.metadata = ckpt.metadata;
  a.metadata["stage"] = std::string(to_string(ckpt.stage));
  a.metadata["iteration"] = ckpt.iteration;
  a.metadata["adam_step"] = ckpt.adam.step;
  const bool moments = ckpt.adam.m.size() == ckpt.params.size();
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const auto& [name, t] = ckpt.params[i];
    a.add("param/" + name, t);
    if (moments) {
      a.add("adam_m/" + name, ckpt.adam.m[i]);
      a.add("adam_v/" + name, ckpt.adam.v[i]);
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  io::write_archive(path, a);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingCheckpoint("checkpoint not found: " + path.string());
  const auto a = io::read_archive(path);
  if (a.kind != "checkpoint") throw FormatError(path.string() + " is not a checkpoint");
  Checkpoint c;
  c.metadata = a.metadata;
  c.stage = parse_stage(a.metadata.at("stage").get<std::string>());
  c.iteration = a.metadata.at("iteration").get<int64_t>();
  c.adam.step = a.metadata.value("adam_step", int64_t{0});
  const std::string prefix = "param/";
  for (const auto& arr : a.arrays) {
    if (arr.name.rfind(prefix, 0) != 0) continue;
    const auto name = arr.name.substr(prefix.size());
    c.params.emplace_back(name, a.tensor(arr.name));
    if (a.contains("adam_m/" + name)) {
      c.adam.m.push_back(a.tensor("adam_m/" + name));
      c.adam.v.push_back(a.tensor("adam_v/" + name));
    }
  }
  if (c.adam.m.size() != c.params.size()) {
    c.adam.m.clear();
    c.adam.v.clear();
  }
  return c;
}

void load_parameters(torch::nn::Module& module, const Checkpoint& ckpt) {
  std::map<std::string, torch::Tensor> stored(ckpt.params.begin(), ckpt.params.end());
  torch::NoGradGuard no_grad;
  auto params = module.named_parameters();
  if (params.size() != stored.size()) throw ShapeMismatch("checkpoint parameter count differs from the model");
  for (auto& item : params) {
    const auto it = stored.find(item.key());
    if (it == stored.end()) throw ShapeMismatch("checkpoint lacks parameter " + item.key());
    if (it->second.sizes() != item.value().sizes()) throw ShapeMismatch("checkpoint shape differs for " + item.key());
    item.value().copy_(it->second);
  }
}

std::uint64_t parameter_hash(const torch::nn::Module& module) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& item : module.named_parameters()) {
    mix(item.key().data(), item.key().size());
    auto t = item.value().detach().contiguous();
    mix(t.data_ptr(), static_cast<std::size_t>(t.numel()) * t.element_size());
  }
  return h;
}

vae::JointVae load_vae(const std::filesystem::path& path) {
  const auto ckpt = read_checkpoint(path);
  if (ckpt.stage != Stage::vae) throw FormatError(path.string() + " is not a VAE checkpoint");
  vae::JointVae model(ckpt.metadata.at("vae").get<vae::VaeConfig>());
  load_parameters(*model, ckpt);
  model->eval();
  return model;
}

DiffusionModel load_diffusion(const std::filesystem::path& path) {
  const auto ckpt = read_checkpoint(path);
  if (ckpt.stage != Stage::diffusion) throw FormatError(path.string() + " is not a diffusion checkpoint");
  DiffusionModel m;
  m.denoiser = diffusion::Denoiser(ckpt.metadata.at("denoiser").get<diffusion::DenoiserConfig>());
  load_parameters(*m.denoiser, ckpt);
  m.denoiser->eval();
  m.schedule = diffusion::cosine_schedule(ckpt.metadata.at("diffusion_steps").get<int64_t>());
  m.scale_z = ckpt.metadata.at("latent_scale").at("z").get<double>();
  m.scale_g = ckpt.metadata.at("latent_scale").at("g").get<double>();
  return m;
}

vae::JointVae initial_vae(const TrainConfig& config) {
  torch::manual_seed(derive_seed(config.seed, kInitStream));
  return vae::JointVae(config.vae);
}

VaeTrainResult train_stage1_vae(const TrainConfig& config, const std::vector<datagen::SyntheticScene>& dataset) {
  config.validate();
  VaeTrainResult result;
  result.model = initial_vae(config);
  auto& model = result.model;
  model->train();
  const hand::KinematicModel kinematics;
  auto params = model->parameters();
  AdamState adam;

  for (int64_t iter = 0; iter < config.total_iters; ++iter) {
    Rng rng(derive_seed(config.seed, kBatchStream + static_cast<std::uint64_t>(iter)));
    auto gen = diffusion::make_generator(derive_seed(config.seed, static_cast<std::uint64_t>(iter)));
    auto batch = sample_batch(dataset, config.window, config.batch_size, rng);
    drop_frames(batch, config.frame_dropout, rng);
    const int64_t b = batch.size(), d = config.vae.latent_dim();

    auto eps = torch::randn({b, d}, gen, torch::kFloat32);
    auto enc = model->encode_motion(batch.x, eps);
    std::vector<torch::Tensor> z_all{enc.z};
    for (auto kind : vae::kAllConditionKinds) {
      z_all.push_back(model->encode_condition(kind, batch.conditions[idx(kind)], batch.masks[idx(kind)]));
    }
    const auto parts = static_cast<int64_t>(z_all.size());
    auto first = batch.x.select(1, 0);
    auto decoded = model->decode(torch::cat(z_all, 0), enc.g.sample.repeat({parts, 1}), first.repeat({parts, 1}));
    auto chunks = decoded.chunk(parts, 0);
    std::vector<torch::Tensor> x_hat_c(chunks.begin() + 1, chunks.end());
    std::vector<torch::Tensor> z_c(z_all.begin() + 1, z_all.end());
    auto terms = vae::vae_loss(batch.x, chunks[0], x_hat_c, enc.z, z_c, enc.g.mu, enc.g.log_sigma,
                               config.vae_weights, kinematics);
    check_finite(terms.total, iter,
                 "rec=" + std::to_string(terms.rec.item<double>()) + " kl=" + std::to_string(terms.kl.item<double>()) +
                     " latent=" + std::to_string(terms.latent.item<double>()) +
                     " aux=" + std::to_string(terms.aux.item<double>()));
    model->zero_grad();
    terms.total.backward();
    adamw_step(params, gradients(params), adam, hyper_for(config, iter + 1));
    result.losses.push_back(terms.total.item<double>());
    if (config.log_every > 0 && (iter + 1) % config.log_every == 0) {
      std::cerr << "vae iter " << iter + 1 << " loss " << result.losses.back() << '\n';
    }
  }

  model->eval();
  nlohmann::json meta = {{"config", stored_config(config)}, {"vae", config.vae}, {"rng", {{"seed", config.seed}, {"next_iteration", config.total_iters}}}};
  result.checkpoint = make_checkpoint(Stage::vae, config.total_iters, *model, adam, std::move(meta));
  if (!config.checkpoint_out.empty()) save_checkpoint(config.checkpoint_out, result.checkpoint);
  return result;
}

std::pair<double, double> measure_latent_scale(vae::JointVae& vae, const std::vector<datagen::SyntheticScene>& dataset,
                                               int64_t window, int64_t batch_size, std::uint64_t seed, int batches) {
  torch::NoGradGuard no_grad;
  vae->eval();
  std::vector<torch::Tensor> zs, gs;
  for (int i = 0; i < batches; ++i) {
    Rng rng(derive_seed(seed, kScaleStream + static_cast<std::uint64_t>(i)));
    const auto batch = sample_batch(dataset, window, batch_size, rng);
    const auto enc = vae->encode_motion(batch.x);
    zs.push_back(enc.z.flatten());
    gs.push_back(enc.g.mu.flatten());
  }
  const double sz = torch::cat(zs).std().item<double>();
  const double sg = torch::cat(gs).std().item<double>();
  return {sz > 1e-8 ? sz : 1.0, sg > 1e-8 ? sg : 1.0};
}

DiffusionTrainResult train_stage2_diffusion(const TrainConfig& config, const std::vector<datagen::SyntheticScene>& dataset) {
  if (config.vae_checkpoint.empty()) throw MissingCheckpoint("stage 2 needs vae_checkpoint");
  return train_stage2_diffusion(config, load_vae(config.vae_checkpoint), dataset);
}

DiffusionTrainResult train_stage2_diffusion(const TrainConfig& config, vae::JointVae vae,
                                            const std::vector<datagen::SyntheticScene>& dataset) {
  config.validate();
  if (!vae) throw MissingCheckpoint("stage 2 needs a trained VAE");
  if (config.denoiser.latent_dim != vae->config().latent_dim()) {
    throw ShapeMismatch("denoiser latent width differs from the VAE latent width");
  }
  vae->eval();
  for (auto& p : vae->parameters()) p.set_requires_grad(false);
  const auto vae_hash = parameter_hash(*vae);
  const auto [scale_z, scale_g] = measure_latent_scale(vae, dataset, config.window, config.batch_size, config.seed);

  torch::manual_seed(derive_seed(config.seed, kInitStream + 1));
  DiffusionTrainResult result;
  auto& m = result.model;
  m.denoiser = diffusion::Denoiser(config.denoiser);
  m.schedule = diffusion::cosine_schedule(config.diffusion_steps);
  m.scale_z = scale_z;
  m.scale_g = scale_g;
  auto& den = m.denoiser;
  den->train();
  const hand::KinematicModel kinematics;
  auto params = den->parameters();
  AdamState adam;

  for (int64_t iter = 0; iter < config.total_iters; ++iter) {
    Rng rng(derive_seed(config.seed, kBatchStream + static_cast<std::uint64_t>(iter)));
    auto gen = diffusion::make_generator(derive_seed(config.seed, static_cast<std::uint64_t>(iter)));
    auto batch = sample_batch(dataset, config.window, config.batch_size, rng);
    drop_frames(batch, config.frame_dropout, rng);
    const int64_t b = batch.size(), n = batch.frames();
    auto first = batch.x.select(1, 0);

    torch::Tensor z0, anchor;
    std::array<torch::Tensor, 3> z_c;
    {
      torch::NoGradGuard no_grad;
      const auto enc = vae->encode_motion(batch.x);
      z0 = torch::cat({enc.z / scale_z, (enc.g.mu / scale_g).unsqueeze(1)}, 1);
      for (auto kind : vae::kAllConditionKinds) {
        z_c[idx(kind)] = vae->encode_condition(kind, batch.conditions[idx(kind)], batch.masks[idx(kind)]) / scale_z;
      }
      anchor = vae->decoder()->anchor(first);
    }

    // Whole-set dropout for guidance plus independent per-stream dropout.
    std::vector<float> keep_all(static_cast<std::size_t>(b));
    for (auto& k : keep_all) k = rng.bernoulli(config.condition_dropout) ? 0.0f : 1.0f;
    const auto keep_all_t = torch::tensor(keep_all).reshape({b, 1});
    diffusion::DenoiserInputs inputs;
    for (auto kind : vae::kAllConditionKinds) {
      auto [latent, keep] = diffusion::condition_dropout(z_c[idx(kind)], den->uncond_token(diffusion::modality_for(kind)),
                                                         config.stream_dropout, rng);
      inputs.structured[idx(kind)] = diffusion::ConditionInput{latent, batch.masks[idx(kind)] * keep.reshape({b, 1}) * keep_all_t};
    }
    std::vector<float> keep_vision(static_cast<std::size_t>(b));
    for (auto& k : keep_vision) k = rng.bernoulli(config.stream_dropout) ? 0.0f : 1.0f;
    auto vision_mask = batch.vision_mask * torch::tensor(keep_vision).reshape({b, 1}) * keep_all_t;
    inputs.hand_tokens = den->perceive(anchor, batch.grid, vision_mask);
    inputs.vision_mask = vision_mask;

    auto t = torch::randint(1, config.diffusion_steps + 1, {b}, gen, torch::kInt64);
    auto eps = torch::randn(z0.sizes(), gen, torch::kFloat32);
    auto z_t = diffusion::forward_diffuse(z0, t, eps, m.schedule);
    auto z0_hat = den->forward(z_t, t, inputs);
    auto x_hat = vae->decode(z0_hat.narrow(1, 0, n) * scale_z, z0_hat.select(1, n) * scale_g, first);
    auto terms = diffusion::denoiser_loss(z0, z0_hat, batch.x, x_hat, config.diff_weights, kinematics);
    check_finite(terms.total, iter,
                 "simple=" + std::to_string(terms.simple.item<double>()) + " rec=" + std::to_string(terms.rec.item<double>()));
    den->zero_grad();
    terms.total.backward();
    adamw_step(params, gradients(params), adam, hyper_for(config, iter + 1));
    result.losses.push_back(terms.total.item<double>());
    if (config.log_every > 0 && (iter + 1) % config.log_every == 0) {
      std::cerr << "diffusion iter " << iter + 1 << " loss " << result.losses.back() << '\n';
    }
  }

  if (parameter_hash(*vae) != vae_hash) throw Error("VAE parameters changed during stage 2");
  den->eval();
  nlohmann::json meta = {{"config", stored_config(config)},
                         {"denoiser", config.denoiser},
                         {"diffusion_steps", config.diffusion_steps},
                         {"latent_scale", scales_json(scale_z, scale_g)},
                         {"vae_hash", hex(vae_hash)},
                         {"rng", {{"seed", config.seed}, {"next_iteration", config.total_iters}}}};
  result.checkpoint = make_checkpoint(Stage::diffusion, config.total_iters, *den, adam, std::move(meta));
  if (!config.checkpoint_out.empty()) save_checkpoint(config.checkpoint_out, result.checkpoint);
  return result;
}

InferResult infer(vae::JointVae& vae, DiffusionModel& model, const Batch& conditions, const hand::HandPose& first_frame,
                  const InferOptions& options) {
  if (!vae || !model.denoiser) throw MissingCheckpoint("infer needs both models");
  options.sampler.validate();
  torch::NoGradGuard no_grad;
  vae->eval();
  model.denoiser->eval();
  auto& den = model.denoiser;
  const int64_t n = conditions.frames();
  const int64_t padded = vae::padded_length(n, vae->config().segment_length);
  const auto batch = pad_batch(conditions, padded);
  const auto first = hand::poses_to_tensor(std::vector<hand::HandPose>{first_frame});
  const auto opts = torch::TensorOptions().dtype(torch::kFloat32);

  diffusion::DenoiserInputs inputs;
  for (auto stream : options.streams) {
    if (stream == Stream::vision) {
      inputs.hand_tokens = den->perceive(vae->decoder()->anchor(first), batch.grid, batch.vision_mask);
      inputs.vision_mask = batch.vision_mask;
      continue;
    }
    for (auto kind : vae::kAllConditionKinds) {
      if (stream_for(kind) != stream) continue;
      auto z = vae->encode_condition(kind, batch.conditions[idx(kind)], batch.masks[idx(kind)]) / model.scale_z;
      inputs.structured[idx(kind)] = diffusion::ConditionInput{z, batch.masks[idx(kind)]};
    }
  }
  const auto both = diffusion::DenoiserInputs::concat(inputs.unconditional(), inputs, 1, 1, padded, opts);
  diffusion::GuidedDenoiser guided = [&](const torch::Tensor& z_t, int64_t t) {
    auto out = den->forward(torch::cat({z_t, z_t}, 0), torch::full({2}, t, torch::kInt64), both);
    return std::make_pair(out.narrow(0, 0, 1), out.narrow(0, 1, 1));
  };

  auto gen = diffusion::make_generator(options.seed);
  auto z_T = torch::randn({1, padded + 1, den->config().latent_dim}, gen, opts);
  auto z0 = options.sampler.method == diffusion::SamplerMethod::ddim
                ? diffusion::sample_ddim(guided, z_T, model.schedule, options.sampler, gen)
                : diffusion::sample_ddpm(guided, z_T, model.schedule, options.sampler.cfg_scale, gen);
  auto x = vae->decode(z0.narrow(1, 0, padded) * model.scale_z, z0.select(1, padded) * model.scale_g, first);

  InferResult r;
  r.motion = hand::poses_from_tensor(x[0].narrow(0, 0, n));
  r.latents = z0;
  r.padded_frames = padded;
  return r;
}

InferResult infer(vae::JointVae& vae, DiffusionModel& model, const datagen::SyntheticScene& scene,
                  const datagen::ConditionSet& conditions, const InferOptions& options) {
  return infer(vae, model, scene_batch(scene, conditions), scene.motion.front(), options);
}

datagen::MotionSequence reconstruct(vae::JointVae& vae, const datagen::SyntheticScene& scene) {
  torch::NoGradGuard no_grad;
  vae->eval();
  const auto n = scene.frames();
  const auto padded = vae::padded_length(n, vae->config().segment_length);
  auto x = vae::pad_repeat_last(hand::poses_to_tensor(scene.motion).unsqueeze(0), padded);
  const auto enc = vae->encode_motion(x);
  auto x_hat = vae->decode(enc.z, enc.g.mu, x.select(1, 0));
  return hand::poses_from_tensor(x_hat[0].narrow(0, 0, n));
}

metrics::JointSequence joints_of(const datagen::MotionSequence& motion) {
  metrics::JointSequence out;
  out.reserve(motion.size());
  for (const auto& p : motion) out.push_back(hand::forward_kinematics(p));
  return out;
}

Report evaluate_predictions(const std::vector<datagen::SyntheticScene>& scenes,
                            const std::vector<datagen::MotionSequence>& predictions, const std::filesystem::path& csv_path,
                            const std::filesystem::path& json_path) {
  if (scenes.size() != predictions.size() || scenes.empty()) throw ShapeMismatch("one prediction per scene required");
  Report report;
  std::array<std::vector<std::size_t>, 4> members;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& s = scenes[i];
    ReportRow row;
    row.name = "scene_" + std::to_string(s.seed);
    row.seed = s.seed;
    row.frames = s.frames();
    row.mean_occlusion = s.mean_occlusion();
    const int bucket = datagen::occlusion_bucket(row.mean_occlusion);
    row.bucket = std::string(datagen::bucket_label(bucket));
    row.metrics = metrics::evaluate_sequence(joints_of(predictions[i]), joints_of(s.motion));
    members[static_cast<std::size_t>(bucket)].push_back(i);
    report.scenes.push_back(std::move(row));
  }

  auto aggregate = [&](const std::string& name, const std::string& bucket, const std::vector<std::size_t>& rows) {
    ReportRow a;
    a.name = name;
    a.bucket = bucket;
    a.scenes = static_cast<int64_t>(rows.size());
    for (auto i : rows) {
      const auto& r = report.scenes[i];
      a.frames += r.frames;
      a.mean_occlusion += r.mean_occlusion;
      a.metrics.pa_mpjpe += r.metrics.pa_mpjpe;
      a.metrics.auc_j += r.metrics.auc_j;
      a.metrics.f5 += r.metrics.f5;
      a.metrics.f15 += r.metrics.f15;
      a.metrics.g_mpjpe += r.metrics.g_mpjpe;
      a.metrics.ga_mpjpe += r.metrics.ga_mpjpe;
      a.metrics.acc_err += r.metrics.acc_err;
    }
    const double k = static_cast<double>(rows.size());
    a.mean_occlusion /= k;
    a.metrics.pa_mpjpe /= k;
    a.metrics.auc_j /= k;
    a.metrics.f5 /= k;
    a.metrics.f15 /= k;
    a.metrics.g_mpjpe /= k;
    a.metrics.ga_mpjpe /= k;
    a.metrics.acc_err /= k;
    return a;
  };
  std::vector<std::size_t> all(scenes.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  report.aggregates.push_back(aggregate("overall", "all", all));
  for (int b = 0; b < 4; ++b) {
    if (members[static_cast<std::size_t>(b)].empty()) continue;
    const auto label = std::string(datagen::bucket_label(b));
    report.aggregates.push_back(aggregate("bucket " + label, label, members[static_cast<std::size_t>(b)]));
  }

  if (!csv_path.empty()) {
    std::ofstream out(csv_path);
    out << kReportCsvHeader << '\n' << std::setprecision(10);
    auto write = [&](const ReportRow& r) {
      const auto& m = r.metrics;
      out << r.name << ',' << r.seed << ',' << r.frames << ',' << r.mean_occlusion << ',' << r.bucket << ',' << r.scenes
          << ',' << m.pa_mpjpe << ',' << m.auc_j << ',' << m.f5 << ',' << m.f15 << ',' << m.g_mpjpe << ','
          << m.ga_mpjpe << ',' << m.acc_err << '\n';
    };
    for (const auto& r : report.scenes) write(r);
    for (const auto& r : report.aggregates) write(r);
  }
  if (!json_path.empty()) {
    auto row_json = [](const ReportRow& r) {
      const auto& m = r.metrics;
      return nlohmann::json{{"name", r.name},         {"seed", r.seed},         {"frames", r.frames},
                            {"mean_occlusion", r.mean_occlusion},               {"bucket", r.bucket},
                            {"scenes", r.scenes},     {"pa_mpjpe_mm", m.pa_mpjpe}, {"auc_j", m.auc_j},
                            {"f5", m.f5},             {"f15", m.f15},           {"g_mpjpe_mm", m.g_mpjpe},
                            {"ga_mpjpe_mm", m.ga_mpjpe}, {"acc_err_mm", m.acc_err}};
    };
    nlohmann::json doc = {{"scenes", nlohmann::json::array()}, {"aggregates", nlohmann::json::array()}};
    for (const auto& r : report.scenes) doc["scenes"].push_back(row_json(r));
    for (const auto& r : report.aggregates) doc["aggregates"].push_back(row_json(r));
    std::ofstream(json_path) << doc.dump(2) << '\n';
  }
  return report;
}

Report evaluate(vae::JointVae& vae, DiffusionModel& model, const std::vector<datagen::SyntheticScene>& scenes,
                const InferOptions& options, const std::filesystem::path& csv_path, const std::filesystem::path& json_path) {
  std::vector<datagen::MotionSequence> predictions;
  predictions.reserve(scenes.size());
  for (const auto& scene : scenes) {
    InferOptions per_scene = options;
    per_scene.seed = derive_seed(options.seed, scene.seed);
    predictions.push_back(infer(vae, model, scene, datagen::render_conditions(scene), per_scene).motion);
  }
  return evaluate_predictions(scenes, predictions, csv_path, json_path);
}

}  // namespace unihand::train
