#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "unihand/datagen.hpp"
#include "unihand/denoiser.hpp"
#include "unihand/diffusion.hpp"
#include "unihand/joint_vae.hpp"
#include "unihand/metrics.hpp"

namespace unihand::train {

enum class Stage { vae, diffusion };
Stage parse_stage(std::string_view name);
std::string_view to_string(Stage stage);

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamState {
  std::vector<torch::Tensor> m;
  std::vector<torch::Tensor> v;
  int64_t step = 0;
};

/// One decoupled-weight-decay Adam update, in place. Moments are created on
/// first use. Throws ShapeMismatch when params, grads and moments disagree.
void adamw_step(std::vector<torch::Tensor>& params, const std::vector<torch::Tensor>& grads, AdamState& state,
                const AdamHyper& hyper);

struct TrainConfig {
  Stage stage = Stage::vae;
  double lr = 1e-4;
  int64_t warmup_iters = 100;
  int64_t total_iters = 1000;
  int64_t batch_size = 8;
  std::uint64_t seed = 0;
  /// Frames per training window; must be a multiple of the segment length.
  int64_t window = 48;
  double weight_decay = 0.01;
  vae::VaeLossWeights vae_weights;
  diffusion::DiffLossWeights diff_weights;
  vae::VaeConfig vae = vae::VaeConfig::desk();
  diffusion::DenoiserConfig denoiser = diffusion::DenoiserConfig::desk();
  int64_t diffusion_steps = 50;
  /// Probability of dropping every condition of a sample (guidance training).
  double condition_dropout = 0.1;
  /// Independent per-stream drop probability on top of the above.
  double stream_dropout = 0.3;
  /// Probability that a sample gets a random fraction of frames masked.
  double frame_dropout = 0.3;
  std::string checkpoint_out;
  std::string vae_checkpoint;
  int64_t log_every = 0;

  /// Throws Error on lr <= 0, warmup > total or a bad window.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Reads a JSON config; UNIHAND_SEED, when set, overrides the seed.
TrainConfig load_config(const std::filesystem::path& path);
void apply_seed_override(TrainConfig& config);

/// Linear warmup from 0 to lr, then linear decay to 0 at total_iters.
double lr_at(int64_t iter, const TrainConfig& config);

/// Tensors for a batch of windows. Condition arrays are indexed by
/// vae::ConditionKind.
struct Batch {
  torch::Tensor x;                          // [B, N, 61]
  std::array<torch::Tensor, 3> conditions;  // [B, N, F]
  std::array<torch::Tensor, 3> masks;       // [B, N]
  torch::Tensor grid;                       // [B, N, h, w, C]
  torch::Tensor vision_mask;                // [B, N]

  int64_t size() const { return x.size(0); }
  int64_t frames() const { return x.size(1); }
};

Batch scene_batch(const datagen::SyntheticScene& scene, const datagen::ConditionSet& conditions);
Batch stack_batches(const std::vector<Batch>& parts);
/// Repeats the final frame of every field until `frames` is reached.
Batch pad_batch(const Batch& batch, int64_t frames);
Batch slice_batch(const Batch& batch, int64_t frames);

/// Random windows: scene and start frame drawn from `rng`, each window
/// re-canonicalized to its first frame.
Batch sample_batch(const std::vector<datagen::SyntheticScene>& scenes, int64_t window, int64_t batch_size, Rng& rng);

std::vector<datagen::SyntheticScene> load_split(const std::filesystem::path& dir);

struct Checkpoint {
  Stage stage = Stage::vae;
  int64_t iteration = 0;
  nlohmann::json metadata;
  std::vector<std::pair<std::string, torch::Tensor>> params;
  AdamState adam;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws MissingCheckpoint when the file is absent.
Checkpoint read_checkpoint(const std::filesystem::path& path);
Checkpoint make_checkpoint(Stage stage, int64_t iteration, torch::nn::Module& module, const AdamState& adam,
                           nlohmann::json metadata);
/// Copies checkpoint parameters into `module`; ShapeMismatch on any
/// missing or mis-shaped tensor.
void load_parameters(torch::nn::Module& module, const Checkpoint& ckpt);

/// FNV-1a over all parameter bytes.
std::uint64_t parameter_hash(const torch::nn::Module& module);

struct DiffusionModel {
  diffusion::Denoiser denoiser{nullptr};
  diffusion::NoiseSchedule schedule;
  double scale_z = 1.0;
  double scale_g = 1.0;
};

vae::JointVae load_vae(const std::filesystem::path& path);
DiffusionModel load_diffusion(const std::filesystem::path& path);

struct VaeTrainResult {
  vae::JointVae model{nullptr};
  Checkpoint checkpoint;
  std::vector<double> losses;
};

struct DiffusionTrainResult {
  DiffusionModel model;
  Checkpoint checkpoint;
  std::vector<double> losses;
};

/// The seeded, untrained stage-1 model that training starts from.
vae::JointVae initial_vae(const TrainConfig& config);

VaeTrainResult train_stage1_vae(const TrainConfig& config, const std::vector<datagen::SyntheticScene>& dataset);
/// Stage 2 with every VAE parameter frozen; throws Error if they change.
DiffusionTrainResult train_stage2_diffusion(const TrainConfig& config, vae::JointVae vae,
                                            const std::vector<datagen::SyntheticScene>& dataset);
DiffusionTrainResult train_stage2_diffusion(const TrainConfig& config, const std::vector<datagen::SyntheticScene>& dataset);

/// Latent normalization constants measured on up to `batches` batches.
std::pair<double, double> measure_latent_scale(vae::JointVae& vae, const std::vector<datagen::SyntheticScene>& dataset,
                                               int64_t window, int64_t batch_size, std::uint64_t seed, int batches = 4);

struct InferOptions {
  diffusion::SamplerConfig sampler;
  std::vector<datagen::Stream> streams{datagen::Stream::vision, datagen::Stream::keypoints2d};
  std::uint64_t seed = 0;
};

struct InferResult {
  datagen::MotionSequence motion;  // requested length
  torch::Tensor latents;           // [1, padded + 1, d] including the g slot
  int64_t padded_frames = 0;
};

/// Samples latents for one scene and decodes them from `first_frame`.
/// Conditions are padded to a multiple of the segment length and the
/// output truncated back.
InferResult infer(vae::JointVae& vae, DiffusionModel& model, const Batch& conditions, const hand::HandPose& first_frame,
                  const InferOptions& options);
InferResult infer(vae::JointVae& vae, DiffusionModel& model, const datagen::SyntheticScene& scene,
                  const datagen::ConditionSet& conditions, const InferOptions& options);

/// Encodes motion (g = mu) and decodes it again from the true first frame.
datagen::MotionSequence reconstruct(vae::JointVae& vae, const datagen::SyntheticScene& scene);

metrics::JointSequence joints_of(const datagen::MotionSequence& motion);

struct ReportRow {
  std::string name;
  std::uint64_t seed = 0;
  int64_t frames = 0;
  double mean_occlusion = 0.0;
  std::string bucket;
  int64_t scenes = 1;
  metrics::MetricSet metrics;
};

struct Report {
  std::vector<ReportRow> scenes;
  /// "overall" first, then one row per non-empty occlusion bucket.
  std::vector<ReportRow> aggregates;
};

inline constexpr const char* kReportCsvHeader =
    "name,seed,frames,mean_occlusion,bucket,scenes,pa_mpjpe_mm,auc_j,f5,f15,g_mpjpe_mm,ga_mpjpe_mm,acc_err_mm";

/// Scores predictions against scene ground truth; writes CSV/JSON when the
/// paths are non-empty.
Report evaluate_predictions(const std::vector<datagen::SyntheticScene>& scenes,
                            const std::vector<datagen::MotionSequence>& predictions,
                            const std::filesystem::path& csv_path = {}, const std::filesystem::path& json_path = {});

/// Runs inference on every scene of a split (per-scene seed derived from
/// options.seed) and scores it.
Report evaluate(vae::JointVae& vae, DiffusionModel& model, const std::vector<datagen::SyntheticScene>& scenes,
                const InferOptions& options, const std::filesystem::path& csv_path = {},
                const std::filesystem::path& json_path = {});

}  // namespace unihand::train
