#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mkd/data_synth.hpp"
#include "mkd/losses.hpp"
#include "mkd/models.hpp"
#include "mkd/random.hpp"

namespace mkd {

/// Training schedules. `mkd` is the full alternating procedure; the others
/// are the comparison baselines and ablations.
enum class TrainingMode {
  mkd,             ///< translation + mutual distillation
  baseline,        ///< one segmentor, target data only
  fine_tune,       ///< one segmentor: assistant epochs, then target epochs
  joint_training,  ///< one segmentor, target and assistant batches interleaved 1:1
  no_iam,          ///< mutual distillation on raw assistant images, no translation
  kd_s2r_only,     ///< real-to-synthetic distillation disabled (lambda_kd2 = 0)
  kd_r2s_only,     ///< synthetic-to-real distillation disabled (lambda_kd1 = 0)
};

std::string to_string(TrainingMode m);
TrainingMode parse_training_mode(const std::string& s);
/// True for modes that train a single segmentor (stored in the S_real slot).
bool single_segmentor_mode(TrainingMode m);

struct TrainingConfig {
  double lambda_cyc = 10.0;
  double lambda_kd1 = 0.5;  ///< weight of synthetic-to-real distillation in S_real's objective
  double lambda_kd2 = 1.0;  ///< weight of real-to-synthetic distillation in S_syn's objective
  double lr = 2e-4;
  double segmentor_decay = 0.9;
  int decay_every = 2;  ///< epochs between segmentor learning-rate decays
  int epochs = 10;
  int batch_size = 1;
  std::uint64_t seed = 0;
  GanVariant gan_variant = GanVariant::vanilla;
  int replay_buffer_size = 50;
  TrainingMode mode = TrainingMode::mkd;

  // Adam moments: translation networks use beta1 = 0.5, segmentors the usual 0.9.
  double gan_beta1 = 0.5;
  double seg_beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  /// Weight of the synthetic segmentor's supervised loss in the a->t generator update.
  double gen_sup_weight = 1.0;
  bool augment = true;
  bool dice_include_background = true;

  int gen_width = 8;
  int gen_depth = 2;
  int disc_width = 8;
  int disc_depth = 2;
  int seg_width = 8;
  int seg_depth = 2;

  int early_stop_patience = 0;  ///< epochs without validation improvement; 0 disables
  int checkpoint_every = 0;     ///< epochs between periodic checkpoints; 0 disables
  std::string checkpoint_dir;

  void validate() const;
  /// Distillation weights after applying the mode's reductions.
  double effective_lambda_kd1() const;
  double effective_lambda_kd2() const;
  DiceOptions dice_options() const { return {1e-5, dice_include_background}; }
};

enum class NetId { g_a2t = 0, g_t2a = 1, d_a = 2, d_t = 3, s_syn = 4, s_real = 5 };
inline constexpr int kNetworkCount = 6;
std::string to_string(NetId id);

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;
  double base_lr = 2e-4;
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const AdamState&) const = default;
};

AdamState make_adam(const Network& net, double lr, double beta1, double beta2, double eps);
/// One bias-corrected Adam step on `net` along `grads`.
void adam_update(Network& net, AdamState& opt, const std::vector<Tensor>& grads);
/// Segmentor schedule: lr = base_lr · decay^floor(epoch / every).
void decay_segmentor_lr(AdamState& opt, int epoch, const TrainingConfig& cfg);

/// History of generated images shown to a discriminator.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 0) : capacity_(capacity) {}
  /// While filling, stores and returns `image`. Once full, with probability
  /// 1/2 returns a stored image and replaces it with `image`; otherwise
  /// returns `image` unchanged. Capacity 0 always returns `image`.
  Image query(const Image& image, Rng& rng);

  std::size_t capacity() const { return capacity_; }
  const std::vector<Image>& images() const { return images_; }
  std::vector<Image>& mutable_images() { return images_; }
  bool operator==(const ReplayBuffer&) const = default;

 private:
  std::size_t capacity_ = 0;
  std::vector<Image> images_;
};

/// Deterministic batch order: target shuffled per epoch, assistant drawn
/// cyclically with its own shuffle.
struct SamplerState {
  std::vector<std::uint32_t> primary_order;
  std::size_t primary_cursor = 0;
  std::vector<std::uint32_t> assistant_order;
  std::size_t assistant_cursor = 0;
  Rng shuffle_rng;
  Rng assistant_rng;
  Rng augment_rng;
};

struct MetricsRecord {
  std::int64_t iteration = 0;
  int epoch = 0;
  double seg_lr = 0.0;
  LossReport report;
};

/// One structured-text line: `iter=.. epoch=.. seg_lr=.. adv_t=.. ...`,
/// values printed with round-trip precision.
std::string format_metrics_line(const MetricsRecord& r);
MetricsRecord parse_metrics_line(const std::string& line);
/// Value of a LossReport field (or `seg_lr`) by its log key; ConfigError if unknown.
double metric_value(const MetricsRecord& r, const std::string& field);

struct TrainerState {
  std::array<Network, kNetworkCount> nets;
  std::array<AdamState, kNetworkCount> opt;
  ReplayBuffer pool_t;  ///< synthetic target-style images for D_t
  ReplayBuffer pool_a;  ///< synthetic assistant-style images for D_a
  Rng pool_rng;
  SamplerState sampler;

  std::int64_t iteration = 0;  ///< completed iterations
  int epoch = 0;               ///< current (0-based) epoch
  std::int64_t step_in_epoch = 0;
  std::int64_t assistant_reads = 0;  ///< assistant samples drawn so far
  double best_validation = -1.0;
  int epochs_without_improvement = 0;
  bool stopped_early = false;

  Network& net(NetId id) { return nets[static_cast<std::size_t>(id)]; }
  const Network& net(NetId id) const { return nets[static_cast<std::size_t>(id)]; }
  AdamState& optimizer(NetId id) { return opt[static_cast<std::size_t>(id)]; }
  const AdamState& optimizer(NetId id) const { return opt[static_cast<std::size_t>(id)]; }
};

/// Fresh networks and optimizers for `cfg`, seeded from cfg.seed.
TrainerState initialize_state(const TrainingConfig& cfg, int num_classes);

using Batch = std::vector<LabeledSample>;

/// Scratch shared by the sub-steps of one iteration.
struct IterationContext {
  const Batch* batch_t = nullptr;
  const Batch* batch_a = nullptr;
  LossReport report;
  std::vector<Image> fake_t;          ///< G_a2t(x_a) before step 1's update, for D_t
  std::vector<Image> fake_a;          ///< G_t2a(x_t) before step 3's update, for D_a
  std::vector<Image> fake_t_current;  ///< G_a2t(x_a) after step 1, for the segmentors
  std::vector<Tensor> grad_s_syn;
  std::vector<Tensor> grad_s_real;
  bool segmentor_grads_ready = false;
};

/// The sub-steps of one alternating iteration, in execution order. Each
/// update step modifies exactly one network; step 5 modifies none.
namespace steps {

/// (1) θ_{G_a2t} along ∇(L_gan^{a→t} + w · L_sup^{syn}); S_syn, G_t2a and D_t frozen.
void update_generator_a2t(TrainerState& s, IterationContext& ctx, const TrainingConfig& cfg);
/// (2) θ_{D_t} along ∇ of the discriminator side of the a→t adversarial loss.
void update_discriminator_t(TrainerState& s, IterationContext& ctx, const TrainingConfig& cfg);
/// (3) θ_{G_t2a} along ∇ L_gan^{t→a}; G_a2t and D_a frozen.
void update_generator_t2a(TrainerState& s, IterationContext& ctx, const TrainingConfig& cfg);
/// (4) θ_{D_a}.
void update_discriminator_a(TrainerState& s, IterationContext& ctx, const TrainingConfig& cfg);
/// (5) L_seg^{syn}, L_seg^{real} and their gradients, peers' outputs detached.
void compute_segmentor_losses(TrainerState& s, IterationContext& ctx, const TrainingConfig& cfg);
/// (6) θ_{S_syn}.
void update_synthetic_segmentor(TrainerState& s, IterationContext& ctx, const TrainingConfig& cfg);
/// (7) θ_{S_real}.
void update_real_segmentor(TrainerState& s, IterationContext& ctx, const TrainingConfig& cfg);

}  // namespace steps

/// One iteration of `cfg.mode`'s schedule on the given batches. Throws
/// TrainingError naming the term if any loss is non-finite.
LossReport train_iteration(TrainerState& state, const Batch& batch_t, const Batch& batch_a,
                           const TrainingConfig& cfg);

/// Drives train_iteration over datasets: sampling, augmentation, epochs,
/// learning-rate decay, early stopping and periodic checkpoints.
class Trainer {
 public:
  using ValidationFn = std::function<double(const TrainerState&)>;

  Trainer(const Dataset& target, const Dataset& assistant, TrainingConfig cfg);
  Trainer(const Dataset& target, const Dataset& assistant, TrainingConfig cfg, TrainerState resumed);

  void set_validation(ValidationFn fn) { validation_ = std::move(fn); }
  /// Called with every metrics record as it is produced.
  void set_metrics_sink(std::function<void(const MetricsRecord&)> sink) { sink_ = std::move(sink); }

  bool finished() const;
  /// Runs one iteration (no-op when finished). Returns the record produced.
  std::optional<MetricsRecord> step();
  void run();

  int total_epochs() const;
  std::int64_t iterations_per_epoch() const;

  const TrainerState& state() const { return state_; }
  TrainerState& mutable_state() { return state_; }
  const TrainingConfig& config() const { return cfg_; }
  const std::vector<MetricsRecord>& metrics() const { return metrics_; }

 private:
  bool pretraining_phase() const;
  const Dataset& primary_dataset() const;
  void begin_epoch();
  void end_epoch();
  Batch next_primary_batch();
  Batch next_assistant_batch(std::size_t n);
  LabeledSample maybe_augment(const LabeledSample& s);

  const Dataset& target_;
  const Dataset& assistant_;
  TrainingConfig cfg_;
  TrainerState state_;
  ValidationFn validation_;
  std::function<void(const MetricsRecord&)> sink_;
  std::vector<MetricsRecord> metrics_;
};

struct TrainingResult {
  TrainerState state;
  std::vector<MetricsRecord> metrics;
};

/// Trains from scratch. Throws ConfigError on incompatible datasets.
TrainingResult run_training(const Dataset& target, const Dataset& assistant, const TrainingConfig& cfg,
                            Trainer::ValidationFn validation = {});

void checkpoint_save(const TrainerState& state, const std::filesystem::path& file);
TrainerState checkpoint_load(const std::filesystem::path& file);

}  // namespace mkd
