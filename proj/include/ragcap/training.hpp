#pragma once

// Cross-entropy training with encoder warmup and BLEU-4 early stopping, then
// self-critical fine-tuning of the decoder against a CIDEr-D reward.

#include "ragcap/encoder.hpp"
#include "ragcap/metrics.hpp"
#include "ragcap/model.hpp"
#include "ragcap/text.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ragcap {

// One image ready for the model: its (possibly blacked-out) regions, the
// already-assembled retrieval context and the tokenized training targets.
struct TrainingExample {
  std::string image_id;
  RegionFeatures regions;
  TokenContext context;
  std::vector<std::vector<int>> targets;  // BOS ... EOS
  std::vector<std::string> references;    // for metrics
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;  // decoupled
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  // Updates every parameter of a trainable group with learning rate
  // lr * multiplier(group). Frozen groups are left untouched.
  void step(ParameterSet& params, double lr, double encoder_multiplier = 1.0, double decoder_multiplier = 1.0);
  std::size_t steps() const { return steps_; }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  AdamWConfig config_;
  std::map<std::string, Moments> moments_;
  std::size_t steps_ = 0;
};

// Encoder learning-rate multiplier: (step + 1) / steps_per_epoch during the
// first epoch (epoch 0), 1 afterwards.
double encoder_warmup_multiplier(std::size_t epoch, std::size_t step_in_epoch, std::size_t steps_per_epoch);

// Stops once `patience` consecutive epochs fail to strictly beat the best score.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience);

  // Records one epoch's score; true when training should stop.
  bool update(double score);
  bool improved() const { return improved_; }   // did the last update set a new best
  std::size_t best_epoch() const { return best_epoch_; }  // 1-based, 0 before any update
  double best_score() const { return best_; }
  std::size_t epochs() const { return epochs_; }

 private:
  std::size_t patience_;
  std::size_t epochs_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t since_best_ = 0;
  double best_ = 0.0;
  bool improved_ = false;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;  // images per step
  std::size_t max_epochs = 30;
  std::size_t max_steps = 0;  // 0: unlimited
  std::size_t patience = 5;
  bool encoder_warmup = true;
  std::size_t beam_width = 3;  // validation decoding
  double target_loss = 0.0;    // stop once an epoch's mean loss falls below (0: off)
  std::uint64_t seed = 0;
  AdamWConfig optimizer;
};

struct TrainResult {
  std::size_t epochs_run = 0;
  std::size_t steps = 0;
  std::size_t best_epoch = 0;
  double best_bleu4 = 0.0;
  bool stopped_early = false;
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
  std::vector<double> val_bleu4;
  std::vector<double> encoder_multipliers;  // per step
};

// Resamples per-epoch state (random contexts) before each epoch.
using EpochRefresh = std::function<void(std::vector<TrainingExample>& train, std::size_t epoch)>;

// Mean over the batch's captions of the per-caption teacher-forced loss;
// gradients are accumulated into the parameter set.
double accumulate_xe_gradients(CaptionModel& model, std::span<const TrainingExample* const> batch);

// With a non-empty validation split the model ends on its best-BLEU-4 epoch.
// `log` receives one JSON object per step and per epoch.
TrainResult train_xe(CaptionModel& model, std::vector<TrainingExample>& train,
                     const std::vector<TrainingExample>& val, const TrainConfig& config, std::ostream* log = nullptr,
                     const EpochRefresh& refresh = {});

struct ScstConfig {
  double learning_rate = 5e-5;
  std::size_t batch_size = 8;
  std::size_t steps = 200;
  std::uint64_t seed = 0;
  AdamWConfig optimizer;
};

struct ScstStepResult {
  double mean_advantage = 0.0;
  double mean_sample_reward = 0.0;
  double mean_greedy_reward = 0.0;
};

// One self-critical update: per image a sampled caption is rewarded by its
// CIDEr-D minus that of the greedy caption, and the decoder follows
// -(advantage) * sum log P(sample). The encoder group is frozen first.
ScstStepResult scst_step(CaptionModel& model, std::span<const TrainingExample* const> batch,
                         const CiderScorer& reward, AdamW& optimizer, double learning_rate, std::mt19937_64& rng);

std::vector<ScstStepResult> train_scst(CaptionModel& model, const std::vector<TrainingExample>& train,
                                       const CiderScorer& reward, const ScstConfig& config,
                                       std::ostream* log = nullptr);

struct Evaluation {
  MetricReport report;
  std::vector<EvalPair> captions;
};

Evaluation evaluate(const CaptionModel& model, std::span<const TrainingExample> examples, std::size_t beam_width = 3);

}  // namespace ragcap
