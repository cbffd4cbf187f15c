#include "ragcap/training.hpp"

#include "ragcap/generation.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace ragcap {

void AdamW::step(ParameterSet& params, double lr, double encoder_multiplier, double decoder_multiplier) {
  if (!(lr > 0.0)) throw std::invalid_argument("AdamW: learning rate must be positive");
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double correction1 = 1.0 - std::pow(config_.beta1, t);
  const double correction2 = 1.0 - std::pow(config_.beta2, t);
  for (auto& [name, p] : params.items()) {
    if (!params.trainable(p.group)) continue;
    const double rate = lr * (p.group == ParamGroup::encoder ? encoder_multiplier : decoder_multiplier);
    auto& mom = moments_[name];
    auto& values = p.value.values();
    if (mom.m.empty()) {
      mom.m.assign(values.size(), 0.0);
      mom.v.assign(values.size(), 0.0);
    }
    const bool has_grad = p.grad.size() == values.size();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = has_grad ? p.grad[i] : 0.0;
      mom.m[i] = config_.beta1 * mom.m[i] + (1.0 - config_.beta1) * g;
      mom.v[i] = config_.beta2 * mom.v[i] + (1.0 - config_.beta2) * g * g;
      const double m_hat = mom.m[i] / correction1;
      const double v_hat = mom.v[i] / correction2;
      values[i] -= rate * (m_hat / (std::sqrt(v_hat) + config_.epsilon) + config_.weight_decay * values[i]);
    }
  }
}

double encoder_warmup_multiplier(std::size_t epoch, std::size_t step_in_epoch, std::size_t steps_per_epoch) {
  if (steps_per_epoch == 0) throw std::invalid_argument("warmup: steps_per_epoch must be positive");
  if (epoch > 0) return 1.0;
  return static_cast<double>(std::min(step_in_epoch + 1, steps_per_epoch)) / static_cast<double>(steps_per_epoch);
}

EarlyStopper::EarlyStopper(std::size_t patience) : patience_(patience) {
  if (patience < 1) throw std::invalid_argument("early stopping: patience must be at least 1");
}

bool EarlyStopper::update(double score) {
  ++epochs_;
  improved_ = epochs_ == 1 || score > best_;
  if (improved_) {
    best_ = score;
    best_epoch_ = epochs_;
    since_best_ = 0;
  } else {
    ++since_best_;
  }
  return since_best_ >= patience_;
}

// ---------------------------------------------------------------------------

double accumulate_xe_gradients(CaptionModel& model, std::span<const TrainingExample* const> batch) {
  std::size_t captions = 0;
  for (const auto* ex : batch) captions += ex->targets.size();
  if (captions == 0) throw std::invalid_argument("training: batch has no targets");
  const double share = 1.0 / static_cast<double>(captions);
  double total = 0.0;
  for (const auto* ex : batch) {
    if (ex->targets.empty()) continue;
    Graph g;
    layers::Scope s{g, model.params(), false};
    const EncodedVars enc = model.encoder().encode(s, ex->regions, ex->context);
    const Var memory = ops::concat_rows(enc.visual, enc.text);
    // The image is encoded once and shared by all of its captions.
    Var loss = model.decoder().teacher_forced_loss(s, memory, ex->targets.front());
    for (std::size_t i = 1; i < ex->targets.size(); ++i) {
      loss = ops::add(loss, model.decoder().teacher_forced_loss(s, memory, ex->targets[i]));
    }
    loss = ops::scale(loss, share);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      throw NumericError("training: non-finite loss on image " + ex->image_id);
    }
    total += value;
    g.backward(loss);
  }
  return total;
}

namespace {

void log_json(std::ostream* log, const nlohmann::json& j) {
  if (log) *log << j.dump() << '\n';
}

}  // namespace

TrainResult train_xe(CaptionModel& model, std::vector<TrainingExample>& train, const std::vector<TrainingExample>& val,
                     const TrainConfig& config, std::ostream* log, const EpochRefresh& refresh) {
  if (train.empty()) throw std::invalid_argument("train_xe: empty training split");
  if (!(config.learning_rate > 0.0)) throw std::invalid_argument("train_xe: learning rate must be positive");
  if (config.batch_size == 0) throw std::invalid_argument("train_xe: batch size must be positive");
  if (config.max_epochs == 0) throw std::invalid_argument("train_xe: max_epochs must be positive");

  model.params().set_trainable(ParamGroup::encoder, true);
  model.params().set_trainable(ParamGroup::decoder, true);
  AdamW optimizer(config.optimizer);
  EarlyStopper stopper(config.patience);
  std::mt19937_64 rng(config.seed);
  TrainResult result;
  std::vector<Tensor> best;
  const std::size_t steps_per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
  std::vector<std::size_t> order(train.size());

  bool done = false;
  for (std::size_t epoch = 0; epoch < config.max_epochs && !done; ++epoch) {
    if (refresh) refresh(train, epoch);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      if (config.max_steps != 0 && result.steps >= config.max_steps) {
        done = true;
        break;
      }
      std::vector<const TrainingExample*> batch;
      for (std::size_t i = step * config.batch_size; i < std::min(train.size(), (step + 1) * config.batch_size); ++i) {
        batch.push_back(&train[order[i]]);
      }
      model.params().zero_grad();
      const double loss = accumulate_xe_gradients(model, batch);
      const double enc_mult =
          config.encoder_warmup ? encoder_warmup_multiplier(epoch, step, steps_per_epoch) : 1.0;
      optimizer.step(model.params(), config.learning_rate, enc_mult, 1.0);
      ++result.steps;
      ++epoch_steps;
      epoch_loss += loss;
      result.step_losses.push_back(loss);
      result.encoder_multipliers.push_back(enc_mult);
      log_json(log, {{"step", result.steps},
                     {"epoch", epoch + 1},
                     {"loss", loss},
                     {"encoder_lr_multiplier", enc_mult},
                     {"decoder_lr_multiplier", 1.0}});
    }
    if (epoch_steps == 0) break;
    ++result.epochs_run;
    const double mean_loss = epoch_loss / static_cast<double>(epoch_steps);
    result.epoch_losses.push_back(mean_loss);
    nlohmann::json epoch_log{{"epoch", epoch + 1}, {"mean_loss", mean_loss}};
    if (!val.empty()) {
      const double bleu = evaluate(model, val, config.beam_width).report.bleu4;
      result.val_bleu4.push_back(bleu);
      const bool stop = stopper.update(bleu);
      if (stopper.improved()) best = model.snapshot();
      epoch_log["val_bleu4"] = bleu;
      if (stop) {
        result.stopped_early = true;
        done = true;
      }
    }
    log_json(log, epoch_log);
    if (config.target_loss > 0.0 && mean_loss < config.target_loss) done = true;
  }
  if (!best.empty()) {
    model.restore(best);
    result.best_epoch = stopper.best_epoch();
    result.best_bleu4 = stopper.best_score();
  }
  return result;
}

// ---------------------------------------------------------------------------

ScstStepResult scst_step(CaptionModel& model, std::span<const TrainingExample* const> batch, const CiderScorer& reward,
                         AdamW& optimizer, double learning_rate, std::mt19937_64& rng) {
  if (batch.empty()) throw std::invalid_argument("scst: empty batch");
  ParameterSet& params = model.params();
  params.set_trainable(ParamGroup::encoder, false);
  params.set_trainable(ParamGroup::decoder, true);
  params.zero_grad();

  auto score = [&](const std::string& caption, const std::vector<std::string>& refs) {
    return tokenize(caption).empty() ? 0.0 : reward.score(caption, refs);
  };
  ScstStepResult out;
  const double share = 1.0 / static_cast<double>(batch.size());
  for (const auto* ex : batch) {
    if (ex->references.empty()) throw std::invalid_argument("scst: image " + ex->image_id + " has no references");
    const EncoderOutput encoded = model.encode(ex->regions, ex->context);
    const StepScorer scorer = model.decoder().scorer(params, encoded);
    const auto limits = model.decoder().limits();
    const CaptionHypothesis sample = sample_sequence(scorer, rng, limits);
    const CaptionHypothesis greedy = greedy_decode(scorer, limits);
    const double r_sample = score(model.text(sample), ex->references);
    const double r_greedy = score(model.text(greedy), ex->references);
    const double advantage = r_sample - r_greedy;
    out.mean_advantage += advantage * share;
    out.mean_sample_reward += r_sample * share;
    out.mean_greedy_reward += r_greedy * share;
    if (advantage == 0.0) continue;

    Graph g;
    layers::Scope s{g, params, false};
    const DecoderMemory memory = DecoderMemory::from(encoded);
    const std::vector<int> inputs(sample.tokens.begin(), sample.tokens.end() - 1);
    const std::vector<int> targets(sample.tokens.begin() + 1, sample.tokens.end());
    const Var logits = model.decoder().forward(s, g.constant(memory.rows), inputs);
    // sum of -log P weighted by the advantage: descending it raises the
    // probability of better-than-greedy samples.
    const std::vector<double> weights(targets.size(), advantage * share);
    const Var loss = ops::token_nll(logits, targets, weights);
    if (!std::isfinite(loss.value()[0])) throw NumericError("scst: non-finite loss on image " + ex->image_id);
    g.backward(loss);
  }
  optimizer.step(params, learning_rate);
  return out;
}

std::vector<ScstStepResult> train_scst(CaptionModel& model, const std::vector<TrainingExample>& train,
                                       const CiderScorer& reward, const ScstConfig& config, std::ostream* log) {
  if (train.empty()) throw std::invalid_argument("train_scst: empty training split");
  if (config.batch_size == 0) throw std::invalid_argument("train_scst: batch size must be positive");
  AdamW optimizer(config.optimizer);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  std::vector<ScstStepResult> results;
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<const TrainingExample*> batch;
    while (batch.size() < std::min(config.batch_size, train.size())) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(&train[order[cursor++]]);
    }
    results.push_back(scst_step(model, batch, reward, optimizer, config.learning_rate, rng));
    log_json(log, {{"scst_step", step + 1},
                   {"mean_advantage", results.back().mean_advantage},
                   {"mean_sample_reward", results.back().mean_sample_reward},
                   {"mean_greedy_reward", results.back().mean_greedy_reward}});
  }
  return results;
}

Evaluation evaluate(const CaptionModel& model, std::span<const TrainingExample> examples, std::size_t beam_width) {
  if (examples.empty()) throw std::invalid_argument("evaluate: no images");
  Evaluation ev;
  for (const auto& ex : examples) {
    if (ex.references.empty()) throw std::invalid_argument("evaluate: image " + ex.image_id + " has no references");
    const auto hyp = model.generate(model.encode(ex.regions, ex.context), beam_width);
    ev.captions.push_back({ex.image_id, model.text(hyp), ex.references});
  }
  ev.report = score_captions(ev.captions);
  return ev;
}

}  // namespace ragcap
