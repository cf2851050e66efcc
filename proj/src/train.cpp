#include <cmath>
#include <numbers>

#include "v2pe/errors.hpp"
#include "v2pe/rng.hpp"
#include "v2pe/tinyformer.hpp"

namespace v2pe {

AdamW::AdamW(const ParamLayout& layout, AdamConfig cfg)
    : cfg_(cfg), m_(layout.total(), 0.0f), v_(layout.total(), 0.0f) {}

void AdamW::step(ParamBuffer<float>& params, const ParamBuffer<float>& grads, double lr_scale) {
  ++t_;
  auto p = params.flat();
  const auto g = grads.flat();
  double clip = 1.0;
  if (cfg_.grad_clip > 0.0) {
    double sq = 0.0;
    for (float x : g) sq += static_cast<double>(x) * x;
    const double norm = std::sqrt(sq);
    if (norm > cfg_.grad_clip) clip = cfg_.grad_clip / norm;
  }
  const double lr = cfg_.learning_rate * lr_scale;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<float>(cfg_.beta1);
  const auto b2 = static_cast<float>(cfg_.beta2);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const float gi = static_cast<float>(g[i] * clip);
    m_[i] = b1 * m_[i] + (1.0f - b1) * gi;
    v_[i] = b2 * v_[i] + (1.0f - b2) * gi * gi;
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    double update = mhat / (std::sqrt(vhat) + cfg_.epsilon);
    update += cfg_.weight_decay * p[i];
    p[i] = static_cast<float>(p[i] - lr * update);
  }
}

namespace {

double lr_scale(const AdamConfig& cfg, std::size_t step, std::size_t total) {
  double scale = 1.0;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    scale = static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.cosine_decay && total > cfg.warmup_steps && step >= cfg.warmup_steps) {
    const double progress = static_cast<double>(step - cfg.warmup_steps) /
                            static_cast<double>(total - cfg.warmup_steps);
    const double cos = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    scale = cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cos;
  }
  return scale;
}

}  // namespace

std::vector<TrainLogEntry> train_in_place(Model& model, const TrainConfig& train_cfg,
                                          TrainingSource& source, const DeltaPolicy& policy,
                                          const std::function<void(const TrainLogEntry&)>& on_log) {
  policy.validate();
  AdamW opt(model.params().layout(), train_cfg.adam);
  std::vector<TrainLogEntry> log;
  log.reserve(train_cfg.steps);
  const bool variable = std::holds_alternative<VariableDeltas>(policy.mode);

  for (std::size_t step = 0; step < train_cfg.steps; ++step) {
    auto seqs = source.batch(step);
    if (seqs.empty()) throw ConfigError("training source returned an empty batch");

    TrainLogEntry entry;
    entry.step = step;
    std::vector<TrainingExample> batch;
    batch.reserve(seqs.size());
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      DeltaPolicy p = policy;
      if (variable) {
        std::get<VariableDeltas>(p.mode).seed = derive_seed(train_cfg.seed, {step, i});
      }
      const DeltaAssignment a = assign_deltas(seqs[i].stream, p);
      for (const auto& [image, d] : a.per_image) ++entry.sampled_deltas[d];
      PositionSequence pos = derive_positions(seqs[i].stream, a, p.target);
      batch.push_back({std::move(seqs[i].stream), std::move(pos), std::move(seqs[i].targets)});
    }

    auto result = loss_and_grads<float>(model, batch);
    if (!std::isfinite(result.loss)) throw TrainingError("non-finite training loss", step);
    for (float g : result.grads.flat()) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient", step);
    }
    opt.step(model.params(), result.grads, lr_scale(train_cfg.adam, step, train_cfg.steps));

    entry.loss = result.loss;
    if (on_log && train_cfg.log_every > 0 &&
        (step % train_cfg.log_every == 0 || step + 1 == train_cfg.steps)) {
      on_log(entry);
    }
    log.push_back(std::move(entry));
  }
  return log;
}

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  TrainingSource& source, const DeltaPolicy& policy,
                  const std::function<void(const TrainLogEntry&)>& on_log) {
  TrainResult result{Model(model_cfg), {}};
  result.log = train_in_place(result.model, train_cfg, source, policy, on_log);
  return result;
}

}  // namespace v2pe
