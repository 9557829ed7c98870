#include "ima/optim.hpp"

#include <cmath>

namespace ima {

double NoamSchedule::lr_at(std::size_t step) const {
  if (step <= warmup_steps) {
    const double frac = static_cast<double>(step) / static_cast<double>(warmup_steps);
    return lr_init + (lr_max - lr_init) * frac;
  }
  return lr_max * std::sqrt(static_cast<double>(warmup_steps) / static_cast<double>(step));
}

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  slots_.reserve(params.size());
  for (Tensor& p : params) {
    Slot slot;
    slot.m.assign(p.size(), 0.0);
    slot.v.assign(p.size(), 0.0);
    slot.param = std::move(p);
    slots_.push_back(std::move(slot));
  }
}

void AdamOptimizer::step(double lr) {
  ++t_;
  const double bias1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bias2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (Slot& slot : slots_) {
    if (!slot.param.has_grad()) {
      fail(ErrorKind::Contract, "adam step with a missing gradient");
    }
    const auto& g = slot.param.grad();
    double* theta = slot.param.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g[i];
      slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double m_hat = slot.m[i] / bias1;
      const double v_hat = slot.v[i] / bias2;
      theta[i] -= lr * m_hat / (std::sqrt(v_hat) + eps_);
    }
  }
}

void AdamOptimizer::zero_grad() {
  for (Slot& slot : slots_) slot.param.zero_grad();
}

void SgdOptimizer::step(double lr) {
  for (Tensor& p : params_) {
    if (!p.has_grad()) fail(ErrorKind::Contract, "sgd step with a missing gradient");
    const auto& g = p.grad();
    double* theta = p.data();
    for (std::size_t i = 0; i < g.size(); ++i) theta[i] -= lr * g[i];
  }
}

void SgdOptimizer::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

void scale_gradients(std::span<Tensor> params, double factor) {
  for (Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (double& g : p.mutable_grad()) g *= factor;
  }
}

std::vector<TrainStepStat> train_loop(STModel& model, std::span<const TrainItem> dataset,
                                      const NoamSchedule& schedule, const TrainOptions& options) {
  if (dataset.empty()) fail(ErrorKind::Empty, "train_loop: empty dataset");
  if (options.batch_size == 0 || options.accum == 0) {
    fail(ErrorKind::Parameter, "train_loop: batch_size and accum must be positive");
  }

  std::vector<TrainStepStat> stats;
  if (options.epochs == 0) return stats;

  model.set_train(true);
  std::vector<Tensor> params = model.parameters();
  AdamOptimizer adam(params);

  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::size_t step_index = 0;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(options.shuffle_seed, epoch + 1));
    shuffle_rng.shuffle(order);

    std::size_t batches_pending = 0;
    std::size_t segments_pending = 0;
    double loss_pending = 0.0;

    auto flush = [&] {
      if (batches_pending == 0) return;
      scale_gradients(params, 1.0 / static_cast<double>(segments_pending));
      const double lr = schedule.lr_at(step_index);
      adam.step(lr);
      adam.zero_grad();
      stats.push_back(TrainStepStat{epoch, step_index, lr,
                                    loss_pending / static_cast<double>(segments_pending)});
      ++step_index;
      batches_pending = 0;
      segments_pending = 0;
      loss_pending = 0.0;
    };

    for (std::size_t begin = 0; begin < order.size(); begin += options.batch_size) {
      const std::size_t end = std::min(begin + options.batch_size, order.size());
      Tape tape;
      Tensor batch_loss;
      for (std::size_t i = begin; i < end; ++i) {
        const TrainItem& item = dataset[order[i]];
        Tensor item_loss = model.sequence_loss(item.features, item.target_ids, options.label_smoothing);
        batch_loss = batch_loss.valid() ? add(batch_loss, item_loss) : item_loss;
      }
      tape.backward(batch_loss);
      loss_pending += batch_loss.item();
      segments_pending += end - begin;
      if (++batches_pending == options.accum) flush();
    }
    flush();  // leftover partial accumulation closes out the epoch
  }
  return stats;
}

}  // namespace ima
