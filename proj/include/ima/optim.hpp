#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ima/model.hpp"
#include "ima/tensor.hpp"

namespace ima {

// Linear warmup from lr_init to lr_max over warmup_steps, then inverse-sqrt
// decay anchored so the curve is continuous at the warmup boundary.
struct NoamSchedule {
  double lr_init = 3e-4;
  std::size_t warmup_steps = 4000;
  double lr_max = 1e-3;

  double lr_at(std::size_t step) const;
};

// Bias-corrected Adam. The defaults follow the noam-decay convention
// (beta2 = 0.98, eps = 1e-9); epsilon is added outside the square root.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.98,
                         double eps = 1e-9);

  void step(double lr);
  void zero_grad();
  std::size_t step_count() const { return t_; }

 private:
  struct Slot {
    Tensor param;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
  double beta1_, beta2_, eps_;
};

// Plain gradient descent, kept for the optimizer-comparison experiment.
class SgdOptimizer {
 public:
  explicit SgdOptimizer(std::vector<Tensor> params) : params_(std::move(params)) {}

  void step(double lr);
  void zero_grad();

 private:
  std::vector<Tensor> params_;
};

void scale_gradients(std::span<Tensor> params, double factor);

struct TrainItem {
  Tensor features;
  std::vector<int> target_ids;  // BOS ... EOS
};

struct TrainStepStat {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double mean_loss = 0.0;  // summed batch loss / segments in the window
};

struct TrainOptions {
  std::size_t batch_size = 4;
  std::size_t accum = 16;  // optimizer steps are deferred over this many batches
  std::size_t epochs = 1;
  std::uint64_t shuffle_seed = 0;
  double label_smoothing = 0.1;
};

// Shuffled epochs over the dataset; the loss of each batch is the sum of its
// segment losses, gradients accumulate over `accum` batches and are divided
// by the number of segments they cover before the Adam step.
std::vector<TrainStepStat> train_loop(STModel& model, std::span<const TrainItem> dataset,
                                      const NoamSchedule& schedule, const TrainOptions& options);

}  // namespace ima
