#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ima/error.hpp"
#include "ima/rng.hpp"

namespace ima {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct TensorData {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty means "no gradient yet"
};

// Shared handle to an n-d double array with an optional gradient buffer.
// Copying a Tensor copies the handle; clone() copies the storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);
  explicit Tensor(std::shared_ptr<TensorData> impl) : impl_(std::move(impl)) {}

  static Tensor scalar(double value) { return Tensor(Shape{1}, {value}); }
  static Tensor randn(Shape shape, Rng& rng, double sigma = 1.0);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  bool valid() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t size() const { return impl().data.size(); }

  double* data() { return impl().data.data(); }
  const double* data() const { return impl().data.data(); }
  std::vector<double>& values() { return impl().data; }
  const std::vector<double>& values() const { return impl().data; }

  double item() const;  // requires size() == 1

  bool requires_grad() const { return impl().requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return !impl().grad.empty(); }
  const std::vector<double>& grad() const;
  std::vector<double>& mutable_grad();  // allocates zeros on first use
  void zero_grad() { impl().grad.clear(); }

  Tensor clone() const;   // deep copy, keeps requires_grad, drops grad
  Tensor detach() const;  // deep copy with requires_grad = false

  const std::shared_ptr<TensorData>& ptr() const { return impl_; }

 private:
  TensorData& impl();
  const TensorData& impl() const;
  std::shared_ptr<TensorData> impl_;
};

// One recorded operation. Nodes are appended in forward execution order;
// backward replays them once, in reverse.
struct TapeNode {
  const char* op;
  std::vector<std::shared_ptr<TensorData>> inputs;
  std::shared_ptr<TensorData> output;
  std::function<void()> backward;
};

// Reverse-mode tape. Constructing a Tape makes it the recording target for
// the current thread; destruction restores the previous one. A tape and the
// tensors it references form a single-threaded unit of work.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();
  static bool recording() { return current() != nullptr; }

  void record(const char* op, std::vector<std::shared_ptr<TensorData>> inputs,
              std::shared_ptr<TensorData> output, std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Leaf
  // gradients accumulate across calls; intermediate gradients are reset at
  // the start of each call.
  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<TapeNode> nodes_;
};

// Runs the enclosed scope without recording, regardless of outer tapes.
class TapeSuspend {
 public:
  TapeSuspend();
  ~TapeSuspend();
  TapeSuspend(const TapeSuspend&) = delete;
  TapeSuspend& operator=(const TapeSuspend&) = delete;
};

// Backward through the innermost active tape.
void backward(const Tensor& loss);

enum class Reduction { Sum, Mean };

// ---- differentiable operations ----------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a x b^T, b stored [n,k]
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a^T x b, a stored [k,m]

Tensor add(const Tensor& a, const Tensor& b);  // same shape
Tensor scale(const Tensor& x, double factor);
Tensor add_row_bias(const Tensor& x, const Tensor& bias);  // [m,n] + [n]
Tensor relu(const Tensor& x);
Tensor softmax_rows(const Tensor& x);  // rank 2, softmax over last axis
Tensor dropout(const Tensor& x, double p, bool train, Rng& rng);
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor embedding(std::span<const int> ids, const Tensor& table);
Tensor sum(const Tensor& x);  // scalar

Tensor conv2d(const Tensor& x, const Tensor& weight,
              std::pair<std::size_t, std::size_t> stride);

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 Tensor& running_mean, Tensor& running_var, Tensor& num_updates,
                 bool train, double momentum = 0.1, double eps = 1e-5);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// loss = -sum_rows sum_c q_c * log p_c with q = (1-eps)*onehot + eps/V.
// logits: [rows, V] or [B, l, V]; targets: one id per row; pad rows are
// excluded from the sum. Mean divides by the number of non-pad rows.
Tensor cross_entropy_label_smoothed(const Tensor& logits, std::span<const int> targets,
                                    double smoothing, int pad_id,
                                    Reduction reduction = Reduction::Sum);

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& x, Shape new_shape);  // same element order
Tensor channel_plane(const Tensor& x, std::size_t c);        // [C,H,W] -> [H,W]
Tensor stack_planes(const std::vector<Tensor>& planes);      // k x [H,W] -> [k,H,W]
Tensor time_major_flatten(const Tensor& x);  // [C,T,F] -> [T, C*F]

// ---- constants ---------------------------------------------------------

Tensor sinusoidal_positions(std::size_t length, std::size_t dim);
Tensor causal_mask(std::size_t length);  // 0 on/below diagonal, -1e9 above

// ---- gradient verification ---------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  double h = 0.0;
  double tol = 0.0;
  std::size_t coords_checked = 0;
  bool pass = false;
};

// Central-difference check of d f(x) / dx against the tape gradient.
// f must be scalar-valued and deterministic. max_coords == 0 checks every
// coordinate; otherwise a seeded sample of coordinates is used.
GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                  const Tensor& x0, double h = 1e-5, double tol = 1e-6,
                                  std::size_t max_coords = 0, std::uint64_t coord_seed = 0);

// Same check for a loss that closes over a set of parameter tensors.
GradCheckReport finite_diff_check_params(const std::function<Tensor()>& loss_fn,
                                         std::span<Tensor> params, double h = 1e-5,
                                         double tol = 1e-6,
                                         std::size_t max_coords_per_tensor = 0,
                                         std::uint64_t coord_seed = 0);

}  // namespace ima
