#include "ima/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ima/kernels.hpp"

namespace ima {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (const std::size_t e : shape) {
    if (e == 0) fail(ErrorKind::ShapeMismatch, "zero extent in shape " + shape_str(shape));
    if (n > (std::size_t{1} << 40) / e) {
      fail(ErrorKind::Overflow, "shape too large: " + shape_str(shape));
    }
    n *= e;
  }
  return n;
}

// ---- Tensor -------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill) {
  const std::size_t n = shape_numel(shape);
  impl_ = std::make_shared<TensorData>();
  impl_->shape = std::move(shape);
  impl_->data.assign(n, fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  const std::size_t n = shape_numel(shape);
  if (n != values.size()) {
    fail(ErrorKind::ShapeMismatch,
         "value count " + std::to_string(values.size()) + " does not fill shape " + shape_str(shape));
  }
  impl_ = std::make_shared<TensorData>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double sigma) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = sigma * rng.normal();
  return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

TensorData& Tensor::impl() {
  if (!impl_) fail(ErrorKind::State, "use of a default-constructed tensor");
  return *impl_;
}

const TensorData& Tensor::impl() const {
  if (!impl_) fail(ErrorKind::State, "use of a default-constructed tensor");
  return *impl_;
}

std::size_t Tensor::extent(std::size_t axis) const {
  const auto& s = impl().shape;
  if (axis >= s.size()) fail(ErrorKind::Index, "axis out of range");
  return s[axis];
}

double Tensor::item() const {
  if (size() != 1) fail(ErrorKind::Contract, "item() on non-scalar tensor " + shape_str(shape()));
  return impl().data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl().requires_grad = on;
  return *this;
}

const std::vector<double>& Tensor::grad() const {
  if (impl().grad.empty()) fail(ErrorKind::State, "gradient not populated");
  return impl().grad;
}

std::vector<double>& Tensor::mutable_grad() {
  auto& d = impl();
  if (d.grad.empty()) d.grad.assign(d.data.size(), 0.0);
  return d.grad;
}

Tensor Tensor::clone() const {
  const auto& d = impl();
  Tensor out(d.shape, d.data);
  out.set_requires_grad(d.requires_grad);
  return out;
}

Tensor Tensor::detach() const {
  const auto& d = impl();
  return Tensor(d.shape, d.data);
}

// ---- Tape ---------------------------------------------------------------

namespace {

thread_local std::vector<Tape*> t_tape_stack;

void ensure_grad(TensorData& d) {
  if (d.grad.empty()) d.grad.assign(d.data.size(), 0.0);
}

}  // namespace

Tape::Tape() { t_tape_stack.push_back(this); }

Tape::~Tape() {
  // Tapes are scoped objects; destruction order matches construction order.
  if (!t_tape_stack.empty() && t_tape_stack.back() == this) t_tape_stack.pop_back();
}

Tape* Tape::current() { return t_tape_stack.empty() ? nullptr : t_tape_stack.back(); }

void Tape::record(const char* op, std::vector<std::shared_ptr<TensorData>> inputs,
                  std::shared_ptr<TensorData> output, std::function<void()> backward) {
  nodes_.push_back(TapeNode{op, std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    fail(ErrorKind::Contract, "backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  // Intermediate gradients are per-call scratch; leaf gradients persist.
  for (auto& node : nodes_) node.output->grad.clear();
  loss.ptr()->grad.assign(1, 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not on the path to the loss
    it->backward();
  }
}

TapeSuspend::TapeSuspend() { t_tape_stack.push_back(nullptr); }

TapeSuspend::~TapeSuspend() {
  if (!t_tape_stack.empty() && t_tape_stack.back() == nullptr) t_tape_stack.pop_back();
}

void backward(const Tensor& loss) {
  Tape* tape = Tape::current();
  if (!tape) fail(ErrorKind::State, "backward called with no active tape");
  tape->backward(loss);
}

// ---- op helpers ----------------------------------------------------------

namespace {

bool want_grad(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::recording()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    fail(ErrorKind::ShapeMismatch,
         std::string(op) + ": expected rank " + std::to_string(rank) + " tensor, got " + shape_str(t.shape()));
  }
}

}  // namespace

// ---- matmul family --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k) {
    fail(ErrorKind::ShapeMismatch,
         "matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out(Shape{m, n});
  kernels::gemm(false, false, m, n, k, a.data(), b.data(), out.data(), false);
  if (want_grad({&a, &b})) {
    out.set_requires_grad(true);
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    Tape::current()->record("matmul", {ad, bd}, od, [ad, bd, od, m, n, k] {
      if (ad->requires_grad) {
        ensure_grad(*ad);  // dA += dC * B^T
        kernels::gemm(false, true, m, k, n, od->grad.data(), bd->data.data(), ad->grad.data(), true);
      }
      if (bd->requires_grad) {
        ensure_grad(*bd);  // dB += A^T * dC
        kernels::gemm(true, false, k, n, m, ad->data.data(), od->grad.data(), bd->grad.data(), true);
      }
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(0);
  if (b.extent(1) != k) {
    fail(ErrorKind::ShapeMismatch,
         "matmul_nt: inner dimensions disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  Tensor out(Shape{m, n});
  kernels::gemm(false, true, m, n, k, a.data(), b.data(), out.data(), false);
  if (want_grad({&a, &b})) {
    out.set_requires_grad(true);
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    Tape::current()->record("matmul_nt", {ad, bd}, od, [ad, bd, od, m, n, k] {
      if (ad->requires_grad) {
        ensure_grad(*ad);  // dA += dC * B
        kernels::gemm(false, false, m, k, n, od->grad.data(), bd->data.data(), ad->grad.data(), true);
      }
      if (bd->requires_grad) {
        ensure_grad(*bd);  // dB += dC^T * A
        kernels::gemm(true, false, n, k, m, od->grad.data(), ad->data.data(), bd->grad.data(), true);
      }
    });
  }
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_tn");
  require_rank(b, 2, "matmul_tn");
  const std::size_t k = a.extent(0), m = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k) {
    fail(ErrorKind::ShapeMismatch,
         "matmul_tn: inner dimensions disagree: " + shape_str(a.shape()) + "^T x " + shape_str(b.shape()));
  }
  Tensor out(Shape{m, n});
  kernels::gemm(true, false, m, n, k, a.data(), b.data(), out.data(), false);
  if (want_grad({&a, &b})) {
    out.set_requires_grad(true);
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    Tape::current()->record("matmul_tn", {ad, bd}, od, [ad, bd, od, m, n, k] {
      if (ad->requires_grad) {
        ensure_grad(*ad);  // dA += B * dC^T
        kernels::gemm(false, true, k, m, n, bd->data.data(), od->grad.data(), ad->grad.data(), true);
      }
      if (bd->requires_grad) {
        ensure_grad(*bd);  // dB += A * dC
        kernels::gemm(false, false, k, n, m, ad->data.data(), od->grad.data(), bd->grad.data(), true);
      }
    });
  }
  return out;
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::ShapeMismatch,
         "add: shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (want_grad({&a, &b})) {
    out.set_requires_grad(true);
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    Tape::current()->record("add", {ad, bd}, od, [ad, bd, od, n] {
      for (auto* side : {ad.get(), bd.get()}) {
        if (!side->requires_grad) continue;
        ensure_grad(*side);
        for (std::size_t i = 0; i < n; ++i) side->grad[i] += od->grad[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = factor * x.data()[i];
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xd = x.ptr(), od = out.ptr();
    Tape::current()->record("scale", {xd}, od, [xd, od, factor, n] {
      ensure_grad(*xd);
      for (std::size_t i = 0; i < n; ++i) xd->grad[i] += factor * od->grad[i];
    });
  }
  return out;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  require_rank(bias, 1, "add_row_bias");
  const std::size_t m = x.extent(0), n = x.extent(1);
  if (bias.extent(0) != n) {
    fail(ErrorKind::ShapeMismatch,
         "add_row_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  }
  Tensor out(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] = x.data()[i * n + j] + bias.data()[j];
  }
  if (want_grad({&x, &bias})) {
    out.set_requires_grad(true);
    auto xd = x.ptr(), bd = bias.ptr(), od = out.ptr();
    Tape::current()->record("add_row_bias", {xd, bd}, od, [xd, bd, od, m, n] {
      if (xd->requires_grad) {
        ensure_grad(*xd);
        for (std::size_t i = 0; i < m * n; ++i) xd->grad[i] += od->grad[i];
      }
      if (bd->requires_grad) {
        ensure_grad(*bd);
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i) s += od->grad[i * n + j];
          bd->grad[j] += s;
        }
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xd = x.ptr(), od = out.ptr();
    Tape::current()->record("relu", {xd}, od, [xd, od, n] {
      ensure_grad(*xd);
      for (std::size_t i = 0; i < n; ++i) {
        if (xd->data[i] > 0.0) xd->grad[i] += od->grad[i];
      }
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  require_rank(x, 2, "softmax_rows");
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  Tensor out(x.shape());
  kernels::softmax_rows(x.data(), out.data(), rows, cols);
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xd = x.ptr(), od = out.ptr();
    Tape::current()->record("softmax_rows", {xd}, od, [xd, od, rows, cols] {
      ensure_grad(*xd);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = od->data.data() + r * cols;
        const double* dy = od->grad.data() + r * cols;
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) dot += y[j] * dy[j];
        double* dx = xd->grad.data() + r * cols;
        for (std::size_t j = 0; j < cols; ++j) dx[j] += y[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, bool train, Rng& rng) {
  if (p < 0.0 || p > 1.0) {
    fail(ErrorKind::Parameter, "dropout probability " + std::to_string(p) + " outside [0,1]");
  }
  if (!train || p == 0.0) return x;  // identity, no draws
  const std::size_t n = x.size();
  Tensor out(x.shape());
  auto mask = std::make_shared<std::vector<double>>(n);
  const double keep_scale = p < 1.0 ? 1.0 / (1.0 - p) : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    (*mask)[i] = rng.uniform() < p ? 0.0 : keep_scale;
    out.data()[i] = x.data()[i] * (*mask)[i];
  }
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xd = x.ptr(), od = out.ptr();
    Tape::current()->record("dropout", {xd}, od, [xd, od, mask, n] {
      ensure_grad(*xd);
      for (std::size_t i = 0; i < n; ++i) xd->grad[i] += od->grad[i] * (*mask)[i];
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_row_bias(matmul(x, weight), bias);
}

Tensor embedding(std::span<const int> ids, const Tensor& table) {
  require_rank(table, 2, "embedding");
  if (ids.empty()) fail(ErrorKind::Empty, "embedding: empty id sequence");
  const std::size_t vocab = table.extent(0), dim = table.extent(1);
  for (const int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      fail(ErrorKind::Index,
           "embedding: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  Tensor out(Shape{ids.size(), dim});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const double* src = table.data() + static_cast<std::size_t>(ids[r]) * dim;
    std::copy(src, src + dim, out.data() + r * dim);
  }
  if (want_grad({&table})) {
    out.set_requires_grad(true);
    auto td = table.ptr(), od = out.ptr();
    std::vector<int> idv(ids.begin(), ids.end());
    Tape::current()->record("embedding", {td}, od, [td, od, idv = std::move(idv), dim] {
      ensure_grad(*td);
      for (std::size_t r = 0; r < idv.size(); ++r) {
        double* dst = td->grad.data() + static_cast<std::size_t>(idv[r]) * dim;
        const double* src = od->grad.data() + r * dim;
        for (std::size_t j = 0; j < dim; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (const double v : x.values()) s += v;
  Tensor out = Tensor::scalar(s);
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xd = x.ptr(), od = out.ptr();
    Tape::current()->record("sum", {xd}, od, [xd, od] {
      ensure_grad(*xd);
      const double g = od->grad[0];
      for (double& v : xd->grad) v += g;
    });
  }
  return out;
}

// ---- conv2d ----------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& weight, std::pair<std::size_t, std::size_t> stride) {
  require_rank(x, 3, "conv2d");
  require_rank(weight, 4, "conv2d");
  const auto [sh, sw] = stride;
  const bool stride_ok = (sh == 1 && sw == 1) || (sh == 2 && sw == 2);
  if (!stride_ok) {
    fail(ErrorKind::Parameter, "conv2d: stride must be (1,1) or (2,2)");
  }
  if (weight.extent(2) != 3 || weight.extent(3) != 3) {
    fail(ErrorKind::ShapeMismatch, "conv2d: kernel must be 3x3, got " + shape_str(weight.shape()));
  }
  const std::size_t c_in = x.extent(0), h = x.extent(1), w_in = x.extent(2);
  const std::size_t c_out = weight.extent(0);
  if (weight.extent(1) != c_in) {
    fail(ErrorKind::ShapeMismatch,
         "conv2d: input channels disagree: " + shape_str(x.shape()) + " vs " + shape_str(weight.shape()));
  }
  if (h == 0 || w_in == 0) fail(ErrorKind::Empty, "conv2d: empty spatial input");
  const std::size_t oh = kernels::conv2d_out_extent(h, sh);
  const std::size_t ow = kernels::conv2d_out_extent(w_in, sw);
  Tensor out(Shape{c_out, oh, ow});
  kernels::conv2d_forward(x.data(), weight.data(), out.data(), c_in, h, w_in, c_out, sh, sw);
  if (want_grad({&x, &weight})) {
    out.set_requires_grad(true);
    auto xd = x.ptr(), wd = weight.ptr(), od = out.ptr();
    Tape::current()->record("conv2d", {xd, wd}, od, [xd, wd, od, c_in, h, w_in, c_out, sh, sw] {
      if (xd->requires_grad) {
        ensure_grad(*xd);
        kernels::conv2d_backward_input(od->grad.data(), wd->data.data(), xd->grad.data(),
                                       c_in, h, w_in, c_out, sh, sw);
      }
      if (wd->requires_grad) {
        ensure_grad(*wd);
        kernels::conv2d_backward_weight(od->grad.data(), xd->data.data(), wd->grad.data(),
                                        c_in, h, w_in, c_out, sh, sw);
      }
    });
  }
  return out;
}

// ---- normalization ----------------------------------------------------------

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 Tensor& running_mean, Tensor& running_var, Tensor& num_updates,
                 bool train, double momentum, double eps) {
  if (x.rank() < 2) fail(ErrorKind::ShapeMismatch, "batchnorm: need channel axis, got " + shape_str(x.shape()));
  const std::size_t channels = x.extent(0);
  const std::size_t per_channel = x.size() / channels;
  for (const Tensor* t : {&gamma, &beta}) {
    if (t->size() != channels) {
      fail(ErrorKind::ShapeMismatch, "batchnorm: affine parameters do not match channel count");
    }
  }
  if (running_mean.size() != channels || running_var.size() != channels) {
    fail(ErrorKind::ShapeMismatch, "batchnorm: running statistics do not match channel count");
  }

  Tensor out(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_sigma = std::make_shared<std::vector<double>>(channels);

  if (train) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double* xc = x.data() + c * per_channel;
      double mean = 0.0;
      for (std::size_t i = 0; i < per_channel; ++i) mean += xc[i];
      mean /= static_cast<double>(per_channel);
      double var = 0.0;
      for (std::size_t i = 0; i < per_channel; ++i) {
        const double d = xc[i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(per_channel);
      const double inv = 1.0 / std::sqrt(var + eps);
      (*inv_sigma)[c] = inv;
      for (std::size_t i = 0; i < per_channel; ++i) {
        const double h = (xc[i] - mean) * inv;
        (*xhat)[c * per_channel + i] = h;
        out.data()[c * per_channel + i] = gamma.data()[c] * h + beta.data()[c];
      }
      running_mean.data()[c] = (1.0 - momentum) * running_mean.data()[c] + momentum * mean;
      running_var.data()[c] = (1.0 - momentum) * running_var.data()[c] + momentum * var;
    }
    num_updates.data()[0] += 1.0;
  } else {
    if (num_updates.item() < 1.0) {
      fail(ErrorKind::State, "batchnorm: eval mode before any running-statistics update");
    }
    for (std::size_t c = 0; c < channels; ++c) {
      const double inv = 1.0 / std::sqrt(running_var.data()[c] + eps);
      (*inv_sigma)[c] = inv;
      const double* xc = x.data() + c * per_channel;
      for (std::size_t i = 0; i < per_channel; ++i) {
        const double h = (xc[i] - running_mean.data()[c]) * inv;
        (*xhat)[c * per_channel + i] = h;
        out.data()[c * per_channel + i] = gamma.data()[c] * h + beta.data()[c];
      }
    }
  }

  if (want_grad({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    auto xd = x.ptr(), gd = gamma.ptr(), bd = beta.ptr(), od = out.ptr();
    Tape::current()->record(
        "batchnorm", {xd, gd, bd}, od,
        [xd, gd, bd, od, xhat, inv_sigma, channels, per_channel, train] {
          const double n = static_cast<double>(per_channel);
          for (std::size_t c = 0; c < channels; ++c) {
            const double* dy = od->grad.data() + c * per_channel;
            const double* h = xhat->data() + c * per_channel;
            double sum_dy = 0.0, sum_dyh = 0.0;
            for (std::size_t i = 0; i < per_channel; ++i) {
              sum_dy += dy[i];
              sum_dyh += dy[i] * h[i];
            }
            if (gd->requires_grad) {
              ensure_grad(*gd);
              gd->grad[c] += sum_dyh;
            }
            if (bd->requires_grad) {
              ensure_grad(*bd);
              bd->grad[c] += sum_dy;
            }
            if (xd->requires_grad) {
              ensure_grad(*xd);
              const double g = gd->data[c];
              const double inv = (*inv_sigma)[c];
              double* dx = xd->grad.data() + c * per_channel;
              if (train) {
                // batch statistics participate in the gradient
                for (std::size_t i = 0; i < per_channel; ++i) {
                  dx[i] += g * inv * (dy[i] - sum_dy / n - h[i] * (sum_dyh / n));
                }
              } else {
                for (std::size_t i = 0; i < per_channel; ++i) dx[i] += g * inv * dy[i];
              }
            }
          }
        });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  if (gamma.size() != cols || beta.size() != cols) {
    fail(ErrorKind::ShapeMismatch, "layer_norm: affine parameters do not match feature count");
  }
  Tensor out(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_sigma = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double mean = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[r] = inv;
    for (std::size_t j = 0; j < cols; ++j) {
      const double h = (xr[j] - mean) * inv;
      (*xhat)[r * cols + j] = h;
      out.data()[r * cols + j] = gamma.data()[j] * h + beta.data()[j];
    }
  }
  if (want_grad({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    auto xd = x.ptr(), gd = gamma.ptr(), bd = beta.ptr(), od = out.ptr();
    Tape::current()->record("layer_norm", {xd, gd, bd}, od, [xd, gd, bd, od, xhat, inv_sigma, rows, cols] {
      const double n = static_cast<double>(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* dy = od->grad.data() + r * cols;
        const double* h = xhat->data() + r * cols;
        double sum_gdy = 0.0, sum_gdyh = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
          const double gdy = gd->data[j] * dy[j];
          sum_gdy += gdy;
          sum_gdyh += gdy * h[j];
        }
        if (xd->requires_grad) {
          ensure_grad(*xd);
          const double inv = (*inv_sigma)[r];
          double* dx = xd->grad.data() + r * cols;
          for (std::size_t j = 0; j < cols; ++j) {
            const double gdy = gd->data[j] * dy[j];
            dx[j] += inv * (gdy - sum_gdy / n - h[j] * (sum_gdyh / n));
          }
        }
        if (gd->requires_grad) {
          ensure_grad(*gd);
          for (std::size_t j = 0; j < cols; ++j) gd->grad[j] += dy[j] * h[j];
        }
        if (bd->requires_grad) {
          ensure_grad(*bd);
          for (std::size_t j = 0; j < cols; ++j) bd->grad[j] += dy[j];
        }
      }
    });
  }
  return out;
}

// ---- loss --------------------------------------------------------------------

Tensor cross_entropy_label_smoothed(const Tensor& logits, std::span<const int> targets,
                                    double smoothing, int pad_id, Reduction reduction) {
  if (logits.rank() != 2 && logits.rank() != 3) {
    fail(ErrorKind::ShapeMismatch, "cross_entropy: logits must be [rows,V] or [B,l,V]");
  }
  if (smoothing < 0.0 || smoothing >= 1.0) {
    fail(ErrorKind::Parameter, "cross_entropy: smoothing outside [0,1)");
  }
  const std::size_t vocab = logits.extent(logits.rank() - 1);
  const std::size_t rows = logits.size() / vocab;
  if (targets.size() != rows) {
    fail(ErrorKind::ShapeMismatch,
         "cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  }
  std::size_t valid = 0;
  for (const int t : targets) {
    if (t == pad_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      fail(ErrorKind::Index, "cross_entropy: target id " + std::to_string(t) + " outside vocabulary");
    }
    ++valid;
  }
  if (valid == 0) fail(ErrorKind::Contract, "cross_entropy: every position is padding");

  auto probs = std::make_shared<std::vector<double>>(logits.size());
  kernels::softmax_rows(logits.data(), probs->data(), rows, vocab);

  double total = 0.0;
  const double uniform_q = smoothing / static_cast<double>(vocab);
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == pad_id) continue;
    const double* xr = logits.data() + r * vocab;
    double mx = xr[0];
    for (std::size_t c = 1; c < vocab; ++c) mx = std::max(mx, xr[c]);
    double sum_exp = 0.0, sum_logits = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      sum_exp += std::exp(xr[c] - mx);
      sum_logits += xr[c];
    }
    const double lse = mx + std::log(sum_exp);
    // -sum_c q_c (x_c - lse) with sum_c q_c == 1
    total += lse - (1.0 - smoothing) * xr[targets[r]] - uniform_q * sum_logits;
  }
  if (reduction == Reduction::Mean) total /= static_cast<double>(valid);

  Tensor out = Tensor::scalar(total);
  if (want_grad({&logits})) {
    out.set_requires_grad(true);
    auto xd = logits.ptr(), od = out.ptr();
    std::vector<int> tgt(targets.begin(), targets.end());
    Tape::current()->record(
        "cross_entropy", {xd}, od,
        [xd, od, probs, tgt = std::move(tgt), rows, vocab, smoothing, uniform_q, pad_id, reduction, valid] {
          ensure_grad(*xd);
          double g = od->grad[0];
          if (reduction == Reduction::Mean) g /= static_cast<double>(valid);
          for (std::size_t r = 0; r < rows; ++r) {
            if (tgt[r] == pad_id) continue;
            const double* p = probs->data() + r * vocab;
            double* dx = xd->grad.data() + r * vocab;
            for (std::size_t c = 0; c < vocab; ++c) {
              double q = uniform_q;
              if (c == static_cast<std::size_t>(tgt[r])) q += 1.0 - smoothing;
              dx[c] += g * (p[c] - q);
            }
          }
        });
  }
  return out;
}

// ---- shape surgery --------------------------------------------------------------

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "slice_cols");
  const std::size_t m = x.extent(0), n = x.extent(1);
  if (count == 0 || start + count > n) {
    fail(ErrorKind::Index, "slice_cols: range [" + std::to_string(start) + "," +
                               std::to_string(start + count) + ") outside " + shape_str(x.shape()));
  }
  Tensor out(Shape{m, count});
  for (std::size_t i = 0; i < m; ++i) {
    const double* src = x.data() + i * n + start;
    std::copy(src, src + count, out.data() + i * count);
  }
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xd = x.ptr(), od = out.ptr();
    Tape::current()->record("slice_cols", {xd}, od, [xd, od, m, n, start, count] {
      ensure_grad(*xd);
      for (std::size_t i = 0; i < m; ++i) {
        const double* src = od->grad.data() + i * count;
        double* dst = xd->grad.data() + i * n + start;
        for (std::size_t j = 0; j < count; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail(ErrorKind::Empty, "concat_cols: no parts");
  const std::size_t m = parts[0].extent(0);
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.extent(0) != m) fail(ErrorKind::ShapeMismatch, "concat_cols: row counts disagree");
    total += p.extent(1);
  }
  Tensor out(Shape{m, total});
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t cols = p.extent(1);
    for (std::size_t i = 0; i < m; ++i) {
      std::copy(p.data() + i * cols, p.data() + (i + 1) * cols, out.data() + i * total + offset);
    }
    offset += cols;
  }
  bool any_grad = false;
  for (const Tensor& p : parts) any_grad = any_grad || p.requires_grad();
  if (Tape::recording() && any_grad) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorData>> ins;
    ins.reserve(parts.size());
    for (const Tensor& p : parts) ins.push_back(p.ptr());
    auto od = out.ptr();
    Tape::current()->record("concat_cols", ins, od, [ins, od, m, total] {
      std::size_t off = 0;
      for (const auto& p : ins) {
        const std::size_t cols = p->data.size() / m;
        if (p->requires_grad) {
          ensure_grad(*p);
          for (std::size_t i = 0; i < m; ++i) {
            const double* src = od->grad.data() + i * total + off;
            double* dst = p->grad.data() + i * cols;
            for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j];
          }
        }
        off += cols;
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.size()) {
    fail(ErrorKind::ShapeMismatch,
         "reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(new_shape));
  }
  Tensor out(std::move(new_shape), x.values());
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xd = x.ptr(), od = out.ptr();
    Tape::current()->record("reshape", {xd}, od, [xd, od] {
      ensure_grad(*xd);
      for (std::size_t i = 0; i < xd->grad.size(); ++i) xd->grad[i] += od->grad[i];
    });
  }
  return out;
}

Tensor channel_plane(const Tensor& x, std::size_t c) {
  require_rank(x, 3, "channel_plane");
  const std::size_t channels = x.extent(0), h = x.extent(1), w = x.extent(2);
  if (c >= channels) fail(ErrorKind::Index, "channel_plane: channel out of range");
  const std::size_t plane = h * w;
  Tensor out(Shape{h, w},
             std::vector<double>(x.data() + c * plane, x.data() + (c + 1) * plane));
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xd = x.ptr(), od = out.ptr();
    Tape::current()->record("channel_plane", {xd}, od, [xd, od, c, plane] {
      ensure_grad(*xd);
      for (std::size_t i = 0; i < plane; ++i) xd->grad[c * plane + i] += od->grad[i];
    });
  }
  return out;
}

Tensor stack_planes(const std::vector<Tensor>& planes) {
  if (planes.empty()) fail(ErrorKind::Empty, "stack_planes: no planes");
  const std::size_t h = planes[0].extent(0), w = planes[0].extent(1);
  for (const Tensor& p : planes) {
    require_rank(p, 2, "stack_planes");
    if (p.extent(0) != h || p.extent(1) != w) {
      fail(ErrorKind::ShapeMismatch, "stack_planes: plane shapes disagree");
    }
  }
  const std::size_t plane = h * w;
  Tensor out(Shape{planes.size(), h, w});
  for (std::size_t c = 0; c < planes.size(); ++c) {
    std::copy(planes[c].data(), planes[c].data() + plane, out.data() + c * plane);
  }
  bool any_grad = false;
  for (const Tensor& p : planes) any_grad = any_grad || p.requires_grad();
  if (Tape::recording() && any_grad) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorData>> ins;
    for (const Tensor& p : planes) ins.push_back(p.ptr());
    auto od = out.ptr();
    Tape::current()->record("stack_planes", ins, od, [ins, od, plane] {
      for (std::size_t c = 0; c < ins.size(); ++c) {
        if (!ins[c]->requires_grad) continue;
        ensure_grad(*ins[c]);
        for (std::size_t i = 0; i < plane; ++i) ins[c]->grad[i] += od->grad[c * plane + i];
      }
    });
  }
  return out;
}

Tensor time_major_flatten(const Tensor& x) {
  require_rank(x, 3, "time_major_flatten");
  const std::size_t c = x.extent(0), t = x.extent(1), f = x.extent(2);
  Tensor out(Shape{t, c * f});
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ti = 0; ti < t; ++ti) {
      for (std::size_t fi = 0; fi < f; ++fi) {
        out.data()[ti * (c * f) + ci * f + fi] = x.data()[(ci * t + ti) * f + fi];
      }
    }
  }
  if (want_grad({&x})) {
    out.set_requires_grad(true);
    auto xd = x.ptr(), od = out.ptr();
    Tape::current()->record("time_major_flatten", {xd}, od, [xd, od, c, t, f] {
      ensure_grad(*xd);
      for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t ti = 0; ti < t; ++ti) {
          for (std::size_t fi = 0; fi < f; ++fi) {
            xd->grad[(ci * t + ti) * f + fi] += od->grad[ti * (c * f) + ci * f + fi];
          }
        }
      }
    });
  }
  return out;
}

// ---- constants --------------------------------------------------------------------

Tensor sinusoidal_positions(std::size_t length, std::size_t dim) {
  Tensor pe(Shape{length, dim});
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t j = 0; j + 1 < dim; j += 2) {
      const double rate = std::pow(10000.0, static_cast<double>(j) / static_cast<double>(dim));
      pe.data()[t * dim + j] = std::sin(static_cast<double>(t) / rate);
      pe.data()[t * dim + j + 1] = std::cos(static_cast<double>(t) / rate);
    }
    if (dim % 2 == 1) {
      const double rate = std::pow(10000.0, static_cast<double>(dim - 1) / static_cast<double>(dim));
      pe.data()[t * dim + dim - 1] = std::sin(static_cast<double>(t) / rate);
    }
  }
  return pe;
}

Tensor causal_mask(std::size_t length) {
  Tensor mask(Shape{length, length});
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = i + 1; j < length; ++j) mask.data()[i * length + j] = -1e9;
  }
  return mask;
}

// ---- gradient verification ------------------------------------------------------------

namespace {

double rel_err(double analytic, double numeric) {
  const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

std::vector<std::size_t> pick_coords(std::size_t size, std::size_t max_coords, Rng& rng) {
  std::vector<std::size_t> coords;
  if (max_coords == 0 || max_coords >= size) {
    coords.resize(size);
    for (std::size_t i = 0; i < size; ++i) coords[i] = i;
    return coords;
  }
  // sample without replacement
  std::vector<std::size_t> all(size);
  for (std::size_t i = 0; i < size; ++i) all[i] = i;
  rng.shuffle(all);
  coords.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(max_coords));
  std::sort(coords.begin(), coords.end());
  return coords;
}

}  // namespace

GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                  const Tensor& x0, double h, double tol,
                                  std::size_t max_coords, std::uint64_t coord_seed) {
  Tensor x = x0.clone();
  x.set_requires_grad(true);
  {
    Tape tape;
    Tensor loss = f(x);
    if (loss.size() != 1) fail(ErrorKind::Contract, "finite_diff_check: f must be scalar-valued");
    tape.backward(loss);
  }
  std::vector<double> analytic(x.size(), 0.0);
  if (x.has_grad()) analytic = x.grad();

  GradCheckReport report;
  report.h = h;
  report.tol = tol;
  Rng rng(mix_seed(coord_seed, 0x66d1ffull));
  const auto coords = pick_coords(x.size(), max_coords, rng);
  for (const std::size_t i : coords) {
    const double saved = x.data()[i];
    x.data()[i] = saved + h;
    const double fp = f(x).item();
    x.data()[i] = saved - h;
    const double fm = f(x).item();
    x.data()[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    report.max_rel_err = std::max(report.max_rel_err, rel_err(analytic[i], numeric));
    ++report.coords_checked;
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

GradCheckReport finite_diff_check_params(const std::function<Tensor()>& loss_fn,
                                         std::span<Tensor> params, double h, double tol,
                                         std::size_t max_coords_per_tensor,
                                         std::uint64_t coord_seed) {
  for (Tensor& p : params) p.zero_grad();
  {
    Tape tape;
    Tensor loss = loss_fn();
    if (loss.size() != 1) fail(ErrorKind::Contract, "finite_diff_check_params: loss must be scalar");
    tape.backward(loss);
  }
  GradCheckReport report;
  report.h = h;
  report.tol = tol;
  std::uint64_t salt = 0;
  for (Tensor& p : params) {
    std::vector<double> analytic(p.size(), 0.0);
    if (p.has_grad()) analytic = p.grad();
    Rng rng(mix_seed(coord_seed, ++salt));
    const auto coords = pick_coords(p.size(), max_coords_per_tensor, rng);
    for (const std::size_t i : coords) {
      const double saved = p.data()[i];
      p.data()[i] = saved + h;
      const double fp = loss_fn().item();
      p.data()[i] = saved - h;
      const double fm = loss_fn().item();
      p.data()[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      report.max_rel_err = std::max(report.max_rel_err, rel_err(analytic[i], numeric));
      ++report.coords_checked;
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace ima
