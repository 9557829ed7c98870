#include <algorithm>
#include <cmath>
#include <cstddef>

#include "ima/kernels.hpp"

// Reference kernels: straight loops, no threading. These define the exact
// floating-point result the OpenMP versions must reproduce.

namespace ima::kernels::serial {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double sum = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * m + i] : a[i * k + p];
        const double bv = trans_b ? b[j * k + p] : b[p * n + j];
        sum += av * bv;
      }
      if (accumulate) {
        c[i * n + j] += sum;
      } else {
        c[i * n + j] = sum;
      }
    }
  }
}

void conv2d_forward(const double* x, const double* w, double* y,
                    std::size_t c_in, std::size_t h, std::size_t w_in,
                    std::size_t c_out, std::size_t stride_h, std::size_t stride_w) {
  const std::size_t oh = conv2d_out_extent(h, stride_h);
  const std::size_t ow = conv2d_out_extent(w_in, stride_w);
  for (std::size_t co = 0; co < c_out; ++co) {
    for (std::size_t r = 0; r < oh; ++r) {
      for (std::size_t col = 0; col < ow; ++col) {
        double sum = 0.0;
        for (std::size_t ci = 0; ci < c_in; ++ci) {
          for (std::size_t kh = 0; kh < 3; ++kh) {
            const std::ptrdiff_t ih =
                static_cast<std::ptrdiff_t>(r * stride_h + kh) - 1;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kw = 0; kw < 3; ++kw) {
              const std::ptrdiff_t iw =
                  static_cast<std::ptrdiff_t>(col * stride_w + kw) - 1;
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w_in)) continue;
              sum += x[(ci * h + ih) * w_in + iw] *
                     w[((co * c_in + ci) * 3 + kh) * 3 + kw];
            }
          }
        }
        y[(co * oh + r) * ow + col] = sum;
      }
    }
  }
}

void conv2d_backward_input(const double* dy, const double* w, double* dx,
                           std::size_t c_in, std::size_t h, std::size_t w_in,
                           std::size_t c_out, std::size_t stride_h, std::size_t stride_w) {
  const std::size_t oh = conv2d_out_extent(h, stride_h);
  const std::size_t ow = conv2d_out_extent(w_in, stride_w);
  for (std::size_t ci = 0; ci < c_in; ++ci) {
    for (std::size_t ih = 0; ih < h; ++ih) {
      for (std::size_t iw = 0; iw < w_in; ++iw) {
        double sum = 0.0;
        for (std::size_t co = 0; co < c_out; ++co) {
          for (std::size_t kh = 0; kh < 3; ++kh) {
            // ih = r*stride_h + kh - 1 for some output row r.
            const std::ptrdiff_t num_h =
                static_cast<std::ptrdiff_t>(ih) + 1 - static_cast<std::ptrdiff_t>(kh);
            if (num_h < 0 || num_h % static_cast<std::ptrdiff_t>(stride_h) != 0) continue;
            const std::size_t r = static_cast<std::size_t>(num_h) / stride_h;
            if (r >= oh) continue;
            for (std::size_t kw = 0; kw < 3; ++kw) {
              const std::ptrdiff_t num_w =
                  static_cast<std::ptrdiff_t>(iw) + 1 - static_cast<std::ptrdiff_t>(kw);
              if (num_w < 0 || num_w % static_cast<std::ptrdiff_t>(stride_w) != 0) continue;
              const std::size_t col = static_cast<std::size_t>(num_w) / stride_w;
              if (col >= ow) continue;
              sum += dy[(co * oh + r) * ow + col] *
                     w[((co * c_in + ci) * 3 + kh) * 3 + kw];
            }
          }
        }
        dx[(ci * h + ih) * w_in + iw] += sum;
      }
    }
  }
}

void conv2d_backward_weight(const double* dy, const double* x, double* dw,
                            std::size_t c_in, std::size_t h, std::size_t w_in,
                            std::size_t c_out, std::size_t stride_h, std::size_t stride_w) {
  const std::size_t oh = conv2d_out_extent(h, stride_h);
  const std::size_t ow = conv2d_out_extent(w_in, stride_w);
  for (std::size_t co = 0; co < c_out; ++co) {
    for (std::size_t ci = 0; ci < c_in; ++ci) {
      for (std::size_t kh = 0; kh < 3; ++kh) {
        for (std::size_t kw = 0; kw < 3; ++kw) {
          double sum = 0.0;
          for (std::size_t r = 0; r < oh; ++r) {
            const std::ptrdiff_t ih =
                static_cast<std::ptrdiff_t>(r * stride_h + kh) - 1;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t col = 0; col < ow; ++col) {
              const std::ptrdiff_t iw =
                  static_cast<std::ptrdiff_t>(col * stride_w + kw) - 1;
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w_in)) continue;
              sum += dy[(co * oh + r) * ow + col] * x[(ci * h + ih) * w_in + iw];
            }
          }
          dw[((co * c_in + ci) * 3 + kh) * 3 + kw] += sum;
        }
      }
    }
  }
}

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = x + r * cols;
    double* yi = y + r * cols;
    double mx = xi[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < cols; ++j) yi[j] *= inv;
  }
}

}  // namespace ima::kernels::serial
