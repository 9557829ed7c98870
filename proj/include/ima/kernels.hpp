#pragma once

#include <cstddef>

// Dense numeric kernels behind the tensor ops. Each kernel exists twice:
// ima::kernels::serial holds the plain reference loops, and ima::kernels
// holds the OpenMP versions used by the library. The parallel versions
// assign every output element to exactly one thread and keep the inner
// accumulation order of the reference, so the two produce bit-identical
// results for all inputs and thread counts.

namespace ima::kernels {

namespace serial {

// C[m x n] (+)= op(A) * op(B), row-major.
// op(A) = A [m x k] when !trans_a, else the transpose of A stored [k x m].
// op(B) = B [k x n] when !trans_b, else the transpose of B stored [n x k].
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);

// 3x3 kernel, padding 1. y[c_out x oh x ow] with oh = (h - 1) / stride_h + 1.
void conv2d_forward(const double* x, const double* w, double* y,
                    std::size_t c_in, std::size_t h, std::size_t w_in,
                    std::size_t c_out, std::size_t stride_h, std::size_t stride_w);

// dx (+)= conv2d backward w.r.t. the input (gather form).
void conv2d_backward_input(const double* dy, const double* w, double* dx,
                           std::size_t c_in, std::size_t h, std::size_t w_in,
                           std::size_t c_out, std::size_t stride_h, std::size_t stride_w);

// dw (+)= conv2d backward w.r.t. the kernel (gather form).
void conv2d_backward_weight(const double* dy, const double* x, double* dw,
                            std::size_t c_in, std::size_t h, std::size_t w_in,
                            std::size_t c_out, std::size_t stride_h, std::size_t stride_w);

// Row-wise softmax with max-shift; y may alias x.
void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols);

}  // namespace serial

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);

void conv2d_forward(const double* x, const double* w, double* y,
                    std::size_t c_in, std::size_t h, std::size_t w_in,
                    std::size_t c_out, std::size_t stride_h, std::size_t stride_w);

void conv2d_backward_input(const double* dy, const double* w, double* dx,
                           std::size_t c_in, std::size_t h, std::size_t w_in,
                           std::size_t c_out, std::size_t stride_h, std::size_t stride_w);

void conv2d_backward_weight(const double* dy, const double* x, double* dw,
                            std::size_t c_in, std::size_t h, std::size_t w_in,
                            std::size_t c_out, std::size_t stride_h, std::size_t stride_w);

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols);

// Output extent of the fixed 3x3/pad-1 convolution along one axis.
inline std::size_t conv2d_out_extent(std::size_t in, std::size_t stride) {
  return (in - 1) / stride + 1;
}

}  // namespace ima::kernels
