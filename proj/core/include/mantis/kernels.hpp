#pragma once

#include <cstddef>

// Serial dense kernels with fixed accumulation order. All accumulate into C.
namespace mantis::kernels {

/// C[r x n] += A[r x k] * B[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n);

/// C[r x n] += A[r x k] * B[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n);

/// C[k x n] += A[r x k]^T * B[r x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n);

/// out[c x r] = in[r x c]^T
template <typename T>
void transpose(const T* in, T* out, std::size_t r, std::size_t c);

}  // namespace mantis::kernels
