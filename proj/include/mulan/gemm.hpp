// Copyright 2026 The Mulan Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

// Single-threaded row-major GEMM kernels. Loop orders keep the innermost loop
// contiguous; reduction order is fixed, so results are bitwise reproducible.
namespace mulan::detail {

inline constexpr std::size_t kColumnBlock = 512;

/// C[M x N] += A[M x K] * B[K x N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t j0 = 0; j0 < N; j0 += kColumnBlock) {
    const std::size_t j1 = std::min(N, j0 + kColumnBlock);
    for (std::size_t i = 0; i < M; ++i) {
      T* c = C + i * N;
      const T* a = A + i * K;
      for (std::size_t k = 0; k < K; ++k) {
        const T av = a[k];
        if (av == T(0)) continue;
        const T* b = B + k * N;
        for (std::size_t j = j0; j < j1; ++j) c[j] += av * b[j];
      }
    }
  }
}

/// C[M x N] += A^T * B, with A stored K x M and B stored K x N.
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t j0 = 0; j0 < N; j0 += kColumnBlock) {
    const std::size_t j1 = std::min(N, j0 + kColumnBlock);
    for (std::size_t k = 0; k < K; ++k) {
      const T* a = A + k * M;
      const T* b = B + k * N;
      for (std::size_t i = 0; i < M; ++i) {
        const T av = a[i];
        if (av == T(0)) continue;
        T* c = C + i * N;
        for (std::size_t j = j0; j < j1; ++j) c[j] += av * b[j];
      }
    }
  }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

/// C[M x N] += A * B^T, with A stored M x K and B stored N x K.
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  std::vector<T> bt(K * N);
  transpose(N, K, B, bt.data());
  gemm_nn(M, N, K, A, bt.data(), C);
}

}  // namespace mulan::detail
