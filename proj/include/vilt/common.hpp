// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace vilt {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IntMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// All randomness flows through explicitly passed generators of this type.
using Rng = std::mt19937_64;

/// Sentinel label for positions that carry no prediction target.
inline constexpr int kIgnoreLabel = -100;

/// Base error for failures inside the library (internal faults, I/O).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Error caused by invalid user input: bad config, missing files, violated
/// preconditions. The CLI maps it to exit code 1.
class UserError : public Error {
 public:
  using Error::Error;
};

/// Builds an independent generator for `(seed, stream...)`. Two different
/// stream tuples give statistically unrelated sequences.
Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream = {});

/// Uniform integer in [0, n).
std::size_t uniform_index(Rng& rng, std::size_t n);

/// Uniform real in [0, 1).
double uniform01(Rng& rng);

/// 64-bit FNV-1a. Used for config and file content fingerprints.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string hex64(std::uint64_t value);

/// Workers actually used for `n` items with a `threads` budget (≥ 1).
std::size_t worker_count(std::size_t n, int threads);

/// Splits [0, n) into contiguous chunks, runs fn(worker, begin, end) on
/// each in its own thread (inline when one worker) and rethrows the first
/// worker exception. Chunking depends only on n and the worker count.
void parallel_chunks(std::size_t n, int threads,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn);

/// Version string embedded into every artifact.
inline constexpr std::string_view kCodeVersion = "0.3.1";

}  // namespace vilt
