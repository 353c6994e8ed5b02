#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "opdlab/autodiff.hpp"
#include "opdlab/model.hpp"

namespace opdlab {

// Worker count: OPDLAB_THREADS when set (>= 1), else hardware concurrency.
inline std::size_t worker_count() {
  if (const char* env = std::getenv("OPDLAB_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n). The first exception thrown by any task is rethrown.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto body = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        next.store(n);
        return;
      }
    }
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(body);
  body();
  pool.clear();
  if (error) std::rethrow_exception(error);
}

// Computes a scalar loss per shard on a private replica of the model
// parameters, backpropagates it, and adds every shard's gradient into the
// model's gradient buffers in shard order. The result does not depend on the
// worker count. Returns the per-shard loss values.
using ShardLoss = std::function<ad::Tensor(std::size_t shard, ad::Tape& tape, const Weights& weights)>;

inline std::vector<double> sharded_backward(PolicyModel& model, std::size_t shards, const ShardLoss& loss_fn) {
  std::vector<ParamList> grads(shards);
  std::vector<double> losses(shards, 0.0);
  parallel_for(shards, [&](std::size_t s) {
    auto replica = model.replicate(true);
    auto w = PolicyModel::weights_of(replica, model.config());
    ad::Tape tape;
    auto loss = loss_fn(s, tape, w);
    tape.backward(loss);
    losses[s] = loss.item();
    for (auto& p : replica)
      if (!p.tensor.has_grad()) p.tensor.zero_grad();
    grads[s] = std::move(replica);
  });
  auto& params = model.params();
  for (auto& p : params)
    if (!p.tensor.has_grad()) p.tensor.zero_grad();
  for (std::size_t s = 0; s < shards; ++s) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& dst = params[k].tensor.grad();
      const auto& src = grads[s][k].tensor.grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
  return losses;
}

}  // namespace opdlab
