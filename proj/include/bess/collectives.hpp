/*
 * Copyright (c) 2026, The BESS-KGE Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// In-process stand-in for the inter-worker fabric. Collectives are called
// by the coordinator with every worker's buffers at once, which makes them
// natural barriers; traffic is accounted per channel and per ordered pair.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bess/common.hpp"

namespace bess {

/// bytes[i][j] = bytes sent from worker i to worker j.
using TrafficMatrix = Matrix<std::uint64_t>;

class CollectiveFabric {
 public:
  explicit CollectiveFabric(std::uint32_t workers) : workers_(workers) {
    require(workers >= 1, "fabric", "fabric needs at least one endpoint");
  }

  std::uint32_t size() const noexcept { return workers_; }

  /// Every worker receives the concatenation of all buffers, ordered by
  /// worker index.
  template <class T>
  std::vector<std::vector<T>> all_gather(const std::string& channel, const std::vector<std::vector<T>>& buffers) {
    require(buffers.size() == workers_, "fabric",
            "all_gather on '" + channel + "' expects " + std::to_string(workers_) + " buffers, got " +
                std::to_string(buffers.size()));
    const auto n = buffers.front().size();
    for (std::uint32_t i = 0; i < workers_; ++i) {
      require(buffers[i].size() == n, "fabric",
              "all_gather on '" + channel + "': worker " + std::to_string(i) + " buffer has " +
                  std::to_string(buffers[i].size()) + " elements, worker 0 has " + std::to_string(n));
    }
    std::vector<T> joined;
    joined.reserve(n * workers_);
    for (const auto& b : buffers) joined.insert(joined.end(), b.begin(), b.end());
    auto& traffic = channel_matrix(channel);
    for (std::uint32_t i = 0; i < workers_; ++i)
      for (std::uint32_t j = 0; j < workers_; ++j)
        if (i != j) traffic(i, j) += n * sizeof(T);
    return std::vector<std::vector<T>>(workers_, joined);
  }

  /// send[i][j] is worker i's chunk for worker j; returns recv with
  /// recv[j][i] = send[i][j]. All chunks must have equal size.
  template <class T>
  std::vector<std::vector<std::vector<T>>> all_to_all(const std::string& channel,
                                                      std::vector<std::vector<std::vector<T>>> send) {
    require(send.size() == workers_, "fabric",
            "all_to_all on '" + channel + "' expects " + std::to_string(workers_) + " senders, got " +
                std::to_string(send.size()));
    const std::size_t n = send.front().empty() ? 0 : send.front().front().size();
    for (std::uint32_t i = 0; i < workers_; ++i) {
      require(send[i].size() == workers_, "fabric",
              "all_to_all on '" + channel + "': worker " + std::to_string(i) + " supplied " +
                  std::to_string(send[i].size()) + " chunks");
      for (std::uint32_t j = 0; j < workers_; ++j) {
        require(send[i][j].size() == n, "fabric",
                "all_to_all on '" + channel + "': chunk " + std::to_string(i) + "->" + std::to_string(j) + " has " +
                    std::to_string(send[i][j].size()) + " elements, expected " + std::to_string(n));
      }
    }
    auto& traffic = channel_matrix(channel);
    std::vector<std::vector<std::vector<T>>> recv(workers_, std::vector<std::vector<T>>(workers_));
    for (std::uint32_t i = 0; i < workers_; ++i) {
      for (std::uint32_t j = 0; j < workers_; ++j) {
        if (i != j) traffic(i, j) += n * sizeof(T);
        recv[j][i] = std::move(send[i][j]);
      }
    }
    return recv;
  }

  /// Clears the per-step counters.
  void begin_step() {
    for (auto& [name, m] : step_) m.fill(0);
  }

  /// Traffic since the last begin_step(), summed over channels or for one.
  TrafficMatrix step_traffic() const {
    TrafficMatrix out(workers_, workers_);
    for (const auto& [name, m] : step_)
      for (std::size_t k = 0; k < m.size(); ++k) out.flat()[k] += m.flat()[k];
    return out;
  }
  TrafficMatrix step_traffic(const std::string& channel) const {
    auto it = step_.find(channel);
    return it == step_.end() ? TrafficMatrix(workers_, workers_) : it->second;
  }
  std::vector<std::string> channels() const {
    std::vector<std::string> out;
    for (const auto& [name, m] : step_) out.push_back(name);
    return out;
  }

  /// Total bytes sent in the current step (off-diagonal sum).
  std::uint64_t step_bytes() const {
    const auto traffic = step_traffic();
    std::uint64_t total = 0;
    for (auto v : traffic.flat()) total += v;
    return total;
  }

 private:
  TrafficMatrix& channel_matrix(const std::string& channel) {
    auto it = step_.find(channel);
    if (it == step_.end()) {
      it = step_.emplace(channel, TrafficMatrix(workers_, workers_)).first;
    }
    return it->second;
  }

  std::uint32_t workers_;
  std::map<std::string, TrafficMatrix> step_;
};

}  // namespace bess
