#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <span>
#include <vector>

#include "arpo/common.hpp"
#include "arpo/grpo.hpp"
#include "arpo/serialize.hpp"
#include "arpo/trajectory.hpp"

namespace arpo {

/// Per-task FIFO of successful trajectories. Only fresh successes are stored;
/// when a task's queue is full the oldest entry is evicted first.
class ReplayBuffer {
 public:
  struct Entry {
    std::uint64_t sequence = 0;  // global insertion counter at insert time
    Trajectory trajectory;

    friend bool operator==(const Entry&, const Entry&) = default;
  };

  explicit ReplayBuffer(int capacity_per_task = 4);

  /// Stores the trajectory iff it succeeded and was freshly generated.
  /// Returns true when it was stored.
  bool insert(const Trajectory& trajectory);

  /// If every member of the group failed the task and the buffer holds an entry
  /// for the group's task, one uniformly chosen slot is overwritten with a copy of
  /// a uniformly chosen buffered trajectory (origin = replayed). The group moves
  /// to phase kReplayChecked either way. Returns true on injection.
  bool maybe_inject(RolloutGroup& group, Rng& rng);

  int capacity_per_task() const { return capacity_; }
  std::size_t size(int task_id) const;
  std::size_t total_size() const;
  const std::deque<Entry>* entries(int task_id) const;
  const std::map<int, std::deque<Entry>>& queues() const { return queues_; }

  std::uint64_t insertion_count() const { return insertions_; }
  std::uint64_t eviction_count() const { return evictions_; }
  std::uint64_t injection_count() const { return injections_; }

  void write(ByteWriter& w) const;
  static ReplayBuffer read(ByteReader& r);
  std::vector<std::uint8_t> serialize() const;
  /// Throws IoError with the byte offset on corrupt or truncated input.
  static ReplayBuffer restore(std::span<const std::uint8_t> bytes);

  friend bool operator==(const ReplayBuffer&, const ReplayBuffer&) = default;

 private:
  int capacity_;
  std::map<int, std::deque<Entry>> queues_;
  std::uint64_t next_sequence_ = 0;
  std::uint64_t insertions_ = 0;
  std::uint64_t evictions_ = 0;
  std::uint64_t injections_ = 0;
};

}  // namespace arpo
