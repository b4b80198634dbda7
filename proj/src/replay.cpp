#include "arpo/replay.hpp"

namespace arpo {

namespace {
constexpr std::uint64_t kReplayMagic = 0x594c50524f505241ULL;  // "ARPORPLY"
constexpr std::uint32_t kReplayFormat = 1;
}  // namespace

ReplayBuffer::ReplayBuffer(int capacity_per_task) : capacity_(capacity_per_task) {
  if (capacity_per_task < 0) throw ConfigError("replay capacity_per_task must be >= 0");
}

bool ReplayBuffer::insert(const Trajectory& trajectory) {
  if (trajectory.outcome.end == EndReason::kNone) throw UsageError("replay insert: trajectory not terminal");
  if (!trajectory.success() || trajectory.origin != Origin::kFresh || capacity_ == 0) return false;
  auto& q = queues_[trajectory.task_id()];
  if (static_cast<int>(q.size()) >= capacity_) {
    q.pop_front();
    ++evictions_;
  }
  q.push_back({next_sequence_++, trajectory});
  ++insertions_;
  return true;
}

bool ReplayBuffer::maybe_inject(RolloutGroup& group, Rng& rng) {
  if (group.phase != GroupPhase::kCollected) throw UsageError("maybe_inject: group already replay-checked");
  if (group.trajectories.empty()) throw UsageError("maybe_inject: empty group");
  for (const auto& t : group.trajectories)
    if (t.task_id() != group.task_id) throw UsageError("maybe_inject: group mixes tasks");
  group.phase = GroupPhase::kReplayChecked;

  if (!group.all_failed()) return false;
  const auto it = queues_.find(group.task_id);
  if (it == queues_.end() || it->second.empty()) return false;

  const std::size_t slot = uniform_index(rng, group.trajectories.size());
  const std::size_t pick = uniform_index(rng, it->second.size());
  Trajectory copy = it->second[pick].trajectory;
  copy.origin = Origin::kReplayed;
  group.trajectories[slot] = std::move(copy);
  group.refresh_rewards();
  ++injections_;
  return true;
}

std::size_t ReplayBuffer::size(int task_id) const {
  const auto it = queues_.find(task_id);
  return it == queues_.end() ? 0 : it->second.size();
}

std::size_t ReplayBuffer::total_size() const {
  std::size_t n = 0;
  for (const auto& [id, q] : queues_) n += q.size();
  return n;
}

const std::deque<ReplayBuffer::Entry>* ReplayBuffer::entries(int task_id) const {
  const auto it = queues_.find(task_id);
  return it == queues_.end() ? nullptr : &it->second;
}

void ReplayBuffer::write(ByteWriter& w) const {
  w.u64(kReplayMagic);
  w.u32(kReplayFormat);
  w.i32(capacity_);
  w.u64(next_sequence_);
  w.u64(insertions_);
  w.u64(evictions_);
  w.u64(injections_);
  w.u64(queues_.size());
  for (const auto& [task_id, q] : queues_) {
    w.i32(task_id);
    w.u64(q.size());
    for (const auto& e : q) {
      w.u64(e.sequence);
      write_trajectory(w, e.trajectory);
    }
  }
}

ReplayBuffer ReplayBuffer::read(ByteReader& r) {
  const std::size_t start = r.position();
  if (r.u64() != kReplayMagic) r.fail(start, "not a replay buffer (bad magic)");
  const std::size_t at_version = r.position();
  if (r.u32() != kReplayFormat) r.fail(at_version, "unsupported replay format version");
  const std::size_t at_cap = r.position();
  const int capacity = r.i32();
  if (capacity < 0) r.fail(at_cap, "negative capacity");
  ReplayBuffer b(capacity);
  b.next_sequence_ = r.u64();
  b.insertions_ = r.u64();
  b.evictions_ = r.u64();
  b.injections_ = r.u64();
  const std::size_t n_tasks = r.count(12);
  for (std::size_t i = 0; i < n_tasks; ++i) {
    const std::size_t at_task = r.position();
    const int task_id = r.i32();
    if (b.queues_.contains(task_id)) r.fail(at_task, "duplicate task queue");
    const std::size_t n = r.count(8);
    if (static_cast<int>(n) > capacity) r.fail(at_task, "queue exceeds capacity");
    auto& q = b.queues_[task_id];
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t at_entry = r.position();
      Entry e;
      e.sequence = r.u64();
      e.trajectory = read_trajectory(r);
      if (e.trajectory.task_id() != task_id) r.fail(at_entry, "entry filed under the wrong task");
      if (!e.trajectory.success()) r.fail(at_entry, "stored trajectory is not a success");
      if (e.sequence >= b.next_sequence_ || (!q.empty() && e.sequence <= q.back().sequence))
        r.fail(at_entry, "entry sequence numbers out of order");
      q.push_back(std::move(e));
    }
  }
  return b;
}

std::vector<std::uint8_t> ReplayBuffer::serialize() const {
  ByteWriter w;
  write(w);
  return w.take();
}

ReplayBuffer ReplayBuffer::restore(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  ReplayBuffer b = read(r);
  if (!r.done()) r.fail("trailing bytes after replay buffer");
  return b;
}

}  // namespace arpo
