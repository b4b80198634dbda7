#include "arpo/policy_net.hpp"

#include <cstdlib>

namespace arpo {

std::vector<int> history_features(const PolicyShape& shape, const HistoryView& history) {
  const int t = static_cast<int>(history.past.size());
  if (t >= kMaxHorizon) throw UsageError("history longer than the policy horizon");

  std::vector<int> f;
  f.reserve(static_cast<std::size_t>(8 + (t + 1) * (kNumWidgets + 2) + 2 * history.task.goal.size()));
  f.push_back(shape.bos_feature());

  auto add_instruction_item = [&](int pos, int item) {
    f.push_back(shape.instr_abs_feature(pos, item));
    const int offset = pos - t;
    if (std::abs(offset) <= shape.relative_window) f.push_back(shape.instr_rel_feature(offset, item));
  };
  if (history.task.feasible) {
    for (std::size_t j = 0; j < history.task.goal.size(); ++j)
      add_instruction_item(static_cast<int>(j), history.task.goal[j].item());
  } else {
    add_instruction_item(0, kNumGoalItems);
  }

  for (int s = 0; s <= t; ++s) {
    const Observation& obs = s < t ? history.past[static_cast<std::size_t>(s)].observation : history.current;
    for (int w = 0; w < kNumWidgets; ++w) f.push_back(shape.obs_feature(s, w, obs.widget_states[static_cast<std::size_t>(w)]));
  }
  for (int s = 0; s < t; ++s) {
    const auto& tok = history.past[static_cast<std::size_t>(s)].tokens;
    f.push_back(shape.verb_feature(s, tok.verb_token));
    f.push_back(shape.arg_feature(s, tok.arg_token));
  }
  f.push_back(shape.step_feature(t));
  return f;
}

}  // namespace arpo
