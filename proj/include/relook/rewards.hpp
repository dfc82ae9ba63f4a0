#pragma once

#include <cmath>
#include <string>

#include "relook/error.hpp"
#include "relook/trace_grammar.hpp"

namespace relook {

struct RewardConfig {
  double lambda = 100.0;  // ideal mean reflection length in tokens
  double w_format = 1.0;
  double w_accuracy = 1.0;
  double w_balance = 1.0;
  // When false, a response without reflections earns neither format nor
  // balance reward.
  bool allow_zero_reflections = false;

  void validate() const {
    if (!(lambda > 0)) throw ConfigError("reward lambda must be positive");
    if (w_format < 0 || w_accuracy < 0 || w_balance < 0) throw ConfigError("reward weights must be nonnegative");
  }
  friend bool operator==(const RewardConfig&, const RewardConfig&) = default;
};

struct RewardBreakdown {
  double format = 0;
  double accuracy = 0;
  double balance = 0;
  double composite = 0;
  double w_format = 1, w_accuracy = 1, w_balance = 1;
};

inline double format_reward(const StructuredResponse& r, const RewardConfig& cfg = {}) {
  if (!r.valid()) return 0.0;
  if (!cfg.allow_zero_reflections && reflection_stats(r).count == 0) return 0.0;
  return 1.0;
}

inline double accuracy_reward(const StructuredResponse& r, const std::string& gold_answer) {
  const auto answer = extract_conclusion(r);
  return answer && *answer == gold_answer ? 1.0 : 0.0;
}

/// 1 - |L_r_total / N_r - lambda| / lambda; zero when there are no reflections.
inline double reflection_balance_reward(const ReflectionStats& s, double lambda) {
  if (!(lambda > 0)) throw ConfigError("reward lambda must be positive");
  if (s.count == 0) return 0.0;
  const double mean = static_cast<double>(s.total_length) / static_cast<double>(s.count);
  return 1.0 - std::abs(mean - lambda) / lambda;
}

/// Weighted sum of the three rewards; balance only counts for well-formed
/// responses.
inline RewardBreakdown composite_reward(const StructuredResponse& r, const std::string& gold_answer,
                                        const RewardConfig& cfg) {
  cfg.validate();
  RewardBreakdown b;
  b.w_format = cfg.w_format;
  b.w_accuracy = cfg.w_accuracy;
  b.w_balance = cfg.w_balance;
  b.format = format_reward(r, cfg);
  b.accuracy = accuracy_reward(r, gold_answer);
  b.balance = b.format == 1.0 ? reflection_balance_reward(reflection_stats(r), cfg.lambda) : 0.0;
  b.composite = cfg.w_format * b.format + cfg.w_accuracy * b.accuracy + cfg.w_balance * b.balance;
  return b;
}

}  // namespace relook
