#include "dmac/retrain.hpp"

#include <iomanip>
#include <memory>
#include <ostream>
#include <stdexcept>

#include "dmac/errors.hpp"
#include "dmac/eval.hpp"

namespace dmac::retrain {

void validate(const RetrainSchedule& s) {
  auto fail = [](const std::string& what) { throw ConfigError("retrain: " + what); };
  if (s.rounds < 0) fail("rounds must be non-negative");
  if (s.adversary_episodes < 0 || s.cp_episodes < 0) fail("episode counts must be non-negative");
  if (!(s.p_mask >= 0.0 && s.p_mask <= 1.0)) fail("p_mask must be in [0, 1]");
  if (s.metric_episodes < 0) fail("metric episodes must be non-negative");
}

std::uint64_t cp_round_seed(std::uint64_t seed, int round) { return derive_seed(seed, 81, round); }

RetrainResult retrain_cp(const env::Environment& environment, team::TeamPolicy policy,
                         const team::TeamConfig& team_config, adversary::Adversary adversary,
                         const adversary::AdversaryConfig& adversary_config, const RetrainSchedule& schedule,
                         std::uint64_t seed) {
  validate(schedule);
  RetrainResult r;
  r.policy_digest_before = team::policy_digest(policy);
  for (int round = 0; round < schedule.rounds; ++round) {
    RoundMetrics m;
    m.round = round;
    if (schedule.refresh_adversary && schedule.adversary_episodes > 0) {
      adversary::train_adversary(environment, policy, adversary_config, schedule.adversary_episodes,
                                 derive_seed(seed, 80, round), adversary);
      m.episodes += schedule.adversary_episodes;
    }
    auto frozen = std::make_shared<const adversary::Adversary>(adversary);
    adversary::AdversaryMasker masker(frozen, schedule.p_mask);
    team::CpTrainOptions options;
    options.episodes = schedule.cp_episodes;
    options.train_policy = schedule.joint;
    options.interferer = &masker;
    team::train_cp(environment, policy, team_config, options, cp_round_seed(seed, round));
    m.episodes += schedule.cp_episodes;

    if (schedule.metric_episodes > 0) {
      eval::EvalOptions eo;
      eo.episodes = schedule.metric_episodes;
      eo.seed = derive_seed(seed, 82, round);
      const auto clean = eval::evaluate(environment, policy, nullptr, "clean", eo);
      adversary::AdversaryMasker full(frozen, 1.0);
      const auto masked = eval::evaluate(environment, policy, &full, "adversary", eo);
      m.clean_win = clean.win_rate;
      m.masked_win = masked.win_rate;
      m.frequency_sd = clean.summary.sd;
      m.frequency_average = clean.summary.average;
    }
    r.training_episodes += m.episodes;
    r.rounds.push_back(m);
  }
  r.policy_digest_after = team::policy_digest(policy);
  if (!schedule.joint && r.policy_digest_after != r.policy_digest_before)
    throw std::logic_error("policy network changed during gate retraining");
  r.policy = std::move(policy);
  r.adversary = std::move(adversary);
  return r;
}

void write_rounds(std::span<const RoundMetrics> rounds, std::ostream& out) {
  out << "round,clean_win,masked_win,frequency_sd,frequency_average,episodes\n";
  const auto precision = out.precision();
  out << std::setprecision(17);
  for (const auto& m : rounds)
    out << m.round << ',' << m.clean_win << ',' << m.masked_win << ',' << m.frequency_sd << ','
        << m.frequency_average << ',' << m.episodes << '\n';
  out.precision(precision);
}

}  // namespace dmac::retrain
