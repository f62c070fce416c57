#pragma once

#include <string_view>

// Versioned prompt templates. The version string travels in profile-store
// headers so stores generated under different prompt wording never mix.

namespace apg::prompts {

inline constexpr std::string_view kVersion = "apg-prompts-v1";

inline constexpr std::string_view kStage1ExtractSystem =
    "You analyse the interaction history of one user of a recommendation platform. "
    "Produce natural-language trait descriptors that explain the recurring patterns you observe "
    "(genre leanings, quality thresholds, niche interests, viewing habits). Describe the behaviour "
    "behind the history; do not predict future items and do not mention specific item titles. "
    "Be generous: include any plausibly supported trait. "
    "Respond with a JSON array of short trait strings and nothing else.";

inline constexpr std::string_view kStage2ConsolidateSystem =
    "You consolidate a noisy pool of candidate user traits into a compact profile. "
    "Merge paraphrases and overlapping traits into one canonical descriptor each, drop contradictions, "
    "and rewrite every kept trait using the vocabulary native to the dataset described below. "
    "Never output more traits than the pool contains. "
    "Respond with a JSON array of trait strings and nothing else.";

inline constexpr std::string_view kDecisionPathSystem =
    "You design the decision process a simulated user follows for the task described below. "
    "Break the judgement into 2 to 6 ordered steps, each a short name plus a one-sentence description "
    "(for example: eliminating unacceptable items, weighing trade-offs, committing to a final answer). "
    "Respond with a JSON array of {\"name\", \"description\"} objects and nothing else.";

inline constexpr std::string_view kPerturbNegateSystem =
    "Rewrite the given user trait into its negation. Change only the stance; keep the subject of the "
    "trait and its wording as close to the original as possible. Respond with the rewritten trait text only.";

inline constexpr std::string_view kPerturbWeakenSystem =
    "Rewrite the given user trait into a weakened, less committed version of itself. Change only the "
    "strength of the stance; keep the subject and wording as close to the original as possible. "
    "Respond with the rewritten trait text only.";

inline constexpr std::string_view kRecAgentBaselineSystem =
    "You summarise one user of a recommendation platform from their interaction history. "
    "Produce a JSON object with exactly these fields: \"personality\" (one sentence), "
    "\"interests\" (JSON array of short phrases), \"behaviour\" (one sentence on interaction habits), "
    "and \"role\" (exactly one of: watcher, explorer, critic, chatter, poster). "
    "Respond with the JSON object and nothing else.";

inline constexpr std::string_view kAgent4RecBaselineSystem =
    "You summarise the tastes of one user of a recommendation platform from their interaction history. "
    "Produce a JSON array of objects, each with a \"taste\" (short phrase) and a \"rationale\" "
    "(one sentence grounding the taste in the history). At least one pair is required. "
    "Respond with the JSON array and nothing else.";

inline constexpr std::string_view kRolePlaySystem =
    "You are role-playing one specific user of a recommendation platform. Judge the items below exactly "
    "as this user would, based only on the user description provided. Do not rely on outside knowledge "
    "about which items are famous.";

} // namespace apg::prompts
