#pragma once

namespace mcl::prompts {

// Prompt templates, kept byte-stable so cached replies and regression tests
// stay valid. {BOUNDS} is replaced by the rendered parameter-bounds list and
// {TRIALS} by the JSON array of past trials.

inline constexpr const char* kProposalMarker = "NEXT TASK SUGGESTION:";

inline constexpr const char* kInitialSystem =
    "You are a curriculum designer for traffic simulations. Your goal is to generate a "
    "curriculum for training an agent to optimize traffic flow. This curriculum needs to "
    "test the agent's ability to handle various traffic conditions. Generate one plausible "
    "set of car parameters within the given bounds:\n"
    "\n"
    "{BOUNDS}\n"
    "\n"
    "Output a single JSON object of parameter values.";

inline constexpr const char* kInitialUser = "Please generate the parameters.";

inline constexpr const char* kFollowupSystem =
    "You are a curriculum designer for traffic light simulation. Your goal is to generate "
    "a curriculum for training an agent to optimize traffic flow. This curriculum needs to "
    "test the agent's ability to handle various traffic conditions.";

inline constexpr const char* kFollowupUser =
    "Use the past trial data to propose the next car configuration for training.\n"
    "\n"
    "Analyze these past car parameter trials and determine how to generate the next task:\n"
    "\n"
    "{TRIALS}\n"
    "\n"
    "Car Performance Assessment:\n"
    "1. What parameter combinations were successful?\n"
    "2. What weaknesses should be addressed?\n"
    "3. What logical evolutions can we make?\n"
    "4. Suggest specific values or parameter patterns to evolve the curriculum.\n"
    "\n"
    "Format your response as:\n"
    "- 1-2 sentences summarizing key insights\n"
    "- Then \"NEXT TASK SUGGESTION:\" followed by a JSON object of new car parameters "
    "satisfying the bounds:\n"
    "\n"
    "{BOUNDS}\n"
    "\n"
    "Please generate your insights and new parameters.";

}  // namespace mcl::prompts
