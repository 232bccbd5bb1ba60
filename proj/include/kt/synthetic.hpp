#pragma once

#include <cstdint>
#include <vector>

#include "kt/data.hpp"

namespace kt {

/// Parameters of the synthetic forgetting generator.
///
/// Each learner has ability a ~ Normal(0, ability_spread) and each concept a
/// difficulty b_c ~ Normal(0, difficulty_spread). At every step the learner
/// draws a concept uniformly and answers correctly with probability
///
///   sigmoid(a - b_c + mastery_bonus * exp(-gap / memory_decay) * practiced)
///
/// where gap counts steps since the learner last saw the concept and
/// practiced is 1 once the concept has been seen.
struct SyntheticSpec {
    std::size_t learners = 500;
    std::size_t concepts = 50;
    std::size_t length = 200;
    double memory_decay = 20.0;
    double ability_spread = 1.0;
    double difficulty_spread = 1.0;
    double mastery_bonus = 2.0;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SyntheticData {
    std::vector<InteractionRecord> records;
    // Latent truth, aligned with records / learners / concepts.
    std::vector<double> probabilities;
    std::vector<double> abilities;
    std::vector<double> difficulties;
};

// Closed-form P(correct). `gap` is ignored when practiced is false.
double synthetic_correct_probability(double ability, double difficulty, double mastery_bonus,
                                     double gap, double memory_decay, bool practiced);

SyntheticData gen_synthetic(const SyntheticSpec& spec);

}  // namespace kt
