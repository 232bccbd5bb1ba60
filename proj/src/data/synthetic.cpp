#include "kt/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <random>

#include "kt/error.hpp"

namespace kt {
namespace {

double logistic(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

std::string padded_id(char prefix, std::size_t i, std::size_t count) {
    int width = 1;
    for (std::size_t c = count > 0 ? count - 1 : 0; c >= 10; c /= 10) ++width;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%c%0*zu", prefix, width, i);
    return buf;
}

}  // namespace

void SyntheticSpec::validate() const {
    if (learners == 0 || concepts == 0 || length == 0) {
        throw ConfigError("synthetic spec: learners, concepts and length must be positive");
    }
    if (!(memory_decay > 0.0)) throw ConfigError("synthetic spec: memory decay must be positive");
    if (ability_spread < 0.0 || difficulty_spread < 0.0) {
        throw ConfigError("synthetic spec: spreads must be non-negative");
    }
}

double synthetic_correct_probability(double ability, double difficulty, double mastery_bonus,
                                     double gap, double memory_decay, bool practiced) {
    const double recall = practiced ? mastery_bonus * std::exp(-gap / memory_decay) : 0.0;
    return logistic(ability - difficulty + recall);
}

SyntheticData gen_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick(0, spec.concepts - 1);
    std::uniform_real_distribution<double> coin(0.0, 1.0);

    SyntheticData out;
    out.difficulties.resize(spec.concepts);
    for (auto& b : out.difficulties) b = spec.difficulty_spread * unit(rng);
    out.abilities.resize(spec.learners);
    out.records.reserve(spec.learners * spec.length);
    out.probabilities.reserve(spec.learners * spec.length);

    std::vector<long long> last_seen(spec.concepts);
    for (std::size_t l = 0; l < spec.learners; ++l) {
        const double a = spec.ability_spread * unit(rng);
        out.abilities[l] = a;
        std::fill(last_seen.begin(), last_seen.end(), -1);
        const auto learner = padded_id('L', l, spec.learners);
        for (std::size_t t = 0; t < spec.length; ++t) {
            const std::size_t c = pick(rng);
            const bool practiced = last_seen[c] >= 0;
            const double gap = practiced ? static_cast<double>(static_cast<long long>(t) - last_seen[c]) : 0.0;
            const double p = synthetic_correct_probability(a, out.difficulties[c], spec.mastery_bonus,
                                                           gap, spec.memory_decay, practiced);
            const int correct = coin(rng) < p ? 1 : 0;
            last_seen[c] = static_cast<long long>(t);
            const auto concept_id = padded_id('C', c, spec.concepts);
            out.records.push_back({learner, "Q" + concept_id.substr(1), concept_id, correct,
                                   static_cast<std::int64_t>(t) * 60000});
            out.probabilities.push_back(p);
        }
    }
    return out;
}

}  // namespace kt
