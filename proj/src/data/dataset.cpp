#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "kt/data.hpp"
#include "kt/error.hpp"

namespace kt {

Dataset preprocess(std::span<const InteractionRecord> records, const PreprocessOptions& options) {
    std::vector<std::string> order;
    std::unordered_map<std::string, std::vector<const InteractionRecord*>> by_learner;
    for (const auto& r : records) {
        if (r.correct != 0 && r.correct != 1) {
            throw ConfigError("record for learner " + r.learner_id + " has correct=" +
                              std::to_string(r.correct));
        }
        auto [it, inserted] = by_learner.try_emplace(r.learner_id);
        if (inserted) order.push_back(r.learner_id);
        it->second.push_back(&r);
    }

    std::vector<std::pair<std::string, std::vector<const InteractionRecord*>>> kept;
    for (const auto& id : order) {
        auto& rows = by_learner[id];
        if (rows.size() < options.min_len) continue;
        const bool timed = std::all_of(rows.begin(), rows.end(),
                                       [](const auto* r) { return r->timestamp_ms.has_value(); });
        if (timed) {
            std::stable_sort(rows.begin(), rows.end(), [](const auto* a, const auto* b) {
                return *a->timestamp_ms < *b->timestamp_ms;
            });
        }
        kept.emplace_back(id, std::move(rows));
    }
    if (kept.empty()) {
        throw DegenerateError("preprocess: no learner has at least " +
                              std::to_string(options.min_len) + " interactions");
    }

    auto item_of = [&](const InteractionRecord& r) -> const std::string& {
        return options.concept_as_question ? r.concept_id : r.question_id;
    };
    std::set<std::string> items;
    for (const auto& [id, rows] : kept)
        for (const auto* r : rows) items.insert(item_of(*r));

    Dataset out;
    out.vocab.items.assign(items.begin(), items.end());
    std::unordered_map<std::string, int> index;
    for (std::size_t i = 0; i < out.vocab.items.size(); ++i)
        index.emplace(out.vocab.items[i], static_cast<int>(i));

    out.sequences.reserve(kept.size());
    for (const auto& [id, rows] : kept) {
        LearnerSequence seq{id, {}};
        seq.steps.reserve(rows.size());
        for (const auto* r : rows) seq.steps.push_back({index.at(item_of(*r)), r->correct});
        out.sequences.push_back(std::move(seq));
    }
    return out;
}

std::vector<InteractionRecord> to_records(const Dataset& data) {
    std::vector<InteractionRecord> out;
    for (const auto& seq : data.sequences) {
        for (std::size_t t = 0; t < seq.steps.size(); ++t) {
            const auto& item = data.vocab.items.at(static_cast<std::size_t>(seq.steps[t].item));
            out.push_back({seq.learner_id, item, item, seq.steps[t].correct,
                           static_cast<std::int64_t>(t)});
        }
    }
    return out;
}

std::vector<LearnerSequence> window(const LearnerSequence& seq, std::size_t max_len) {
    if (max_len < 2) throw ConfigError("window: max_len must be at least 2");
    std::vector<LearnerSequence> out;
    for (std::size_t start = 0; start < seq.steps.size(); start += max_len) {
        const auto end = std::min(seq.steps.size(), start + max_len);
        out.push_back({seq.learner_id, {seq.steps.begin() + static_cast<std::ptrdiff_t>(start),
                                        seq.steps.begin() + static_cast<std::ptrdiff_t>(end)}});
    }
    return out;
}

std::vector<LearnerSequence> window_all(std::span<const LearnerSequence> seqs, std::size_t max_len) {
    std::vector<LearnerSequence> out;
    for (const auto& s : seqs) {
        auto w = window(s, max_len);
        out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
    }
    return out;
}

std::size_t Batch::valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

Batch make_batch(std::span<const LearnerSequence> segments, std::size_t len) {
    if (segments.empty()) throw DegenerateError("make_batch: no segments");
    std::size_t longest = 0;
    for (const auto& s : segments) {
        if (s.steps.empty()) throw DegenerateError("make_batch: empty segment for " + s.learner_id);
        longest = std::max(longest, s.steps.size());
    }
    if (len == 0) len = longest;
    if (longest > len) {
        throw ConfigError("make_batch: segment of length " + std::to_string(longest) +
                          " exceeds batch length " + std::to_string(len));
    }
    Batch b;
    b.batch = segments.size();
    b.len = len;
    b.items.assign(b.batch * len, 0);
    b.responses.assign(b.batch * len, 0);
    b.valid.assign(b.batch * len, 0);
    for (std::size_t i = 0; i < segments.size(); ++i) {
        const auto& s = segments[i];
        b.lengths.push_back(s.steps.size());
        b.learner_ids.push_back(s.learner_id);
        for (std::size_t t = 0; t < s.steps.size(); ++t) {
            b.items[b.index(i, t)] = s.steps[t].item;
            b.responses[b.index(i, t)] = s.steps[t].correct;
            b.valid[b.index(i, t)] = 1;
        }
    }
    return b;
}

std::vector<LearnerSequence> unpad(const Batch& batch) {
    std::vector<LearnerSequence> out;
    for (std::size_t i = 0; i < batch.batch; ++i) {
        LearnerSequence s{batch.learner_ids.at(i), {}};
        for (std::size_t t = 0; t < batch.len && batch.valid[batch.index(i, t)]; ++t)
            s.steps.push_back({batch.items[batch.index(i, t)], batch.responses[batch.index(i, t)]});
        out.push_back(std::move(s));
    }
    return out;
}

FoldSplit kfold_split(std::span<const LearnerSequence> sequences, std::size_t k, double val_frac,
                      std::uint64_t seed) {
    if (k < 2) throw ConfigError("kfold_split: k must be at least 2");
    if (val_frac < 0.0 || val_frac >= 1.0) throw ConfigError("kfold_split: val_frac must be in [0, 1)");
    if (sequences.size() < k) {
        throw ConfigError("kfold_split: " + std::to_string(sequences.size()) +
                          " learners cannot fill " + std::to_string(k) + " folds");
    }
    const std::size_t n = sequences.size();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);

    std::vector<std::size_t> fold_of(n);
    for (std::size_t i = 0; i < n; ++i) fold_of[perm[i]] = i % k;

    FoldSplit split{k, val_frac, seed, {}};
    for (std::size_t f = 0; f < k; ++f) {
        std::vector<std::size_t> train_idx;
        FoldAssignment fa;
        for (std::size_t i = 0; i < n; ++i) {
            if (fold_of[i] == f) {
                fa.test.push_back(sequences[i].learner_id);
            } else {
                train_idx.push_back(i);
            }
        }
        const auto n_val = static_cast<std::size_t>(
            std::floor(val_frac * static_cast<double>(train_idx.size()) + 1e-9));
        std::vector<std::size_t> shuffled = train_idx;
        std::mt19937_64 fold_rng(seed ^ (0x9E3779B97F4A7C15ULL * (f + 1)));
        std::shuffle(shuffled.begin(), shuffled.end(), fold_rng);
        std::vector<std::uint8_t> is_val(n, 0);
        for (std::size_t i = 0; i < n_val; ++i) is_val[shuffled[i]] = 1;
        for (std::size_t i : train_idx) {
            (is_val[i] ? fa.val : fa.train).push_back(sequences[i].learner_id);
        }
        split.folds.push_back(std::move(fa));
    }
    return split;
}

std::vector<LearnerSequence> select_learners(std::span<const LearnerSequence> sequences,
                                             std::span<const std::string> ids) {
    std::unordered_set<std::string> wanted(ids.begin(), ids.end());
    std::vector<LearnerSequence> out;
    for (const auto& s : sequences)
        if (wanted.count(s.learner_id)) out.push_back(s);
    return out;
}

DatasetStats compute_stats(std::span<const InteractionRecord> records, const Dataset& processed) {
    DatasetStats st;
    std::unordered_set<std::string> kept;
    for (const auto& s : processed.sequences) {
        kept.insert(s.learner_id);
        st.interactions += s.steps.size();
        for (const auto& step : s.steps) st.percent_correct += step.correct;
    }
    st.learners = processed.sequences.size();
    if (st.interactions > 0) st.percent_correct = 100.0 * st.percent_correct / static_cast<double>(st.interactions);
    std::unordered_set<std::string> concepts, questions;
    for (const auto& r : records) {
        if (!kept.count(r.learner_id)) continue;
        concepts.insert(r.concept_id);
        questions.insert(r.question_id);
    }
    st.concepts = concepts.size();
    st.questions = questions.size();
    return st;
}

}  // namespace kt
