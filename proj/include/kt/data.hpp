#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kt {

// Column order of every interaction-log CSV read or written by this library.
inline constexpr const char* kInteractionHeader =
    "learner_id,question_id,concept_id,correct,timestamp_ms";

struct InteractionRecord {
    std::string learner_id;
    std::string question_id;
    std::string concept_id;
    int correct = 0;  // 0 or 1
    std::optional<std::int64_t> timestamp_ms;

    bool operator==(const InteractionRecord&) const = default;
};

struct Step {
    int item = 0;
    int correct = 0;

    bool operator==(const Step&) const = default;
};

struct LearnerSequence {
    std::string learner_id;
    std::vector<Step> steps;

    std::size_t size() const { return steps.size(); }
    bool operator==(const LearnerSequence&) const = default;
};

// Dense item index -> original identifier (concept or question id).
struct Vocabulary {
    std::vector<std::string> items;

    std::size_t size() const { return items.size(); }
    bool operator==(const Vocabulary&) const = default;
};

struct PreprocessOptions {
    std::size_t min_len = 5;
    bool concept_as_question = true;
};

struct Dataset {
    std::vector<LearnerSequence> sequences;
    Vocabulary vocab;
};

// Reads an interaction log. The header must be exactly kInteractionHeader;
// the timestamp cell may be empty. Throws ParseError with the line number for
// malformed rows and for unknown or missing columns.
std::vector<InteractionRecord> load_csv(const std::filesystem::path& path);
std::vector<InteractionRecord> parse_csv(std::string_view text, const std::string& source = "<memory>");
std::string format_csv(std::span<const InteractionRecord> records);

// Groups by learner (first-appearance order), orders each learner's records by
// timestamp (stable; input order when a learner lacks timestamps), drops
// learners shorter than min_len and maps items to dense indices. Items are
// concept ids when concept_as_question is set, else question ids; indices
// follow lexicographic order of the identifiers. Throws DegenerateError when
// no learner survives.
Dataset preprocess(std::span<const InteractionRecord> records, const PreprocessOptions& options = {});

// Re-expresses processed sequences as records (item identifiers in both the
// question and concept columns, timestamp = step index).
std::vector<InteractionRecord> to_records(const Dataset& data);

// Consecutive non-overlapping segments of at most max_len steps. The segment
// learner_id is the source learner's id.
std::vector<LearnerSequence> window(const LearnerSequence& seq, std::size_t max_len);
std::vector<LearnerSequence> window_all(std::span<const LearnerSequence> seqs, std::size_t max_len);

/// Padded mini-batch of B sequences of length L, row-major [B x L].
struct Batch {
    std::size_t batch = 0;
    std::size_t len = 0;
    std::vector<int> items;
    std::vector<int> responses;
    std::vector<std::uint8_t> valid;
    std::vector<std::size_t> lengths;
    std::vector<std::string> learner_ids;

    std::size_t index(std::size_t b, std::size_t t) const { return b * len + t; }
    std::size_t valid_count() const;
};

// Pads every segment to `len` (0 = longest segment). Padded cells hold item 0,
// response 0 and valid = 0. Throws when a segment is empty or longer than len.
Batch make_batch(std::span<const LearnerSequence> segments, std::size_t len = 0);
// Inverse of make_batch: the valid prefix of every row.
std::vector<LearnerSequence> unpad(const Batch& batch);

struct FoldAssignment {
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<std::string> test;
};

struct FoldSplit {
    std::size_t k = 5;
    double val_frac = 0.10;
    std::uint64_t seed = 0;
    std::vector<FoldAssignment> folds;
};

// Learner-level k-fold split: a seeded shuffle deals learners round-robin into
// k test folds; for each fold floor(val_frac * |train|) training learners are
// held out for validation. Throws ConfigError when fewer than k learners.
FoldSplit kfold_split(std::span<const LearnerSequence> sequences, std::size_t k = 5,
                      double val_frac = 0.10, std::uint64_t seed = 0);

// Subset of `sequences` whose learner ids appear in `ids`, in `sequences` order.
std::vector<LearnerSequence> select_learners(std::span<const LearnerSequence> sequences,
                                             std::span<const std::string> ids);

struct DatasetStats {
    std::size_t learners = 0;
    std::size_t interactions = 0;
    std::size_t concepts = 0;
    std::size_t questions = 0;
    double percent_correct = 0.0;
};

DatasetStats compute_stats(std::span<const InteractionRecord> records,
                           const Dataset& processed);

}  // namespace kt
