#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "kt/data.hpp"
#include "kt/model.hpp"
#include "kt/synthetic.hpp"
#include "kt/train.hpp"

namespace kt::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kRuntimeError = 3 };

/// Every setting a command can take. Serialises to a flat JSON object whose
/// keys are the long flag names with '-' replaced by '_', so a manifest's
/// "config" block can be passed back through --config.
struct RunConfig {
    std::string input;       // raw interaction CSV (preprocess)
    std::string data;        // processed dataset directory
    std::string out;         // output directory, or output CSV for gen-synthetic
    std::string checkpoint;  // evaluate, sweep, dump-attention

    ModelConfig model;
    TrainConfig train;
    std::vector<std::size_t> folds{0};
    std::vector<std::uint64_t> seeds{0};
    std::size_t jobs = 1;

    PreprocessOptions preprocess;
    std::size_t k = 5;
    double val_frac = 0.1;
    std::uint64_t split_seed = 0;

    SyntheticSpec synthetic;

    std::vector<std::size_t> lengths{10, 20, 50, 100, 200, 300};

    std::string learner;
    std::string block = "retriever";
    std::vector<std::size_t> attn_heads;  // 1-based; empty means first and last
    std::size_t window = 20;

    nlohmann::json to_json() const;
    // Missing keys keep their current values. Throws ConfigError.
    void merge_json(const nlohmann::json& j);
};

// Output of the preprocess command, read back by the other commands.
struct ProcessedData {
    Dataset dataset;
    FoldSplit split;
};

void write_processed(const std::filesystem::path& dir, const ProcessedData& data,
                     std::size_t max_len);
ProcessedData load_processed(const std::filesystem::path& dir);

struct FoldData {
    std::vector<LearnerSequence> train, val, test;
};
FoldData fold_data(const ProcessedData& data, std::size_t fold);

std::string metrics_file(std::size_t fold, std::uint64_t seed);
std::string checkpoint_file(std::size_t fold, std::uint64_t seed);

// Parses argv and runs one subcommand. Diagnostics go to `err`, summaries to
// `out`. Returns an ExitCode value.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace kt::cli
