#include <algorithm>
#include <charconv>
#include <map>
#include <sstream>

#include "kt/cli.hpp"
#include "kt/error.hpp"
#include "kt/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace kt::cli {
namespace {

std::vector<std::string> split_fields(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        out.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos
                                                                            : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

// Data rows of a CSV with the given header, split into fields.
std::vector<std::vector<std::string>> read_table(const fs::path& path, std::string_view header) {
    const auto text = io::read_file(path);
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::vector<std::string>> rows;
    const auto columns = split_fields(header).size();
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line_no == 1) {
            if (line != header) throw ParseError(path.string(), 1, "expected header '" + std::string(header) + "'");
            continue;
        }
        if (line.empty()) continue;
        auto fields = split_fields(line);
        if (fields.size() != columns) {
            throw ParseError(path.string(), line_no, "expected " + std::to_string(columns) + " fields");
        }
        rows.push_back(std::move(fields));
    }
    if (line_no == 0) throw ParseError(path.string(), 1, "empty file");
    return rows;
}

long long to_int(const std::string& s, const fs::path& path, std::size_t row) {
    long long v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw ParseError(path.string(), row + 2, "'" + s + "' is not an integer");
    }
    return v;
}

template <class T>
void take(const json& j, const char* key, T& field) {
    if (j.contains(key)) field = j.at(key).get<T>();
}

}  // namespace

json RunConfig::to_json() const {
    return {
        {"input", input},
        {"data", data},
        {"out", out},
        {"checkpoint", checkpoint},
        {"d_model", model.d_model},
        {"heads", model.num_heads},
        {"blocks", model.num_blocks},
        {"max_len", model.max_len},
        {"ffn_multiplier", model.ffn_multiplier},
        {"dropout", model.dropout},
        {"bias", to_string(model.bias.kind)},
        {"bias_scope", to_string(model.bias.scope)},
        {"slopes", model.bias.slopes},
        {"initial_decay", model.bias.initial_decay},
        {"lr", train.lr},
        {"batch_size", train.batch_size},
        {"epochs", train.max_epochs},
        {"patience", train.patience},
        {"exclude_first", train.exclude_first},
        {"fold", folds},
        {"seed", seeds},
        {"jobs", jobs},
        {"min_len", preprocess.min_len},
        {"question_items", !preprocess.concept_as_question},
        {"k", k},
        {"val_frac", val_frac},
        {"split_seed", split_seed},
        {"learners", synthetic.learners},
        {"concepts", synthetic.concepts},
        {"length", synthetic.length},
        {"memory_decay", synthetic.memory_decay},
        {"ability_spread", synthetic.ability_spread},
        {"difficulty_spread", synthetic.difficulty_spread},
        {"mastery_bonus", synthetic.mastery_bonus},
        {"lengths", lengths},
        {"learner", learner},
        {"block", block},
        {"attn_heads", attn_heads},
        {"window", window},
    };
}

void RunConfig::merge_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config: expected a JSON object");
    static const std::vector<std::string> known = [] {
        std::vector<std::string> keys;
        const auto defaults = RunConfig{}.to_json();
        for (const auto& [k, v] : defaults.items()) keys.push_back(k);
        return keys;
    }();
    for (const auto& [key, value] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ConfigError("config: unknown key '" + key + "'");
        }
    }
    try {
        take(j, "input", input);
        take(j, "data", data);
        take(j, "out", out);
        take(j, "checkpoint", checkpoint);
        take(j, "d_model", model.d_model);
        take(j, "heads", model.num_heads);
        take(j, "blocks", model.num_blocks);
        take(j, "max_len", model.max_len);
        take(j, "ffn_multiplier", model.ffn_multiplier);
        take(j, "dropout", model.dropout);
        if (j.contains("bias")) model.bias.kind = parse_bias_kind(j["bias"].get<std::string>());
        if (j.contains("bias_scope")) model.bias.scope = parse_bias_scope(j["bias_scope"].get<std::string>());
        take(j, "slopes", model.bias.slopes);
        take(j, "initial_decay", model.bias.initial_decay);
        take(j, "lr", train.lr);
        take(j, "batch_size", train.batch_size);
        take(j, "epochs", train.max_epochs);
        take(j, "patience", train.patience);
        take(j, "exclude_first", train.exclude_first);
        take(j, "fold", folds);
        take(j, "seed", seeds);
        take(j, "jobs", jobs);
        take(j, "min_len", preprocess.min_len);
        if (j.contains("question_items")) preprocess.concept_as_question = !j["question_items"].get<bool>();
        take(j, "k", k);
        take(j, "val_frac", val_frac);
        take(j, "split_seed", split_seed);
        take(j, "learners", synthetic.learners);
        take(j, "concepts", synthetic.concepts);
        take(j, "length", synthetic.length);
        take(j, "memory_decay", synthetic.memory_decay);
        take(j, "ability_spread", synthetic.ability_spread);
        take(j, "difficulty_spread", synthetic.difficulty_spread);
        take(j, "mastery_bonus", synthetic.mastery_bonus);
        take(j, "lengths", lengths);
        take(j, "learner", learner);
        take(j, "block", block);
        take(j, "attn_heads", attn_heads);
        take(j, "window", window);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

std::string metrics_file(std::size_t fold, std::uint64_t seed) {
    return "metrics_fold" + std::to_string(fold) + "_seed" + std::to_string(seed) + ".json";
}

std::string checkpoint_file(std::size_t fold, std::uint64_t seed) {
    return "model_fold" + std::to_string(fold) + "_seed" + std::to_string(seed) + ".ktck";
}

void write_processed(const fs::path& dir, const ProcessedData& data, std::size_t max_len) {
    const auto& ds = data.dataset;
    std::string vocab = "item,index\n";
    for (std::size_t i = 0; i < ds.vocab.items.size(); ++i)
        vocab += ds.vocab.items[i] + "," + std::to_string(i) + "\n";
    io::write_atomic(dir / "vocab.csv", vocab);

    std::string seqs = "learner_id,position,item,correct\n";
    for (const auto& s : ds.sequences)
        for (std::size_t t = 0; t < s.steps.size(); ++t)
            seqs += s.learner_id + "," + std::to_string(t) + "," + std::to_string(s.steps[t].item) + "," +
                    std::to_string(s.steps[t].correct) + "\n";
    io::write_atomic(dir / "sequences.csv", seqs);

    std::string wins = "segment,learner_id,position,item,correct\n";
    std::size_t segment = 0;
    for (const auto& w : window_all(ds.sequences, max_len)) {
        for (std::size_t t = 0; t < w.steps.size(); ++t)
            wins += std::to_string(segment) + "," + w.learner_id + "," + std::to_string(t) + "," +
                    std::to_string(w.steps[t].item) + "," + std::to_string(w.steps[t].correct) + "\n";
        ++segment;
    }
    io::write_atomic(dir / "windows.csv", wins);

    std::string folds = "fold,learner_id,role\n";
    for (std::size_t f = 0; f < data.split.folds.size(); ++f) {
        const auto& fa = data.split.folds[f];
        for (const auto* role : {"train", "val", "test"}) {
            const auto& ids = std::string_view(role) == "train" ? fa.train
                              : std::string_view(role) == "val" ? fa.val
                                                                : fa.test;
            for (const auto& id : ids) folds += std::to_string(f) + "," + id + "," + role + "\n";
        }
    }
    io::write_atomic(dir / "folds.csv", folds);
    io::write_atomic(dir / "split.json",
                     json{{"k", data.split.k}, {"val_frac", data.split.val_frac}, {"seed", data.split.seed}}
                             .dump(2) + "\n");
}

ProcessedData load_processed(const fs::path& dir) {
    ProcessedData out;
    auto& ds = out.dataset;

    const auto vocab_path = dir / "vocab.csv";
    const auto vocab_rows = read_table(vocab_path, "item,index");
    ds.vocab.items.resize(vocab_rows.size());
    for (std::size_t r = 0; r < vocab_rows.size(); ++r) {
        const auto idx = to_int(vocab_rows[r][1], vocab_path, r);
        if (idx < 0 || static_cast<std::size_t>(idx) >= vocab_rows.size()) {
            throw ParseError(vocab_path.string(), r + 2, "index outside vocabulary");
        }
        ds.vocab.items[static_cast<std::size_t>(idx)] = vocab_rows[r][0];
    }

    const auto seq_path = dir / "sequences.csv";
    const auto seq_rows = read_table(seq_path, "learner_id,position,item,correct");
    for (std::size_t r = 0; r < seq_rows.size(); ++r) {
        const auto& row = seq_rows[r];
        if (ds.sequences.empty() || ds.sequences.back().learner_id != row[0]) {
            ds.sequences.push_back({row[0], {}});
        }
        const auto item = to_int(row[2], seq_path, r);
        const auto correct = to_int(row[3], seq_path, r);
        if (item < 0 || static_cast<std::size_t>(item) >= ds.vocab.size()) {
            throw ParseError(seq_path.string(), r + 2, "item index outside vocabulary");
        }
        if (correct != 0 && correct != 1) throw ParseError(seq_path.string(), r + 2, "correct must be 0 or 1");
        ds.sequences.back().steps.push_back({static_cast<int>(item), static_cast<int>(correct)});
    }

    const auto split_path = dir / "split.json";
    try {
        const auto j = json::parse(io::read_file(split_path));
        out.split.k = j.at("k").get<std::size_t>();
        out.split.val_frac = j.at("val_frac").get<double>();
        out.split.seed = j.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw ConfigError(split_path.string() + ": " + e.what());
    }
    out.split.folds.resize(out.split.k);
    const auto folds_path = dir / "folds.csv";
    const auto fold_rows = read_table(folds_path, "fold,learner_id,role");
    for (std::size_t r = 0; r < fold_rows.size(); ++r) {
        const auto f = to_int(fold_rows[r][0], folds_path, r);
        if (f < 0 || static_cast<std::size_t>(f) >= out.split.k) {
            throw ParseError(folds_path.string(), r + 2, "fold index outside split");
        }
        auto& fa = out.split.folds[static_cast<std::size_t>(f)];
        const auto& role = fold_rows[r][2];
        if (role == "train") fa.train.push_back(fold_rows[r][1]);
        else if (role == "val") fa.val.push_back(fold_rows[r][1]);
        else if (role == "test") fa.test.push_back(fold_rows[r][1]);
        else throw ParseError(folds_path.string(), r + 2, "unknown role '" + role + "'");
    }
    return out;
}

FoldData fold_data(const ProcessedData& data, std::size_t fold) {
    if (fold >= data.split.folds.size()) {
        throw ConfigError("fold " + std::to_string(fold) + " outside the " +
                          std::to_string(data.split.folds.size()) + "-fold split");
    }
    const auto& fa = data.split.folds[fold];
    const auto& seqs = data.dataset.sequences;
    return {select_learners(seqs, fa.train), select_learners(seqs, fa.val), select_learners(seqs, fa.test)};
}

}  // namespace kt::cli
