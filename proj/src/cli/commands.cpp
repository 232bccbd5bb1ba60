#include <algorithm>
#include <charconv>
#include <iostream>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>
#include <spawn.h>
#include <sys/wait.h>

#include "kt/checkpoint.hpp"
#include "kt/cli.hpp"
#include "kt/error.hpp"
#include "kt/io.hpp"
#include "kt/sweep.hpp"

extern char** environ;

namespace fs = std::filesystem;
using nlohmann::json;

namespace kt::cli {
namespace {

constexpr const char* kFooter =
    "Relative output paths are resolved under $KT_OUTPUT_ROOT when it is set.\n"
    "--config FILE reads a JSON object of option values (long names, '-' as '_');\n"
    "flags given on the command line take precedence. Exit codes: 0 success,\n"
    "2 configuration error, 3 runtime failure.";

std::string num(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

void require(const std::string& value, const char* flag) {
    if (value.empty()) throw ConfigError(std::string("missing required option ") + flag);
}

void write_json(const fs::path& path, const json& j) { io::write_atomic(path, j.dump(2) + "\n"); }

json manifest(const std::string& command, const RunConfig& cfg) {
    return {{"command", command}, {"config", cfg.to_json()}};
}

// --------------------------------------------------------------- preprocess

int cmd_preprocess(const RunConfig& cfg, std::ostream& out) {
    require(cfg.input, "--input");
    require(cfg.out, "--out");
    const auto dir = io::resolve_output(cfg.out);
    const auto records = load_csv(cfg.input);
    ProcessedData data;
    data.dataset = preprocess(records, cfg.preprocess);
    data.split = kfold_split(data.dataset.sequences, cfg.k, cfg.val_frac, cfg.split_seed);
    write_processed(dir, data, cfg.model.max_len);

    const auto st = compute_stats(records, data.dataset);
    const json stats = {
        {"learners", st.learners},     {"interactions", st.interactions},
        {"concepts", st.concepts},     {"questions", st.questions},
        {"items", data.dataset.vocab.size()}, {"percent_correct", st.percent_correct},
    };
    write_json(dir / "stats.json", stats);
    auto m = manifest("preprocess", cfg);
    m["stats"] = stats;
    m["outputs"] = {"vocab.csv", "sequences.csv", "windows.csv", "folds.csv", "split.json", "stats.json"};
    write_json(dir / "manifest_preprocess.json", m);

    out << "learners      " << st.learners << "\n"
        << "interactions  " << st.interactions << "\n"
        << "concepts      " << st.concepts << "\n"
        << "questions     " << st.questions << "\n"
        << "items         " << data.dataset.vocab.size() << "\n"
        << "% correct     " << num(st.percent_correct) << "\n";
    return kOk;
}

// ------------------------------------------------------------ gen-synthetic

int cmd_gen_synthetic(const RunConfig& cfg, std::ostream& out) {
    require(cfg.out, "--out");
    if (cfg.seeds.size() != 1) throw ConfigError("gen-synthetic takes exactly one --seed");
    auto spec = cfg.synthetic;
    spec.seed = cfg.seeds.front();
    const auto data = gen_synthetic(spec);
    const auto path = io::resolve_output(cfg.out);
    io::write_atomic(path, format_csv(data.records));

    const double expected = std::accumulate(data.probabilities.begin(), data.probabilities.end(), 0.0) /
                            static_cast<double>(data.probabilities.size());
    auto m = manifest("gen-synthetic", cfg);
    m["spec"] = {{"learners", spec.learners},         {"concepts", spec.concepts},
                 {"length", spec.length},             {"memory_decay", spec.memory_decay},
                 {"ability_spread", spec.ability_spread}, {"difficulty_spread", spec.difficulty_spread},
                 {"mastery_bonus", spec.mastery_bonus}, {"seed", spec.seed}};
    m["rows"] = data.records.size();
    m["expected_percent_correct"] = 100.0 * expected;
    fs::path sidecar = path;
    sidecar += ".manifest.json";
    write_json(sidecar, m);
    out << "wrote " << data.records.size() << " interactions to " << path.string() << "\n";
    return kOk;
}

// -------------------------------------------------------------------- train

void train_one(const RunConfig& cfg, const ProcessedData& data, std::size_t fold, std::uint64_t seed,
               std::ostream& out, std::ostream& err) {
    const auto dir = io::resolve_output(cfg.out);
    const auto fd = fold_data(data, fold);
    auto mc = cfg.model;
    mc.vocab_size = data.dataset.vocab.size();
    KtModel model(mc, seed);
    auto tc = cfg.train;
    tc.seed = seed;
    tc.fold = fold;

    const auto train_w = window_all(fd.train, mc.max_len);
    const auto val_w = window_all(fd.val, mc.max_len);
    const auto test_w = window_all(fd.test, mc.max_len);
    const std::string tag = "fold" + std::to_string(fold) + "_seed" + std::to_string(seed);

    std::string log = "epoch,train_loss,val_auc,improved\n";
    const auto result = train(model, train_w, val_w, tc, [&](const EpochLog& e) {
        log += std::to_string(e.epoch) + "," + num(e.train_loss) + "," + num(e.val_auc) + "," +
               (e.improved ? "1" : "0") + "\n";
        err << "[" << tag << "] epoch " << e.epoch << " loss " << e.train_loss << " val_auc " << e.val_auc
            << (e.improved ? " *" : "") << "\n";
    });
    save_checkpoint(dir / checkpoint_file(fold, seed), model);
    io::write_atomic(dir / ("log_" + tag + ".csv"), log);

    auto report = evaluate(model, test_w, tc.batch_size, tc.exclude_first);
    report.fold = fold;
    report.seed = seed;
    write_json(dir / metrics_file(fold, seed), report.to_json());

    RunConfig single = cfg;
    single.folds = {fold};
    single.seeds = {seed};
    single.jobs = 1;
    auto m = manifest("train", single);
    m["parameter_count"] = model.parameter_count();
    m["vocab_size"] = mc.vocab_size;
    m["best_epoch"] = result.best_epoch;
    m["best_val_auc"] = result.best_val_auc;
    m["epochs_run"] = result.log.size();
    m["stopped_early"] = result.stopped_early;
    m["train_segments"] = train_w.size();
    m["val_segments"] = val_w.size();
    m["test_segments"] = test_w.size();
    m["outputs"] = {checkpoint_file(fold, seed), "log_" + tag + ".csv", metrics_file(fold, seed)};
    write_json(dir / ("manifest_train_" + tag + ".json"), m);

    out << tag << " bias=" << report.bias_kind << " auc=" << num(report.auc) << " acc=" << num(report.acc)
        << " rmse=" << num(report.rmse * 100.0) << " w_acc=" << num(report.w_acc)
        << " n=" << report.n_evaluated << "\n";
}

// Runs each (fold, seed) pair in its own child process, at most cfg.jobs at a time.
int train_parallel(const RunConfig& cfg, std::ostream& err) {
    const auto dir = io::resolve_output(cfg.out);
    std::vector<std::pair<std::size_t, std::uint64_t>> runs;
    for (auto f : cfg.folds)
        for (auto s : cfg.seeds) runs.emplace_back(f, s);

    std::size_t next = 0, running = 0, failed = 0;
    while (next < runs.size() || running > 0) {
        if (next < runs.size() && running < cfg.jobs) {
            const auto [fold, seed] = runs[next++];
            RunConfig single = cfg;
            single.folds = {fold};
            single.seeds = {seed};
            single.jobs = 1;
            single.out = dir.string();
            const auto config_path =
                dir / ("config_fold" + std::to_string(fold) + "_seed" + std::to_string(seed) + ".json");
            write_json(config_path, single.to_json());
            std::string exe = "/proc/self/exe", sub = "train", flag = "--config", file = config_path.string();
            char* argv[] = {exe.data(), sub.data(), flag.data(), file.data(), nullptr};
            pid_t pid = 0;
            if (posix_spawn(&pid, exe.c_str(), nullptr, nullptr, argv, environ) != 0) {
                throw Error("cannot start a worker process");
            }
            ++running;
            continue;
        }
        int status = 0;
        if (::wait(&status) < 0) throw Error("lost track of worker processes");
        --running;
        if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) ++failed;
    }
    if (failed > 0) {
        err << failed << " of " << runs.size() << " training runs failed\n";
        return kRuntimeError;
    }
    return kOk;
}

int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    require(cfg.data, "--data");
    require(cfg.out, "--out");
    if (cfg.folds.empty() || cfg.seeds.empty()) throw ConfigError("train needs at least one fold and seed");
    if (cfg.jobs == 0) throw ConfigError("--jobs must be positive");
    cfg.train.validate();
    auto probe = cfg.model;
    probe.vocab_size = 1;
    probe.validate();
    if (cfg.jobs > 1 && cfg.folds.size() * cfg.seeds.size() > 1) return train_parallel(cfg, err);

    const auto data = load_processed(cfg.data);
    for (auto f : cfg.folds)
        for (auto s : cfg.seeds) train_one(cfg, data, f, s, out, err);
    return kOk;
}

// ----------------------------------------------------------------- evaluate

int cmd_evaluate(const RunConfig& cfg, std::ostream& out) {
    require(cfg.checkpoint, "--checkpoint");
    require(cfg.data, "--data");
    require(cfg.out, "--out");
    const auto dir = io::resolve_output(cfg.out);
    auto model = load_checkpoint(cfg.checkpoint);
    const auto data = load_processed(cfg.data);
    const std::size_t fold = cfg.folds.at(0);
    const std::uint64_t seed = cfg.seeds.at(0);
    const auto test = window_all(fold_data(data, fold).test, model.config().max_len);
    auto report = evaluate(model, test, cfg.train.batch_size, cfg.train.exclude_first);
    report.fold = fold;
    report.seed = seed;
    const std::string name = "eval_fold" + std::to_string(fold) + "_seed" + std::to_string(seed) + ".json";
    write_json(dir / name, report.to_json());
    auto m = manifest("evaluate", cfg);
    m["outputs"] = {name};
    write_json(dir / ("manifest_evaluate_fold" + std::to_string(fold) + "_seed" + std::to_string(seed) + ".json"), m);
    out << report.to_json().dump() << "\n";
    return kOk;
}

// -------------------------------------------------------------------- sweep

int cmd_sweep(const RunConfig& cfg, std::ostream& out) {
    require(cfg.checkpoint, "--checkpoint");
    require(cfg.data, "--data");
    require(cfg.out, "--out");
    if (!fs::exists(cfg.checkpoint)) throw Error("checkpoint not found: " + cfg.checkpoint);
    const auto dir = io::resolve_output(cfg.out);
    auto model = load_checkpoint(cfg.checkpoint);
    const auto data = load_processed(cfg.data);
    const std::size_t fold = cfg.folds.at(0);
    const std::uint64_t seed = cfg.seeds.at(0);
    const auto test = fold_data(data, fold).test;
    const auto settings = sweep_length(model, test, cfg.lengths, cfg.train.batch_size);
    const auto kind = to_string(model.config().bias.kind);
    const auto rows = sweep_rows(settings, kind, fold, seed);

    const std::string tag = "fold" + std::to_string(fold) + "_seed" + std::to_string(seed);
    io::write_atomic(dir / ("sweep_" + tag + ".csv"), format_sweep_csv(rows));
    json results = json::array();
    for (const auto& s : settings) {
        json r = {{"length", s.length}, {"status", to_string(s.status)}, {"n_evaluated", s.n_evaluated},
                  {"fold", fold},       {"seed", seed},                  {"bias_kind", kind}};
        for (const auto& [name, v] : {std::pair{"auc", s.auc}, {"acc", s.acc}, {"rmse", s.rmse}, {"w_acc", s.w_acc}})
            r[name] = v ? json(*v) : json(nullptr);
        results.push_back(r);
    }
    write_json(dir / ("sweep_" + tag + ".json"), results);
    auto m = manifest("sweep", cfg);
    m["outputs"] = {"sweep_" + tag + ".csv", "sweep_" + tag + ".json"};
    write_json(dir / ("manifest_sweep_" + tag + ".json"), m);

    for (const auto& s : settings) {
        out << "n=" << s.length << " " << to_string(s.status) << " evaluated=" << s.n_evaluated;
        if (s.auc) out << " auc=" << num(*s.auc);
        out << "\n";
    }
    return kOk;
}

// ----------------------------------------------------------- dump-attention

int cmd_dump_attention(const RunConfig& cfg, std::ostream& out) {
    require(cfg.checkpoint, "--checkpoint");
    require(cfg.data, "--data");
    require(cfg.out, "--out");
    require(cfg.learner, "--learner");
    const auto dir = io::resolve_output(cfg.out);
    auto model = load_checkpoint(cfg.checkpoint);
    const auto data = load_processed(cfg.data);
    const auto& seqs = data.dataset.sequences;
    const auto it = std::find_if(seqs.begin(), seqs.end(),
                                 [&](const LearnerSequence& s) { return s.learner_id == cfg.learner; });
    if (it == seqs.end()) throw Error("learner '" + cfg.learner + "' not found in " + cfg.data);

    const std::size_t H = model.config().num_heads;
    auto heads = cfg.attn_heads.empty() ? std::vector<std::size_t>{1, H} : cfg.attn_heads;
    for (auto h : heads)
        if (h == 0 || h > H) throw ConfigError("head " + std::to_string(h) + " outside 1.." + std::to_string(H));
    std::sort(heads.begin(), heads.end());
    heads.erase(std::unique(heads.begin(), heads.end()), heads.end());

    const auto first = window(*it, model.config().max_len).front();
    const auto batch = make_batch(std::span(&first, 1));
    const auto block = model.resolve_block(cfg.block);
    const auto trace = dump_attention(model, batch, 0, block, cfg.window);

    json files = json::array();
    for (auto h : heads) {
        std::string text;
        for (std::size_t i = 0; i < trace.len; ++i) {
            for (std::size_t j = 0; j < trace.len; ++j) {
                if (j) text += ",";
                text += num(trace.at(h - 1, i, j));
            }
            text += "\n";
        }
        const auto name = "attention_" + trace.block + "_head" + std::to_string(h) + ".csv";
        io::write_atomic(dir / name, text);
        files.push_back(name);
        out << "wrote " << (dir / name).string() << "\n";
    }
    auto m = manifest("dump-attention", cfg);
    m["block_name"] = trace.block;
    m["positions"] = trace.len;
    m["outputs"] = files;
    write_json(dir / "manifest_dump_attention.json", m);
    return kOk;
}

// ------------------------------------------------------------------ parsing

std::string find_config_file(const std::vector<std::string>& args) {
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
    }
    return {};
}

void model_options(CLI::App* sub, RunConfig& cfg, std::string& bias, std::string& scope) {
    sub->add_option("--d-model", cfg.model.d_model, "embedding size")->capture_default_str();
    sub->add_option("--heads", cfg.model.num_heads, "attention heads")->capture_default_str();
    sub->add_option("--blocks", cfg.model.num_blocks, "attention blocks per component")->capture_default_str();
    sub->add_option("--max-len", cfg.model.max_len, "maximum history length")->capture_default_str();
    sub->add_option("--ffn-multiplier", cfg.model.ffn_multiplier, "feed-forward width / d_model")
        ->capture_default_str();
    sub->add_option("--dropout", cfg.model.dropout, "dropout rate")->capture_default_str();
    sub->add_option("--bias", bias, "none|pe|mono|rc|folibi")->capture_default_str();
    sub->add_option("--bias-scope", scope, "all_blocks|retriever_only")->capture_default_str();
    sub->add_option("--slopes", cfg.model.bias.slopes, "FoLiBi slopes, one per head")->delimiter(',');
    sub->add_option("--initial-decay", cfg.model.bias.initial_decay, "initial Mono/RC decay rate")
        ->capture_default_str();
}

void train_options(CLI::App* sub, RunConfig& cfg) {
    sub->add_option("--lr", cfg.train.lr, "learning rate")->capture_default_str();
    sub->add_option("--batch-size", cfg.train.batch_size, "mini-batch size")->capture_default_str();
    sub->add_option("--epochs", cfg.train.max_epochs, "maximum epochs")->capture_default_str();
    sub->add_option("--patience", cfg.train.patience, "early-stopping patience")->capture_default_str();
    sub->add_flag("--exclude-first{true},--include-first{false}", cfg.train.exclude_first,
                  "leave each segment's first position out of loss and metrics");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    try {
        const auto config_file = find_config_file(args);
        if (!config_file.empty()) cfg.merge_json(json::parse(io::read_file(config_file)));
    } catch (const json::exception& e) {
        err << "error: config file: " << e.what() << "\n";
        return kConfigError;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kConfigError;
    }

    CLI::App app{"Knowledge tracing with forgetting-aware attention", "kt"};
    app.footer(kFooter);
    app.require_subcommand(1);
    std::string config_path;
    std::string bias = to_string(cfg.model.bias.kind), scope = to_string(cfg.model.bias.scope);

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON file of option values");
        sub->footer(kFooter);
    };

    auto* pre = app.add_subcommand("preprocess", "clean, index and split an interaction log");
    common(pre);
    pre->add_option("--input", cfg.input, "interaction CSV");
    pre->add_option("--out", cfg.out, "output directory");
    pre->add_option("--min-len", cfg.preprocess.min_len, "drop learners with fewer interactions")
        ->capture_default_str();
    pre->add_flag("--question-items{false},--concept-items{true}", cfg.preprocess.concept_as_question,
                  "index questions instead of concepts");
    pre->add_option("--max-len", cfg.model.max_len, "window length for windows.csv")->capture_default_str();
    pre->add_option("--k", cfg.k, "number of folds")->capture_default_str();
    pre->add_option("--val-frac", cfg.val_frac, "validation share of each training fold")->capture_default_str();
    pre->add_option("--split-seed", cfg.split_seed, "fold assignment seed")->capture_default_str();

    auto* gen = app.add_subcommand("gen-synthetic", "write a synthetic forgetting dataset");
    common(gen);
    gen->add_option("--out", cfg.out, "output CSV");
    gen->add_option("--learners", cfg.synthetic.learners)->capture_default_str();
    gen->add_option("--concepts", cfg.synthetic.concepts)->capture_default_str();
    gen->add_option("--length", cfg.synthetic.length, "interactions per learner")->capture_default_str();
    gen->add_option("--memory-decay", cfg.synthetic.memory_decay, "memory time constant in steps")
        ->capture_default_str();
    gen->add_option("--ability-spread", cfg.synthetic.ability_spread)->capture_default_str();
    gen->add_option("--difficulty-spread", cfg.synthetic.difficulty_spread)->capture_default_str();
    gen->add_option("--mastery-bonus", cfg.synthetic.mastery_bonus)->capture_default_str();
    gen->add_option("--seed", cfg.seeds, "generator seed")->expected(1);

    auto* trn = app.add_subcommand("train", "train one model per (fold, seed) and evaluate it on the test fold");
    common(trn);
    trn->add_option("--data", cfg.data, "preprocessed dataset directory");
    trn->add_option("--out", cfg.out, "output directory");
    model_options(trn, cfg, bias, scope);
    train_options(trn, cfg);
    trn->add_option("--fold", cfg.folds, "fold indices")->delimiter(',');
    trn->add_option("--seed", cfg.seeds, "seeds")->delimiter(',');
    trn->add_option("--jobs", cfg.jobs, "parallel worker processes")->capture_default_str();

    auto* evl = app.add_subcommand("evaluate", "score a checkpoint on a test fold");
    common(evl);
    evl->add_option("--checkpoint", cfg.checkpoint, "model file");
    evl->add_option("--data", cfg.data, "preprocessed dataset directory");
    evl->add_option("--out", cfg.out, "output directory");
    evl->add_option("--fold", cfg.folds, "fold index")->expected(1);
    evl->add_option("--seed", cfg.seeds, "seed label for the output name")->expected(1);
    evl->add_option("--batch-size", cfg.train.batch_size)->capture_default_str();
    evl->add_flag("--exclude-first{true},--include-first{false}", cfg.train.exclude_first);

    auto* swp = app.add_subcommand("sweep", "evaluate with fixed-length histories");
    common(swp);
    swp->add_option("--checkpoint", cfg.checkpoint, "model file");
    swp->add_option("--data", cfg.data, "preprocessed dataset directory");
    swp->add_option("--out", cfg.out, "output directory");
    swp->add_option("--fold", cfg.folds, "fold index")->expected(1);
    swp->add_option("--seed", cfg.seeds, "seed label for the output name")->expected(1);
    swp->add_option("--lengths", cfg.lengths, "history lengths")->delimiter(',');
    swp->add_option("--batch-size", cfg.train.batch_size)->capture_default_str();

    auto* dmp = app.add_subcommand("dump-attention", "write per-head attention matrices for one learner");
    common(dmp);
    dmp->add_option("--checkpoint", cfg.checkpoint, "model file");
    dmp->add_option("--data", cfg.data, "preprocessed dataset directory");
    dmp->add_option("--out", cfg.out, "output directory");
    dmp->add_option("--learner", cfg.learner, "learner id");
    dmp->add_option("--block", cfg.block, "retriever|question|interaction|<component>.<i>|<index>")
        ->capture_default_str();
    dmp->add_option("--heads", cfg.attn_heads, "1-based heads (default first and last)")->delimiter(',');
    dmp->add_option("-n,--positions", cfg.window, "leading positions to keep")->capture_default_str();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        std::ostringstream o, eo;
        const int code = app.exit(e, o, eo);
        out << o.str();
        err << eo.str();
        return code == 0 ? kOk : kConfigError;
    }

    try {
        cfg.model.bias.kind = parse_bias_kind(bias);
        cfg.model.bias.scope = parse_bias_scope(scope);
        if (pre->parsed()) return cmd_preprocess(cfg, out);
        if (gen->parsed()) return cmd_gen_synthetic(cfg, out);
        if (trn->parsed()) return cmd_train(cfg, out, err);
        if (evl->parsed()) return cmd_evaluate(cfg, out);
        if (swp->parsed()) return cmd_sweep(cfg, out);
        if (dmp->parsed()) return cmd_dump_attention(cfg, out);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kRuntimeError;
    }
    return kConfigError;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args, out, err);
}

}  // namespace kt::cli
