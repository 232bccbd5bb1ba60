#include "kt/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "kt/error.hpp"
#include "kt/io.hpp"

namespace kt {
namespace {

constexpr char kMagic[4] = {'K', 'T', 'C', 'K'};

template <class T>
void put(std::string& out, T value) {
    static_assert(std::is_unsigned_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

class Reader {
public:
    Reader(std::string_view bytes, const std::string& source) : bytes_(bytes), source_(source) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += sizeof(T);
        return v;
    }

    std::string_view take(std::size_t n) {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw Error(source_ + ": truncated checkpoint");
    }

    std::string_view bytes_;
    const std::string& source_;
    std::size_t pos_ = 0;
};

}  // namespace

nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {
        {"d_model", c.d_model},
        {"num_heads", c.num_heads},
        {"num_blocks", c.num_blocks},
        {"max_len", c.max_len},
        {"vocab_size", c.vocab_size},
        {"ffn_multiplier", c.ffn_multiplier},
        {"dropout", c.dropout},
        {"bias_kind", to_string(c.bias.kind)},
        {"bias_scope", to_string(c.bias.scope)},
        {"slopes", c.bias.slopes},
        {"initial_decay", c.bias.initial_decay},
    };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.d_model = j.value("d_model", c.d_model);
        c.num_heads = j.value("num_heads", c.num_heads);
        c.num_blocks = j.value("num_blocks", c.num_blocks);
        c.max_len = j.value("max_len", c.max_len);
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.ffn_multiplier = j.value("ffn_multiplier", c.ffn_multiplier);
        c.dropout = j.value("dropout", c.dropout);
        c.bias.kind = parse_bias_kind(j.value("bias_kind", std::string("none")));
        c.bias.scope = parse_bias_scope(j.value("bias_scope", std::string("all_blocks")));
        c.bias.slopes = j.value("slopes", std::vector<double>{});
        c.bias.initial_decay = j.value("initial_decay", c.bias.initial_decay);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    return c;
}

std::string encode_checkpoint(const KtModel& model) {
    std::string out(kMagic, 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    const auto config = model_config_to_json(model.config()).dump();
    put<std::uint64_t>(out, config.size());
    out += config;
    const auto& params = model.parameters();
    put<std::uint64_t>(out, params.size());
    for (const auto& p : params) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name().size()));
        out += p.name();
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p.rank()));
        for (auto d : p.shape()) put<std::uint64_t>(out, d);
        for (double v : p.data()) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

KtModel decode_checkpoint(std::string_view bytes, const std::string& source) {
    Reader in(bytes, source);
    if (in.take(4) != std::string_view(kMagic, 4)) throw Error(source + ": not a checkpoint file");
    const auto version = in.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw Error(source + ": unsupported checkpoint version " + std::to_string(version));
    }
    const auto config_len = in.get<std::uint64_t>();
    ModelConfig config;
    try {
        config = model_config_from_json(nlohmann::json::parse(in.take(config_len)));
    } catch (const nlohmann::json::exception& e) {
        throw Error(source + ": bad config block: " + e.what());
    }
    KtModel model(config, 0);
    auto& params = model.parameters();
    const auto count = in.get<std::uint64_t>();
    if (count != params.size()) {
        throw DimensionError(source + ": " + std::to_string(count) + " tensors stored, model has " +
                             std::to_string(params.size()));
    }
    for (auto& p : params) {
        const auto name = in.take(in.get<std::uint32_t>());
        if (name != p.name()) {
            throw DimensionError(source + ": expected tensor " + p.name() + ", found " + std::string(name));
        }
        Shape shape(in.get<std::uint32_t>());
        for (auto& d : shape) d = in.get<std::uint64_t>();
        if (shape != p.shape()) {
            throw DimensionError(source + ": tensor " + p.name() + " has shape " + shape_str(shape) +
                                 ", expected " + shape_str(p.shape()));
        }
        auto data = p.data();
        for (double& v : data) v = std::bit_cast<double>(in.get<std::uint64_t>());
        check_finite(data, source + ": " + p.name());
    }
    if (!in.done()) throw Error(source + ": trailing bytes after last tensor");
    return model;
}

void save_checkpoint(const std::filesystem::path& path, const KtModel& model) {
    io::write_atomic(path, encode_checkpoint(model));
}

KtModel load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(io::read_file(path), path.string());
}

}  // namespace kt
