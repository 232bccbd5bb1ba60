#include <charconv>
#include <fstream>
#include <sstream>

#include "kt/data.hpp"
#include "kt/error.hpp"

namespace kt {
namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            cells.push_back(line.substr(start));
            break;
        }
        cells.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return cells;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    return s;
}

constexpr std::string_view kColumns[] = {"learner_id", "question_id", "concept_id", "correct",
                                         "timestamp_ms"};

}  // namespace

std::vector<InteractionRecord> parse_csv(std::string_view text, const std::string& source) {
    std::vector<InteractionRecord> out;
    std::size_t line_no = 0;
    bool header_seen = false;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        const auto line = trim(text.substr(pos, end - pos));
        pos = end + 1;
        ++line_no;
        if (line.empty()) {
            if (end == text.size()) break;
            continue;
        }
        const auto cells = split_commas(line);
        if (!header_seen) {
            for (std::size_t i = 0; i < cells.size(); ++i) {
                const auto name = trim(cells[i]);
                if (i >= std::size(kColumns)) {
                    throw ParseError(source, line_no, "unknown column '" + std::string(name) + "'");
                }
                if (name != kColumns[i]) {
                    bool known = false;
                    for (auto c : kColumns) known = known || c == name;
                    throw ParseError(source, line_no,
                                     (known ? "column '" + std::string(name) + "' out of order"
                                            : "unknown column '" + std::string(name) + "'") +
                                         "; expected header " + kInteractionHeader);
                }
            }
            if (cells.size() != std::size(kColumns)) {
                throw ParseError(source, line_no,
                                 std::string("missing columns; expected header ") + kInteractionHeader);
            }
            header_seen = true;
            continue;
        }
        if (cells.size() != std::size(kColumns)) {
            throw ParseError(source, line_no,
                             "expected 5 fields, found " + std::to_string(cells.size()));
        }
        InteractionRecord r;
        r.learner_id = std::string(trim(cells[0]));
        r.question_id = std::string(trim(cells[1]));
        r.concept_id = std::string(trim(cells[2]));
        if (r.learner_id.empty() || r.question_id.empty() || r.concept_id.empty()) {
            throw ParseError(source, line_no, "empty identifier");
        }
        const auto correct = trim(cells[3]);
        if (correct == "0") {
            r.correct = 0;
        } else if (correct == "1") {
            r.correct = 1;
        } else {
            throw ParseError(source, line_no,
                             "correct must be 0 or 1, got '" + std::string(correct) + "'");
        }
        const auto ts = trim(cells[4]);
        if (!ts.empty()) {
            std::int64_t value = 0;
            const auto [p, ec] = std::from_chars(ts.data(), ts.data() + ts.size(), value);
            if (ec != std::errc() || p != ts.data() + ts.size()) {
                throw ParseError(source, line_no, "bad timestamp_ms '" + std::string(ts) + "'");
            }
            r.timestamp_ms = value;
        }
        out.push_back(std::move(r));
        if (end == text.size()) break;
    }
    if (!header_seen) throw ParseError(source, 1, "missing header row");
    return out;
}

std::vector<InteractionRecord> load_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_csv(ss.str(), path.string());
}

std::string format_csv(std::span<const InteractionRecord> records) {
    std::string out = kInteractionHeader;
    out += '\n';
    for (const auto& r : records) {
        out += r.learner_id;
        out += ',';
        out += r.question_id;
        out += ',';
        out += r.concept_id;
        out += ',';
        out += r.correct ? '1' : '0';
        out += ',';
        if (r.timestamp_ms) out += std::to_string(*r.timestamp_ms);
        out += '\n';
    }
    return out;
}

}  // namespace kt
