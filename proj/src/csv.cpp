#include "localrd/csv.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "localrd/errors.hpp"

namespace localrd {

std::optional<std::size_t> CsvTable::column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == name) return i;
    }
    return std::nullopt;
}

namespace {

std::vector<std::string> split_record(const std::string& line, std::size_t line_no) {
    std::vector<std::string> fields;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(field));
            field.clear();
        } else {
            field.push_back(c);
        }
    }
    if (quoted) {
        throw DataError("unterminated quote on line " + std::to_string(line_no));
    }
    fields.push_back(std::move(field));
    return fields;
}

bool needs_quoting(const std::string& field) {
    return field.find_first_of(",\"\n") != std::string::npos;
}

void append_field(std::string& out, const std::string& field) {
    if (!needs_quoting(field)) {
        out += field;
        return;
    }
    out.push_back('"');
    for (char c : field) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    out.push_back('"');
}

} // namespace

CsvTable read_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path);

    CsvTable table;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() && line_no > 1) continue;
        auto fields = split_record(line, line_no);
        if (line_no == 1) {
            table.header = std::move(fields);
        } else {
            if (fields.size() != table.header.size()) {
                throw DataError("line " + std::to_string(line_no) + " has " +
                                std::to_string(fields.size()) + " fields, expected " +
                                std::to_string(table.header.size()));
            }
            table.rows.push_back(std::move(fields));
        }
    }
    if (table.header.empty()) throw DataError("empty file: " + path);
    return table;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write file: " + path);
    std::string buf;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (i) buf.push_back(',');
        append_field(buf, header[i]);
    }
    buf.push_back('\n');
    out << buf;
    for (const auto& row : rows) {
        buf.clear();
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) buf.push_back(',');
            append_field(buf, row[i]);
        }
        buf.push_back('\n');
        out << buf;
    }
    if (!out) throw DataError("write failed: " + path);
}

std::string format_double(double value) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, res.ptr);
}

std::optional<double> parse_double(const std::string& field) {
    if (field.empty()) return std::nullopt;
    const char* begin = field.c_str();
    char* end = nullptr;
    // strtod accepts "inf"/"nan" spellings and leading whitespace; reject those
    // by re-checking the consumed span below.
    const double v = std::strtod(begin, &end);
    if (end != begin + field.size()) return std::nullopt;
    if (field.find_first_of("xXnNiI") != std::string::npos) return std::nullopt;
    return v;
}

} // namespace localrd
