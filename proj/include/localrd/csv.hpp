#pragma once

#include <optional>
#include <string>
#include <vector>

namespace localrd {

// Minimal CSV support: comma separator, double-quote escaping, CRLF tolerated.
// Row vectors keep the file's column order; the header is row zero.

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    // Column index by header name, or nullopt when absent.
    std::optional<std::size_t> column(const std::string& name) const;
};

CsvTable read_csv(const std::string& path);

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

// Shortest decimal form that parses back to the identical double. Exporting
// with this keeps load/export round trips exact.
std::string format_double(double value);

// Strict double parse of a full field; nullopt on any trailing garbage.
std::optional<double> parse_double(const std::string& field);

} // namespace localrd
