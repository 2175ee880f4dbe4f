#pragma once

#include <string>
#include <vector>

namespace clens {

/// Shortest decimal that parses back to the same double.
std::string format_double(double value);

/// Quotes a CSV field when it holds a comma, quote or newline.
std::string csv_field(const std::string& value);

/// RFC 4180 rows: quoted fields may hold commas, newlines and "" escapes.
std::vector<std::vector<std::string>> parse_csv_rows(const std::string& text);

/// Parses a whole-string finite double, throwing a parse error naming `what`.
double parse_double(const std::string& text, const std::string& what);

}  // namespace clens
