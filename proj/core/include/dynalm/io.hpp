#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace dynalm::io {

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temporary file, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

// Shortest form that still round-trips: 17 significant digits.
std::string format_double(double x);

// RFC-4180 field quoting.
std::string csv_field(std::string_view field);

// Splits one CSV line honoring RFC-4180 quotes (no embedded newlines).
std::vector<std::string> parse_csv_line(std::string_view line);

}  // namespace dynalm::io
