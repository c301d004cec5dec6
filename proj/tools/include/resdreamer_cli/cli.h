#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace resdreamer::cli
{

/// Parses and runs one command line. Every subcommand ends its stdout with a single JSON line.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// HWC RGB image as an 8-bit PNG.
void write_png(const std::filesystem::path& path, const std::vector<uint8_t>& rgb, int height, int width);

} // namespace resdreamer::cli
