#pragma once

// Command-line front end: gen, train, eval, spans and report. Exit codes are
// 0 on success, 1 on usage errors and 2 on runtime errors.

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "pipsim/autodiff.hpp"
#include "pipsim/pipeline.hpp"

namespace pipsim::cli {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

// Runs one command. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Bar chart with one <rect class="bar"> per frame index.
std::string histogram_svg(const std::vector<std::size_t>& counts, const std::string& title);
// Train and validation BCE plus validation accuracy (or PSNR for the
// simulator variant) per epoch.
std::string curves_svg(const std::vector<pipe::MetricRow>& rows);
// Binary PPM with one row of frames per tensor, each [N, 3, H, W] in [0, 1].
void write_strip_ppm(const std::vector<const ad::Tensor*>& rows, const std::filesystem::path& path);

}  // namespace pipsim::cli
