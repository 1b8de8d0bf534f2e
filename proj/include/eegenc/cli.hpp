// SPDX-License-Identifier: Apache-2.0
//
// The `eegencoder` command-line front end, callable in-process.
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace eegenc::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kConfigError = 2, kIoError = 3, kMismatch = 4 };

// Identifier of the source tree this binary was built from.
const char* build_id();

// args excludes the program name, e.g. {"train", "--synthetic", "64"}.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int main_entry(int argc, char** argv);

}  // namespace eegenc::cli
