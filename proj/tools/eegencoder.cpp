// SPDX-License-Identifier: Apache-2.0
#include "eegenc/cli.hpp"

int main(int argc, char** argv) { return eegenc::cli::main_entry(argc, argv); }
