// SPDX-License-Identifier: Apache-2.0

#include "pipefill/cli.hpp"

int main(int argc, char** argv) { return pipefill::cli::run(argc, argv); }
