// SPDX-License-Identifier: Apache-2.0

#include "finterp/cli.hpp"

int main(int argc, char** argv) { return finterp::cli::run(argc, argv); }
