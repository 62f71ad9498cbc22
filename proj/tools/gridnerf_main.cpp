// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "gridnerf/cli.hpp"

int main(int argc, char** argv) { return gridnerf::run_cli(argc, argv, std::cout, std::cerr); }
