// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#include <rayvis/cli.hpp>

#include <iostream>

int main(int argc, char **argv) {
    return rayvis::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
