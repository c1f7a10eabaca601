// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "commands.hpp"

int main(int argc, char** argv) { return lmort::cli::run_cli(argc, argv, std::cout, std::cerr); }
