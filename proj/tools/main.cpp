// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "comol/cli.h"

int main(int argc, char** argv) {
    return comol::cli_dispatch(argc, argv, std::cout, std::cerr);
}
