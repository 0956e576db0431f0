// SPDX-License-Identifier: Apache-2.0

#include "rellax/cli.hpp"

int main(int argc, char** argv) { return rellax::run_command(argc, argv); }
