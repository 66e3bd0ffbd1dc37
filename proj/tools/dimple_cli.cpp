// SPDX-License-Identifier: Apache-2.0
#include "dimple/cli.hpp"

int main(int argc, char** argv) { return dimple::run_cli(argc, argv); }
