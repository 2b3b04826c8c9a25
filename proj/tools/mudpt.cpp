#include <iostream>

#include "mudpt/cli/cli.hpp"

int main(int argc, char** argv) { return mudpt::cli_main(argc, argv, std::cout, std::cerr); }
