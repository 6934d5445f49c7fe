#include <iostream>

#include "aai/cli.hpp"

int main(int argc, char** argv) { return aai::cli::cli_main(argc, argv, std::cout, std::cerr); }
