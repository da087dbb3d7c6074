#include <iostream>

#include "samatch/cli.hpp"

int main(int argc, char** argv) { return samatch::cli::main(argc, argv, std::cout, std::cerr); }
