#include <iostream>

#include "mvdiff/cli.hpp"

int main(int argc, char** argv) { return mvdiff::cli::run(argc, argv, std::cout, std::cerr); }
