#include <iostream>

#include "cotd/cli.hpp"

int main(int argc, char** argv) { return cotd::cli::run(argc, argv, std::cout, std::cerr); }
