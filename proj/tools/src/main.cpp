#include <iostream>

#include "bnblind/cli.hpp"

int main(int argc, char** argv) { return bnblind::cli::main_entry(argc, argv, std::cout, std::cerr); }
