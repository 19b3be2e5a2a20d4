#include <iostream>

#include "unimeec/cli.hpp"

int main(int argc, char** argv) { return unimeec::run_cli(argc, argv, std::cout, std::cerr); }
