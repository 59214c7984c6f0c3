#include <iostream>

#include "tapl/harness.hpp"

int main(int argc, char** argv) { return tapl::harness::run_cli(argc, argv, std::cout, std::cerr); }
