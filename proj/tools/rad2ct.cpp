#include <iostream>

#include "rad2ct/cli.hpp"

int main(int argc, char** argv) { return rad2ct::run_cli(argc, argv, std::cout, std::cerr); }
