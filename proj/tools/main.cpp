#include "cli.hpp"

#include <iostream>

int main(int argc, char ** argv) { return wemoe::run_cli(argc, argv, std::cout, std::cerr); }
