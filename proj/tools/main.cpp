#include <iostream>

#include "prism/cli.hpp"

int main(int argc, char** argv) { return prism::cli_main(argc, argv, std::cout, std::cerr); }
