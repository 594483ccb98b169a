#include <iostream>

#include "hart/cli.hpp"

int main(int argc, char** argv) { return hart::cli::run(argc, argv, std::cout, std::cerr); }
