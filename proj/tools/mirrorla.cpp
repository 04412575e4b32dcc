#include <iostream>

#include "mirrorla/cli.hpp"

int main(int argc, char** argv) { return mirrorla::cli::run(argc, argv, std::cout, std::cerr); }
