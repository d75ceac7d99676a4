#include <iostream>

#include "leproto/cli.hpp"

int main(int argc, char** argv) { return leproto::cli::run(argc, argv, std::cout, std::cerr); }
