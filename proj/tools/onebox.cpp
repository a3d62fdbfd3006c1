#include <iostream>

#include "onebox/cli.hpp"

int main(int argc, char** argv) { return onebox::cli::run(argc, argv, std::cout, std::cerr); }
