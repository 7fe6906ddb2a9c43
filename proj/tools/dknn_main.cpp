#include "dknn/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return dknn::run_cli(argc, argv, std::cout, std::cerr); }
