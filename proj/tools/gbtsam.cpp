#include <iostream>

#include "gbtsam/cli.hpp"

int main(int argc, char** argv) { return gbtsam::run_cli(argc, argv, std::cout, std::cerr); }
