#include <iostream>

#include "afft/cli/commands.hpp"

int main(int argc, char** argv) { return afft::cli::dispatch(argc, argv, std::cout, std::cerr); }
