#include <iostream>
#include <string>
#include <vector>

#include "klite/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return klite::cli::run(args, std::cout, std::cerr);
}
