#include <iostream>
#include <string>
#include <vector>

#include "rejepa/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return rejepa::run_cli(args, std::cout, std::cerr);
}
