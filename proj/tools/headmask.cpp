#include <iostream>
#include <string>
#include <vector>

#include "headmask/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return headmask::run_cli(args, std::cout, std::cerr);
}
