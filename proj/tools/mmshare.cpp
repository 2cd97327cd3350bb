#include <iostream>

#include "mmshare/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mmshare::run_cli(args, std::cout, std::cerr);
}
