#include <iostream>
#include <string>
#include <vector>

#include "tentgp/cli.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  return tentgp::run_cli(args, std::cout, std::cerr);
}
