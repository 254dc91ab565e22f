#include <iostream>
#include <string>
#include <vector>

#include "tfdecomp/cli.hpp"

int main(int argc, char** argv) {
  return tfdecomp::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
