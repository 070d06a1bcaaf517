#include <iostream>
#include <string>
#include <vector>

#include "scatsep/pipeline.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return scatsep::run_command(args, std::cout, std::cerr);
}
