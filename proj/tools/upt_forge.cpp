#include <string>
#include <vector>

#include "upt/pipeline.hpp"

int main(int argc, char** argv) {
  return upt::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
