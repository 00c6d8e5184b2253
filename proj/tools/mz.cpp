#include <string>
#include <vector>

#include "mz/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mz::cli::run_command(std::move(args));
}
