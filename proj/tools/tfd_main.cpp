#include <vector>

#include "tfd/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return tfd::run_cli(args);
}
