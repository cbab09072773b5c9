#include <vector>

#include "ulab/cli.hpp"

int main(int argc, char** argv) {
    return ulab::cli_main(std::vector<std::string>(argv + 1, argv + argc));
}
