#include <iostream>
#include <vector>

#include "sda/cli.hpp"

int main(int argc, char** argv) {
    return sda::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
