#include <iostream>

#include "uninpaint/cli.hpp"

int main(int argc, char** argv) {
    return uninpaint::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
