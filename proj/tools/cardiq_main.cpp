#include <vector>

#include "cardiq/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return cardiq::cli::run(args);
}
