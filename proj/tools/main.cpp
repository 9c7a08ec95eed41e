#include <string>
#include <vector>

#include "cdiff/cli.hpp"

int main(int argc, char** argv) {
    return cdiff::cli::run(std::vector<std::string>(argv, argv + argc));
}
