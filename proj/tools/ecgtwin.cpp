#include "ecgtwin/cli.hpp"

int main(int argc, char** argv) { return ecgtwin::cli::run(argc, argv); }
