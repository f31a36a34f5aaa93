#include "commands.hpp"

int main(int argc, char** argv) { return flashsvd::cli::run_cli(argc, argv); }
