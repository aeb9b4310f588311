#include "coopgen/cli_commands.hpp"

int main(int argc, char** argv) { return coopgen::cli::dispatch(argc, argv); }
