#include "chainfl/cli.hpp"

int main(int argc, char** argv) { return chainfl::cli_main(argc, argv); }
