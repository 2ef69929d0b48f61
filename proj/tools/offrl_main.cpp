#include "offrl/cli.hpp"

int main(int argc, char** argv) { return offrl::run_command(argc, argv); }
