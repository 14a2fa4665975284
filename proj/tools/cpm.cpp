#include "cpm/cli.hpp"

int main(int argc, char** argv) { return cpm::run_cli(argc, argv); }
