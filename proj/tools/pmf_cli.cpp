#include "pmf/cli.hpp"

int main(int argc, char** argv) { return pmf::run_cli(argc, argv); }
