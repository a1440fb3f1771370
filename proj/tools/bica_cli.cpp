#include "bica/cli.hpp"

int main(int argc, char** argv) { return bica::cli_main(argc, argv); }
