#include "v2pe/cli.hpp"

int main(int argc, char** argv) { return v2pe::run_cli(argc, argv); }
