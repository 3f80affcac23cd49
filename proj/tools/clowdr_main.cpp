#include "clowdr/cli.hpp"

int main(int argc, char** argv) { return clowdr::run_cli(argc, argv); }
