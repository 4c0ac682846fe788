#include "condsum/cli.hpp"

int main(int argc, char** argv) { return condsum::cli::run(argc, argv); }
