#include "discdiff/cli.hpp"

int main(int argc, char** argv) { return discdiff::cli::run(argc, argv); }
