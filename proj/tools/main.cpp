#include "clozelab/cli.hpp"

int main(int argc, char** argv) { return clozelab::cli::run(argc, argv); }
