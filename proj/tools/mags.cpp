#include "mags/cli.hpp"

int main(int argc, char** argv) { return mags::cli::run(argc, argv); }
