#include "tipslab/cli.hpp"

int main(int argc, char** argv) { return tipslab::cli::dispatch(argc, argv); }
