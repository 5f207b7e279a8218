#include "armformer/cli.hpp"

int main(int argc, char** argv) { return armformer::cli::run(argc, argv); }
