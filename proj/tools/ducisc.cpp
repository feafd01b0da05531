#include "ducisc/cli.hpp"

int main(int argc, char** argv) { return ducisc::cli::run(argc, argv); }
