#include "hcsc/cli.hpp"

int main(int argc, char** argv) { return hcsc::cli::dispatch(argc, argv); }
