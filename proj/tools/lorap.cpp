#include <lorap/cli.hpp>

int main(int argc, char** argv) { return lorap::cli::cli_dispatch(argc, argv); }
