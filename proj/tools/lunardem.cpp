#include "lunardem/cli.hpp"

int main(int argc, char** argv) { return lunardem::cli::run(argc, argv); }
