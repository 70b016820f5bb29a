#include "jrs/cli.hpp"

int main(int argc, char** argv) { return jrs::run_cli(argc, argv); }
