#include "gradleak/cli.hpp"

int main(int argc, char** argv) { return gradleak::run_cli(argc, argv); }
