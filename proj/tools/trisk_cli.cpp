#include "trisk/cli.hpp"

int main(int argc, char** argv) { return trisk::run(argc, argv); }
