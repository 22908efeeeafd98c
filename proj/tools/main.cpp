#include "vita/cli.hpp"

int main(int argc, char** argv) { return vita::run(argc, argv); }
