#include "commands.hpp"
int main(int argc, char** argv) { return localrd::cli::run(argc, argv); }
