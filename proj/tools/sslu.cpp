#include "sslu/commands.hpp"

int main(int argc, char** argv) { return sslu::cli::run(argc, argv); }
