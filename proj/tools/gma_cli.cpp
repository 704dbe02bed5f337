#include "cli_app.hpp"

int main(int argc, char** argv) { return gma::cli::run(argc, argv); }
