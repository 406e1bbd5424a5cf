#include "zepo/app.hpp"

int main(int argc, char** argv) { return zepo::run_cli(argc, argv); }
