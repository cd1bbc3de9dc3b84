#include "cli.hpp"

int main(int argc, char** argv) { return causnvs::run_cli(std::vector<std::string>(argv, argv + argc)); }
