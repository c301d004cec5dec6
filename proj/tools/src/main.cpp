#include "resdreamer_cli/cli.h"

#include <iostream>

int main(int argc, char** argv)
{
	return resdreamer::cli::run(argc, argv, std::cout, std::cerr);
}
