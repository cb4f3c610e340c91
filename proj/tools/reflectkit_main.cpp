#include "reflectkit/cli.hpp"

int main(int argc, char** argv)
{
    return reflectkit::cli::run(argc, argv);
}
