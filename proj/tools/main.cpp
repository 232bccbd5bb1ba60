#include <iostream>

#include <malloc.h>

#include "kt/cli.hpp"

int main(int argc, char** argv) {
    // Keep freed tensor buffers in the heap instead of returning them to the
    // kernel after every step.
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return kt::cli::run(argc, argv, std::cout, std::cerr);
}
