#include <malloc.h>

#include "mpdt/cli.hpp"

int main(int argc, char** argv) {
  // Activation buffers are reallocated every step; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
  return mpdt::run_cli(argc, argv);
}
