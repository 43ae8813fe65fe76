#include <malloc.h>

#include <string>
#include <vector>

#include "msaw/cli.hpp"

int main(int argc, char** argv) {
  // Keep the training loop's large, short-lived buffers out of mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return msaw::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
