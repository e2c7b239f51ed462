#include <cstdio>

int main() {
  std::puts("voxseg: pipeline CLI placeholder");
  return 0;
}
