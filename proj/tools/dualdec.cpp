#include <cstdio>

int main() {
  std::puts("dualdec: placeholder");
  return 0;
}
