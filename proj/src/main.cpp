#include <cstdio>
int main() {
  std::puts("wavetrace: command-line interface not implemented yet");
  return 2;
}
