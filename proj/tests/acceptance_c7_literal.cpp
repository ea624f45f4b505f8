#include <cstdio>
int main() {
  std::puts("literal amplitude-residual criterion not implemented yet");
  return 1;
}
