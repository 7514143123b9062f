// Command-line entry point. Subcommands are wired up as the corresponding
// modules land; see README for usage.
#include <cstdio>

int main() {
  std::puts("semitts: no subcommands wired yet");
  return 2;
}
