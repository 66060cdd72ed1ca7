#include <cstdio>

int main() {
    std::puts("migu_cli: not wired up yet");
    return 1;
}
