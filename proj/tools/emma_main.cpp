#include <iostream>
int main() { std::cout << "emma\n"; return 0; }
