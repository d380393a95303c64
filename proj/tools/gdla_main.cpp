#include "gdla/trainer.hpp"

int main(int argc, char** argv) { return gdla::cli(argc, argv); }
