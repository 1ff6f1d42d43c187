#include "sparse_rag/cli.hpp"

int main(int argc, char** argv) { return sparse_rag::run_cli(argc, argv); }
