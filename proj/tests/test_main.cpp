#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "bgnn/runtime.hpp"

int main(int argc, char** argv) {
    bgnn::runtime::configure(1);
    doctest::Context ctx(argc, argv);
    return ctx.run();
}
