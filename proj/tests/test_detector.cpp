#include <doctest.h>

TEST_CASE("placeholder_detector") { CHECK(true); }
