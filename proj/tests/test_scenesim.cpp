#include <doctest.h>

TEST_CASE("placeholder_scenesim") { CHECK(true); }
