#include <doctest.h>

TEST_CASE("placeholder_attack") { CHECK(true); }
