#pragma once

namespace gradleak {

// Exit codes: 0 ok, 2 usage error, 3 contract violation, 4 numeric failure.
int run_cli(int argc, const char* const* argv);

} // namespace gradleak
