#pragma once

// Entry point shared by the clowdr binary and the CLI tests.
//
// Exit statuses: 0 success, 2 usage, 3 schema/validation, 4 dispatch,
// 5 io. `sentinel` exits with the supervised task's exit code.

namespace clowdr {

int run_cli(int argc, char** argv);

}  // namespace clowdr
