#pragma once
///@file
/// The `minstore` command line, callable in-process.

#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace minstore {

/**
 * Runs one command. `args` excludes the program name; `env` supplies
 * MINSTORE_STORE, MINSTORE_STATE and MINSTORE_SUBSTITUTERS when the
 * corresponding flags are absent. Returns 0 on success, 1 on a store error
 * (its code is printed on `err`) and 2 on a usage error.
 */
int run(const std::vector<std::string> & args, const std::map<std::string, std::string> & env, std::ostream & out,
    std::ostream & err);

struct CliOutcome
{
    int code = 0;
    std::string out;
    std::string err;
};

CliOutcome run(const std::vector<std::string> & args, const std::map<std::string, std::string> & env = {});

} // namespace minstore
