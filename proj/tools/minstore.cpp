#include "minstore/cli.hpp"

#include <iostream>

extern char ** environ;

int main(int argc, char ** argv)
{
    std::vector<std::string> args(argv + 1, argv + argc);
    std::map<std::string, std::string> env;
    for (char ** e = environ; *e; ++e) {
        std::string kv(*e);
        auto eq = kv.find('=');
        if (eq != std::string::npos)
            env.emplace(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return minstore::run(args, env, std::cout, std::cerr);
}
