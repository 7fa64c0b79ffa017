#pragma once
///@file
/// Derivations, their canonical text form, and the manifest format they are
/// authored in.

#include "minstore/hash.hpp"

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace minstore {

class Store;

/**
 * A build specification. `outputs` holds "out" first, then the remaining
 * output names in ascending order. `output_paths` maps each output to its
 * rendered path, or to "" in the blanked form used for output hashing.
 *
 * The canonical text form is
 *
 *     Derive([("lib","<path>"),("out","<path>")],[("<drv>",["out"])],["<src>"],
 *            "<system>","<builder>",["<arg>"],[("<key>","<value>")])
 *
 * with every list sorted and `name`/`version` carried in the environment.
 */
struct Derivation
{
    std::string name;
    std::string version;
    std::vector<std::string> outputs{"out"};
    std::map<std::string, std::string> output_paths;
    std::map<StorePath, std::set<std::string>> input_drvs;
    std::set<StorePath> input_srcs;
    std::string system;
    std::string builder;
    std::vector<std::string> args;
    std::map<std::string, std::string> env;

    /// "<name>-<version>", or just the name when the version is empty.
    std::string full_name() const;

    /// Store path name of an output: the full name, suffixed "-<output>"
    /// for anything but "out".
    std::string output_path_name(const std::string & output) const;

    std::string serialize() const;

    /// Throws Parse.
    static Derivation parse(std::string_view text);

    bool operator==(const Derivation &) const = default;
};

/// Reorders outputs canonically ("out" first) and checks the invariants.
/// Throws Semantic.
void normalize_outputs(std::vector<std::string> & outputs);

/// Output paths of an input-addressed derivation.
std::map<std::string, StorePath> output_paths(const Derivation & drv, std::string_view store_root);

/// Reads and parses a derivation file from the store.
Derivation read_derivation(const Store & store, const StorePath & drv_path);

struct SourceSpec
{
    std::string key;
    std::string path;
};

struct InputSpec
{
    std::string key;
    std::string drv_path;
    std::set<std::string> outputs;
};

/**
 * A user-authored build manifest:
 *
 *     # comment
 *     name = hello
 *     version = 2.12.2
 *     system = x86_64-linux
 *     builder = /bin/sh
 *     outputs = out lib
 *
 *     [args]
 *     ${src}/build.sh          one argument per line
 *
 *     [sources]
 *     src = ./hello-src        relative to the manifest's directory
 *
 *     [inputs]
 *     dep = /minstore/store/<hash>-dep.drv!out,lib
 *
 *     [env]
 *     GREETING = hello ${dep.lib}
 *
 * `${key}` names an output, a source or an input (its "out" output),
 * `${key.output}` a specific input output. Output references are kept
 * literally and bound at realization time; the rest are bound when the
 * manifest is instantiated.
 */
struct Manifest
{
    std::string name;
    std::string version;
    std::string system;
    std::string builder;
    std::vector<std::string> outputs{"out"};
    std::vector<std::string> args;
    std::map<std::string, std::string> env;
    std::vector<SourceSpec> sources;
    std::vector<InputSpec> inputs;
    std::filesystem::path base_dir = ".";
};

/// Throws Parse (with line and column) or Semantic.
Manifest parse_manifest(std::string_view text);

/// Parses a manifest file; relative sources resolve against its directory.
Manifest load_manifest(const std::filesystem::path & file);

/**
 * Imports the sources, binds input references, computes output paths and
 * writes the derivation into the store. Throws Semantic for a missing input
 * derivation or output.
 */
StorePath instantiate(Store & store, const Manifest & manifest);

/// Replaces every `${name}` for which `bindings` has an entry.
std::string substitute_placeholders(std::string_view text, const std::map<std::string, std::string> & bindings);

} // namespace minstore
