#pragma once
///@file
/// Realization of derivations: reuse, substitution or a scrubbed local build.

#include "minstore/derivation.hpp"
#include "minstore/fso.hpp"
#include "minstore/hash.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace minstore {

class Store;

enum class AddressingMode { InputAddressed, ContentAddressed };

struct BuildSettings
{
    AddressingMode mode = AddressingMode::InputAddressed;
    std::vector<std::string> substituters;
    unsigned parallelism = 1;
    /// Where private build directories are created.
    std::filesystem::path build_root = std::filesystem::temp_directory_path();
    /// Mixed into content-addressed placeholders; final paths must not
    /// depend on it.
    std::string placeholder_salt;
};

struct OutputResult
{
    StorePath path;
    Fso tree;
    std::set<StorePath> references;
};

using BuildResult = std::map<std::string, OutputResult>;

/**
 * Produces every output of `drv_path`: reused when valid, else substituted,
 * else built after realizing the inputs. Throws BuildFailed (nothing is
 * registered) or MissingOutput.
 */
BuildResult realize(Store & store, const StorePath & drv_path, const BuildSettings & settings = {});

/// Candidates whose hash part occurs in any file content or symlink target.
std::set<StorePath> scan_references(const Fso & tree, const std::set<StorePath> & candidates);

/// Non-existent path a content-addressed build writes an output to.
StorePath placeholder_path(const Derivation & drv, const StorePath & drv_path, const std::string & output,
    std::string_view salt = "");

/**
 * The complete builder environment: the derivation's variables with output
 * references bound, PATH=/path-not-set unless set, HOME=/homeless-shelter
 * and one variable per output.
 */
std::map<std::string, std::string> build_environment(
    const Derivation & drv, const std::map<std::string, std::string> & output_bindings);

struct RepeatReport
{
    bool identical = true;
    /// (output name, file path within the output); "" denotes the output root.
    std::vector<std::pair<std::string, std::string>> differing;
};

/**
 * Builds `drv_path` twice with different placeholders, normalizes
 * self-references and compares the archives. Nothing is registered.
 */
RepeatReport check_repeatability(Store & store, const StorePath & drv_path, const BuildSettings & settings = {});

/// Build root for repeatability checks: tmpfs when available, where
/// directory listing order follows creation order.
std::filesystem::path repeatability_build_root();

/// Number of builder processes started by this process.
uint64_t builder_executions();

} // namespace minstore
