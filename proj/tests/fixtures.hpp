#pragma once
// Shared test scaffolding: throwaway stores and toy shell-script packages.

#include "minstore/builder.hpp"
#include "minstore/derivation.hpp"
#include "minstore/error.hpp"
#include "minstore/fso.hpp"
#include "minstore/store.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

namespace fixtures {

namespace fs = std::filesystem;

inline fs::path make_temp_dir(const fs::path & parent = fs::temp_directory_path())
{
    std::string tmpl = (parent / "minstore-test-XXXXXX").string();
    if (!::mkdtemp(tmpl.data()))
        throw std::runtime_error("mkdtemp failed");
    return tmpl;
}

struct TempDir
{
    fs::path path = make_temp_dir();

    TempDir() = default;
    TempDir(const TempDir &) = delete;

    ~TempDir()
    {
        try {
            minstore::remove_tree(path);
        } catch (...) {
        }
    }
};

/// A store under a fresh temp dir: <dir>/store and <dir>/var.
struct TempStore
{
    TempDir dir;
    minstore::Store store{minstore::StoreConfig{(dir.path / "store").string(), dir.path / "var"}};

    const std::string & root() const
    {
        return store.store_root();
    }
};

inline void write_file(const fs::path & path, const std::string & contents)
{
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << contents;
}

inline std::string read_file(const fs::path & path)
{
    std::ifstream in(path, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

/// A package whose builder is /bin/sh running `script` (a source named
/// "<name>-builder.sh"). Inputs are bound under their keys.
inline minstore::Manifest shell_package(
    const std::string & name, const std::string & version, const std::string & script,
    const std::vector<std::pair<std::string, minstore::StorePath>> & inputs = {},
    std::vector<std::string> outputs = {"out"})
{
    static int counter = 0;
    auto dir = fs::temp_directory_path() / ("minstore-scripts-" + std::to_string(::getpid()));
    auto file = dir / std::to_string(counter++) / (name + "-builder.sh");
    write_file(file, script);

    minstore::Manifest m;
    m.name = name;
    m.version = version;
    m.system = "x86_64-linux";
    m.builder = "/bin/sh";
    m.outputs = std::move(outputs);
    m.args = {"${script}"};
    m.sources = {{"script", file.string()}};
    m.env["PATH"] = "/bin:/usr/bin";
    for (auto & [key, drv] : inputs)
        m.inputs.push_back({key, drv.render(), {"out"}});
    return m;
}

inline minstore::StorePath instantiate_shell(minstore::Store & store, const std::string & name,
    const std::string & version, const std::string & script,
    const std::vector<std::pair<std::string, minstore::StorePath>> & inputs = {},
    std::vector<std::string> outputs = {"out"})
{
    return minstore::instantiate(store, shell_package(name, version, script, inputs, std::move(outputs)));
}

inline minstore::StorePath realize_out(minstore::Store & store, const minstore::StorePath & drv,
    const minstore::BuildSettings & settings = {})
{
    return minstore::realize(store, drv, settings).at("out").path;
}

} // namespace fixtures
