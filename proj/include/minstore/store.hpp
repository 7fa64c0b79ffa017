#pragma once
///@file
/// The on-disk store and its validity/references database.

#include "minstore/fso.hpp"
#include "minstore/hash.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace minstore {

struct StoreConfig
{
    std::string store_root = "/minstore/store";
    std::filesystem::path state_root = "/minstore/var";
    /// Where objects physically live when that differs from `store_root`
    /// (a relocated store). Paths keep naming `store_root`; such a store can
    /// substitute and rewrite but not run builders. Empty means `store_root`.
    std::filesystem::path real_root;
};

struct PathInfo
{
    std::set<StorePath> references;
    std::string nar_hash;
    uint64_t nar_size = 0;
    std::optional<StorePath> deriver;
    std::optional<std::string> eq_class;

    bool operator==(const PathInfo &) const = default;
};

/// An object to be added to the store by `Store::register_objects`.
struct NewObject
{
    StorePath path;
    Fso tree;
    std::set<StorePath> references;
    std::optional<StorePath> deriver;
    std::optional<std::string> eq_class;
};

struct GcRoot
{
    std::string name;
    std::string link_target;
    std::optional<StorePath> path;
    bool stale = false;
};

struct GcReport
{
    std::set<StorePath> deleted;
    std::set<StorePath> kept;
    uint64_t bytes_freed = 0;
    std::vector<std::string> stale_roots;
};

struct VerifyReport
{
    /// (valid path, missing reference)
    std::vector<std::pair<StorePath, StorePath>> violations;
    std::vector<StorePath> drifted;
    std::vector<StorePath> repaired;

    bool clean() const
    {
        return violations.empty() && drifted.empty();
    }
};

/// Supplies a replacement tree for a drifted path, or nullopt.
using RepairFetcher = std::function<std::optional<Fso>(const StorePath &, const PathInfo &)>;

/// Hash recorded for an object: store_hash32 of its archive bytes.
std::string nar_hash_of(std::string_view nar);

/**
 * RAII advisory lock on a file (flock). Distinct instances conflict even
 * within one process, so it also serializes threads.
 */
class FileLock
{
public:
    enum class Mode { Shared, Exclusive };

    /// Blocks until acquired.
    FileLock(const std::filesystem::path & path, Mode mode);

    /// Returns nullptr instead of blocking.
    static std::unique_ptr<FileLock> try_acquire(const std::filesystem::path & path, Mode mode);

    FileLock(const FileLock &) = delete;
    FileLock & operator=(const FileLock &) = delete;
    ~FileLock();

private:
    FileLock() = default;
    int fd_ = -1;
};

/**
 * A store rooted at `config.store_root` with metadata under
 * `config.state_root`:
 *
 *     <state>/db          one record per valid path
 *     <state>/gcroots/    symlinks to rooted paths
 *     <state>/log/        build logs
 *
 * Every valid path's references are valid (the closure invariant). Mutations
 * serialize on <state>/db.lock; builds hold <state>/gc.lock shared so that a
 * collection cannot run concurrently with them.
 */
class Store
{
public:
    explicit Store(StoreConfig config);

    const std::string & store_root() const
    {
        return config_.store_root;
    }

    const std::filesystem::path & state_root() const
    {
        return config_.state_root;
    }

    const std::filesystem::path & physical_root() const
    {
        return config_.real_root;
    }

    bool is_relocated() const
    {
        return config_.real_root != config_.store_root;
    }

    /// On-disk location of a path in this store.
    std::filesystem::path real_path(const StorePath & path) const;

    StorePath parse_path(std::string_view rendered) const;

    /// Adds a source tree. The result depends only on (tree, name).
    StorePath add_source(const Fso & tree, std::string_view name);

    /// Adds a single-file text object (derivations).
    StorePath add_text(std::string_view name, const std::string & contents, const std::set<StorePath> & references);

    /**
     * Atomically materializes and registers a batch. Objects already valid
     * are skipped. Every reference must be valid or be a member of the batch;
     * otherwise UnknownPath is thrown and nothing is registered.
     */
    void register_objects(std::vector<NewObject> objects);

    bool is_valid(const StorePath & path) const;
    std::optional<PathInfo> query(const StorePath & path) const;

    /// Throws UnknownPath.
    PathInfo query_info(const StorePath & path) const;

    std::optional<StorePath> lookup_hash_part(std::string_view hash_part) const;
    std::map<StorePath, PathInfo> valid_paths() const;

    /// Least superset of `roots` closed under references. Throws UnknownPath.
    std::set<StorePath> closure(const std::set<StorePath> & roots) const;

    /// Orders `paths` so that references come before their referrers.
    std::vector<StorePath> topo_sorted(const std::set<StorePath> & paths) const;

    /// Reads a valid path back from disk.
    Fso read_tree(const StorePath & path) const;

    /// CA realisations: (derivation, output name) -> content-addressed path.
    void register_realisation(const StorePath & drv, const std::string & output, const StorePath & path);
    std::optional<StorePath> query_realisation(const StorePath & drv, const std::string & output) const;

    std::filesystem::path add_gcroot(const std::string & name, const StorePath & target);
    void remove_gcroot(const std::string & name);
    std::vector<GcRoot> gcroots() const;

    /// Throws StoreBusy if a build or another writer holds the store.
    GcReport gc();

    VerifyReport verify(bool repair = false, const RepairFetcher & fetch = {});

    std::filesystem::path log_path(const StorePath & drv) const;

    /// Held for the duration of a build; blocks gc.
    std::unique_ptr<FileLock> build_guard() const;

    /// Per-derivation lock so that concurrent realizations of one drv build once.
    std::unique_ptr<FileLock> derivation_lock(const StorePath & drv) const;

private:
    struct Db
    {
        std::map<StorePath, PathInfo> paths;
        std::map<std::pair<StorePath, std::string>, StorePath> realisations;
    };

    StoreConfig config_;

    mutable std::mutex cache_mutex_;
    mutable std::shared_ptr<const Db> cache_;
    mutable std::string cache_stamp_;

    std::filesystem::path db_path() const;
    std::filesystem::path db_lock_path() const;
    std::filesystem::path gc_lock_path() const;
    std::filesystem::path gcroots_dir() const;

    std::shared_ptr<const Db> load() const;
    Db parse_db(const std::string & text) const;
    void write_db(const Db & db);

    void check_own(const StorePath & path) const;
    std::set<StorePath> closure_of(const Db & db, const std::set<StorePath> & roots) const;
    std::vector<StorePath> topo_sorted_in(const Db & db, const std::set<StorePath> & paths) const;
};

} // namespace minstore
