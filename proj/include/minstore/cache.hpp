#pragma once
///@file
/// Binary caches: the narinfo format, the HTTP server, client-side
/// substitution and multi-substituter consensus.
///
/// Routes served (and mirrored by exported directories):
///
///     GET /<hash part>.narinfo    NarInfo text
///     GET /nar/<hash part>.nar    archive bytes

#include "minstore/hash.hpp"
#include "minstore/store.hpp"

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace httplib {
class Server;
}

namespace minstore {

/**
 * Substitution metadata for one path. Text form, LF-terminated lines in
 * this order, optional fields omitted when absent:
 *
 *     StorePath: <path>
 *     NarHash: <32 chars>
 *     NarSize: <decimal>
 *     References: <path> <path> ...
 *     Deriver: <path>
 *     EqClass: <32 chars>
 */
struct NarInfo
{
    std::string store_path;
    std::string nar_hash;
    uint64_t nar_size = 0;
    std::vector<std::string> references;
    std::optional<std::string> deriver;
    std::optional<std::string> eq_class;

    std::string render() const;

    /// Throws BadNarInfo.
    static NarInfo parse(std::string_view text);

    bool operator==(const NarInfo &) const = default;
};

NarInfo make_narinfo(const Store & store, const StorePath & path);

/// A source of store objects. Lookups return nullopt on a miss and throw
/// SubstituterUnreachable when the source cannot be contacted.
class Substituter
{
public:
    virtual ~Substituter() = default;

    virtual const std::string & url() const = 0;

    virtual std::optional<std::string> narinfo(std::string_view hash_part) = 0;

    std::optional<std::string> nar(std::string_view hash_part)
    {
        ++nar_fetches_;
        return fetch_nar(hash_part);
    }

    /// Number of archive downloads attempted from this substituter.
    uint64_t nar_fetches() const
    {
        return nar_fetches_;
    }

protected:
    virtual std::optional<std::string> fetch_nar(std::string_view hash_part) = 0;

private:
    std::atomic<uint64_t> nar_fetches_{0};
};

using SubstituterList = std::vector<std::shared_ptr<Substituter>>;

/// `http://host:port`, `file:///dir` or an absolute directory.
std::shared_ptr<Substituter> open_substituter(const std::string & url);
SubstituterList open_substituters(const std::vector<std::string> & urls);

/// Seconds before an HTTP request to a substituter is abandoned.
constexpr int substituter_timeout_seconds = 5;

/// Serves a store read-only over HTTP on a background thread.
class CacheServer
{
public:
    /// `bind_address` is "host:port"; port 0 picks a free port. Throws BindFailed.
    CacheServer(const Store & store, const std::string & bind_address);
    ~CacheServer();

    CacheServer(const CacheServer &) = delete;
    CacheServer & operator=(const CacheServer &) = delete;

    int port() const
    {
        return port_;
    }

    std::string url() const;

    /// Blocks until stop() is called from another thread.
    void wait();
    void stop();

private:
    const Store & store_;
    std::string host_;
    int port_ = 0;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
};

struct Vote
{
    enum class Kind { Hash, Missing, Unreachable };
    Kind kind = Kind::Missing;
    std::string nar_hash;
};

struct ConsensusVerdict
{
    bool accepted = false;
    std::optional<std::string> agreeing_hash;
    std::map<std::string, Vote> votes;
    std::vector<std::string> dissenters;

    /// Whether `url` voted for the accepted hash.
    bool trusts(const std::string & url) const;
};

/**
 * Collects narHash votes for `path`. Accepted iff exactly one hash value has
 * the most votes and that count reaches `quorum`.
 */
ConsensusVerdict consensus_check(const StorePath & path, const SubstituterList & substituters, size_t quorum);

/**
 * Fetches `path` and its missing references from the first substituter
 * that has them, verifying every archive against its advertised hash.
 * Returns false when no substituter has the path; throws HashMismatch when
 * only corrupted copies were found.
 */
bool substitute(Store & store, const StorePath & path, const SubstituterList & substituters);

/// As `substitute`, but each path is fetched only from substituters that
/// voted for the consensus hash; paths without consensus are not fetched.
bool substitute_with_consensus(
    Store & store, const StorePath & path, const SubstituterList & substituters, size_t quorum);

/// Writes closure({path}) to `dir` in the served layout.
void export_closure(const Store & store, const StorePath & path, const std::filesystem::path & dir);

/// Repair source for Store::verify.
RepairFetcher make_repair_fetcher(const SubstituterList & substituters);

} // namespace minstore
