#pragma once
///@file
/// Reference rewriting: hash substitution, content-addressed finalization,
/// equivalence-class resolution, grafting and store rebasing.

#include "minstore/fso.hpp"
#include "minstore/hash.hpp"

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace minstore {

class Store;

/// Offsets of every occurrence of `needle` in `haystack`.
std::vector<size_t> find_all(std::string_view haystack, std::string_view needle);

struct RewriteResult
{
    Fso tree;
    size_t replacements = 0;
};

/**
 * Replaces every occurrence of each key by its value in file contents and
 * symlink targets. Keys and values must be 32 characters (LengthMismatch);
 * a key may not also appear as a value (AliasedMapping). Sizes and tree
 * shape are preserved.
 */
RewriteResult rewrite_hashes(const Fso & tree, const std::map<std::string, std::string> & mapping);

struct Finalized
{
    StorePath path;
    Fso tree;
};

/**
 * Computes the content-addressed path of a build output modulo
 * self-references: placeholder hashes are zeroed for hashing, then rewritten
 * to the final hash. The result does not depend on the placeholder values.
 * `placeholders` lists the paths the builder was told to write to.
 */
Finalized ca_finalize(
    const Fso & tree, const std::set<StorePath> & placeholders, std::string_view store_root, std::string_view name);

struct Occurrence
{
    std::string file;
    size_t offset = 0;
};

/**
 * Where each registered reference (and the path itself) occurs in a stored
 * object. Only verbatim hash occurrences are visible: references hidden by
 * compression or encoding cannot be detected.
 */
struct ReferenceAudit
{
    StorePath path;
    std::map<StorePath, std::vector<Occurrence>> occurrences;
    /// Every registered reference other than the path itself occurs.
    bool necessity_holds = true;
    /// Candidate hash parts are pairwise distinct.
    bool injectivity_holds = true;

    size_t count(const StorePath & p) const
    {
        auto it = occurrences.find(p);
        return it == occurrences.end() ? 0 : it->second.size();
    }
};

/// Throws UnknownPath.
ReferenceAudit audit_references(const Store & store, const StorePath & path);

/// Occurrences of `hash_part` across the whole closure of `root`.
size_t count_hash_in_closure(const Store & store, const StorePath & root, std::string_view hash_part);

struct EquivalenceClass
{
    std::string key;
    std::set<StorePath> members;
};

/// Classes (by recorded eq_class key) with members inside closure({root}).
std::vector<EquivalenceClass> equivalence_classes(const Store & store, const StorePath & root);

/**
 * Keeps one member per equivalence class in the closure of `root` (the one
 * with the smallest hash part) and rewrites every object that referenced a
 * rejected member, cascading to referrers. Returns the new root; originals
 * stay valid until collected. Throws ClassUnresolvable when members of a
 * class disagree on their name.
 */
StorePath resolve_equivalence(Store & store, const StorePath & root, const std::vector<EquivalenceClass> & classes);
StorePath resolve_equivalence(Store & store, const StorePath & root);

/**
 * Swaps dependencies in the closure of `root` without rebuilding: every
 * object that (transitively) referenced an old path is copied with its
 * references rewritten. Rendered lengths of each old/new pair must match
 * (GraftLength). Returns the new root.
 */
StorePath graft(Store & store, const StorePath & root, const std::map<StorePath, StorePath> & replacements);

struct RebaseManifest
{
    std::string old_root;
    std::string new_root;
    std::vector<std::string> paths;
};

/**
 * Copies closure({root}) to `destination` + `new_store_root`, replacing the
 * old store root string with the new one everywhere. Hash parts are kept.
 * The roots' rendered lengths must match (RebaseLength).
 */
RebaseManifest rebase(
    const Store & store, const StorePath & root, std::string_view new_store_root, const std::filesystem::path & destination);

} // namespace minstore
