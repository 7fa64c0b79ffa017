#pragma once
///@file
/// Filesystem objects: the in-memory tree that the store hashes, archives
/// and materializes.

#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace minstore {

class Fso;
struct DirEntry;

struct Regular
{
    std::string contents;
    bool executable = false;

    bool operator==(const Regular &) const = default;
};

struct Symlink
{
    std::string target;

    bool operator==(const Symlink &) const = default;
};

/**
 * A directory whose entries are kept in strictly ascending byte-wise name
 * order. Names are validated on insertion, so an invalid directory cannot
 * be constructed through this interface.
 */
class Directory
{
public:
    /// Inserts or replaces `name`. Throws BadName for "", ".", ".." or names
    /// containing '/' or NUL.
    void insert(std::string name, Fso node);

    /// Appends an entry that must sort strictly after the current last one.
    /// Used by the archive decoder, which must reject misordered input.
    void append_sorted(std::string name, Fso node);

    const Fso * find(std::string_view name) const;
    Fso * find(std::string_view name);

    bool erase(std::string_view name);

    const std::vector<DirEntry> & entries() const
    {
        return entries_;
    }

    std::vector<DirEntry> & entries_mutable()
    {
        return entries_;
    }

    bool empty() const
    {
        return entries_.empty();
    }

    bool operator==(const Directory &) const;

private:
    std::vector<DirEntry> entries_;
};

/**
 * A filesystem object. Only regular files, directories and symlinks exist;
 * permissions and timestamps are implied by the kind and the executable
 * flag, so every Fso value is already in canonical form.
 */
class Fso
{
public:
    using Node = std::variant<Regular, Directory, Symlink>;

    Fso()
        : node_(Directory{})
    {
    }

    Fso(Regular r)
        : node_(std::move(r))
    {
    }

    Fso(Directory d)
        : node_(std::move(d))
    {
    }

    Fso(Symlink s)
        : node_(std::move(s))
    {
    }

    static Fso file(std::string contents, bool executable = false)
    {
        return Regular{std::move(contents), executable};
    }

    static Fso symlink(std::string target)
    {
        return Symlink{std::move(target)};
    }

    static Fso directory()
    {
        return Directory{};
    }

    const Node & node() const
    {
        return node_;
    }

    Node & node()
    {
        return node_;
    }

    bool is_regular() const
    {
        return std::holds_alternative<Regular>(node_);
    }

    bool is_directory() const
    {
        return std::holds_alternative<Directory>(node_);
    }

    bool is_symlink() const
    {
        return std::holds_alternative<Symlink>(node_);
    }

    const Regular & regular() const
    {
        return std::get<Regular>(node_);
    }

    const Directory & directory_node() const
    {
        return std::get<Directory>(node_);
    }

    Directory & directory_node()
    {
        return std::get<Directory>(node_);
    }

    const Symlink & symlink_node() const
    {
        return std::get<Symlink>(node_);
    }

    /// Convenience for building fixtures: creates intermediate directories.
    Fso & add(std::string_view relpath, Fso node);

    /// Looks up a '/'-separated relative path; nullptr if absent.
    const Fso * lookup(std::string_view relpath) const;

    bool operator==(const Fso & other) const
    {
        return node_ == other.node_;
    }

private:
    Node node_;
};

struct DirEntry
{
    std::string name;
    Fso node;

    bool operator==(const DirEntry &) const = default;
};

inline bool Directory::operator==(const Directory & other) const
{
    return entries_ == other.entries_;
}

bool valid_entry_name(std::string_view name);

/// Canonical permission bits implied by a node.
unsigned canonical_mode(const Fso & node);

/**
 * Reads an on-disk tree into its canonical form. Execute bits collapse to
 * the executable flag, timestamps and ownership are dropped and hard links
 * are read as independent copies. Throws UnsupportedNode for fifos,
 * sockets, devices or a directory cycle, Io when unreadable.
 */
Fso canonicalize(const std::filesystem::path & path);

/// The in-memory form is canonical by construction; this is the identity.
inline Fso canonicalize(const Fso & tree)
{
    return tree;
}

/**
 * Writes `tree` to `path` (which must not exist) with canonical metadata:
 * mode 0444/0555, mtime 0. Parents must exist.
 */
void materialize(const Fso & tree, const std::filesystem::path & path);

/// Recursively restores owner write permission and removes `path`.
void remove_tree(const std::filesystem::path & path);

/// Visits every regular file and symlink with its '/'-separated relative
/// path ("" for the root itself).
void for_each_leaf(
    const Fso & tree,
    const std::function<void(const std::string & relpath, const Fso & leaf)> & fn);

/// Number of nodes in the tree, root included.
size_t node_count(const Fso & tree);

} // namespace minstore
