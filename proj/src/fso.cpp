#include "minstore/fso.hpp"
#include "minstore/error.hpp"

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fcntl.h>
#include <set>
#include <sys/stat.h>
#include <unistd.h>
#include <utility>

namespace minstore {

namespace fs = std::filesystem;

bool valid_entry_name(std::string_view name)
{
    if (name.empty() || name == "." || name == "..")
        return false;
    return name.find('/') == std::string_view::npos && name.find('\0') == std::string_view::npos;
}

static auto lower_bound_name(std::vector<DirEntry> & entries, std::string_view name)
{
    return std::lower_bound(
        entries.begin(), entries.end(), name, [](const DirEntry & e, std::string_view n) { return e.name < n; });
}

void Directory::insert(std::string name, Fso node)
{
    if (!valid_entry_name(name))
        throw BadName("invalid directory entry name '" + name + "'");
    auto it = lower_bound_name(entries_, name);
    if (it != entries_.end() && it->name == name)
        it->node = std::move(node);
    else
        entries_.insert(it, DirEntry{std::move(name), std::move(node)});
}

void Directory::append_sorted(std::string name, Fso node)
{
    if (!valid_entry_name(name))
        throw BadName("invalid directory entry name '" + name + "'");
    if (!entries_.empty() && !(entries_.back().name < name))
        throw BadName("directory entry '" + name + "' out of order");
    entries_.push_back(DirEntry{std::move(name), std::move(node)});
}

const Fso * Directory::find(std::string_view name) const
{
    return const_cast<Directory *>(this)->find(name);
}

Fso * Directory::find(std::string_view name)
{
    auto it = lower_bound_name(entries_, name);
    if (it != entries_.end() && it->name == name)
        return &it->node;
    return nullptr;
}

bool Directory::erase(std::string_view name)
{
    auto it = lower_bound_name(entries_, name);
    if (it == entries_.end() || it->name != name)
        return false;
    entries_.erase(it);
    return true;
}

Fso & Fso::add(std::string_view relpath, Fso node)
{
    auto slash = relpath.find('/');
    auto head = std::string(relpath.substr(0, slash));
    auto & dir = directory_node();
    if (slash == std::string_view::npos) {
        dir.insert(head, std::move(node));
        return *dir.find(head);
    }
    auto * child = dir.find(head);
    if (!child) {
        dir.insert(head, Fso::directory());
        child = dir.find(head);
    }
    return child->add(relpath.substr(slash + 1), std::move(node));
}

const Fso * Fso::lookup(std::string_view relpath) const
{
    if (relpath.empty())
        return this;
    if (!is_directory())
        return nullptr;
    auto slash = relpath.find('/');
    auto * child = directory_node().find(relpath.substr(0, slash));
    if (!child || slash == std::string_view::npos)
        return child;
    return child->lookup(relpath.substr(slash + 1));
}

unsigned canonical_mode(const Fso & node)
{
    if (node.is_regular())
        return node.regular().executable ? 0555 : 0444;
    if (node.is_directory())
        return 0555;
    return 0777;
}

namespace {

[[noreturn]] void throw_io(const std::string & what, const fs::path & path)
{
    throw Io(what + " '" + path.string() + "': " + std::strerror(errno));
}

std::string read_file(const fs::path & path)
{
    int fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC | O_NOFOLLOW);
    if (fd < 0)
        throw_io("cannot open", path);
    std::string contents;
    char buf[1 << 16];
    for (;;) {
        auto n = ::read(fd, buf, sizeof buf);
        if (n < 0) {
            if (errno == EINTR)
                continue;
            ::close(fd);
            throw_io("cannot read", path);
        }
        if (n == 0)
            break;
        contents.append(buf, static_cast<size_t>(n));
    }
    ::close(fd);
    return contents;
}

struct Reader
{
    // (dev, ino) of directories on the current descent path
    std::set<std::pair<dev_t, ino_t>> ancestors;

    Fso read(const fs::path & path)
    {
        struct stat st;
        if (::lstat(path.c_str(), &st) != 0)
            throw_io("cannot stat", path);

        if (S_ISREG(st.st_mode))
            return Fso::file(read_file(path), (st.st_mode & 0111) != 0);

        if (S_ISLNK(st.st_mode)) {
            std::string target(static_cast<size_t>(st.st_size) + 1, '\0');
            for (;;) {
                auto n = ::readlink(path.c_str(), target.data(), target.size());
                if (n < 0)
                    throw_io("cannot read link", path);
                if (static_cast<size_t>(n) < target.size()) {
                    target.resize(static_cast<size_t>(n));
                    break;
                }
                target.resize(target.size() * 2);
            }
            return Fso::symlink(std::move(target));
        }

        if (S_ISDIR(st.st_mode)) {
            auto key = std::make_pair(st.st_dev, st.st_ino);
            if (!ancestors.insert(key).second)
                throw UnsupportedNode("directory cycle at '" + path.string() + "'");
            Directory dir;
            std::error_code ec;
            for (auto it = fs::directory_iterator(path, ec); !ec && it != fs::directory_iterator(); it.increment(ec))
                dir.insert(it->path().filename().string(), read(it->path()));
            if (ec)
                throw Io("cannot list '" + path.string() + "': " + ec.message());
            ancestors.erase(key);
            return dir;
        }

        const char * kind = S_ISFIFO(st.st_mode) ? "fifo"
            : S_ISSOCK(st.st_mode)                ? "socket"
            : S_ISCHR(st.st_mode)                 ? "character device"
            : S_ISBLK(st.st_mode)                 ? "block device"
                                                  : "unknown file type";
        throw UnsupportedNode(std::string("'") + path.string() + "' is a " + kind);
    }
};

void set_epoch_mtime(const fs::path & path)
{
    struct timespec times[2] = {{0, 0}, {0, 0}};
    if (::utimensat(AT_FDCWD, path.c_str(), times, AT_SYMLINK_NOFOLLOW) != 0)
        throw_io("cannot set timestamps of", path);
}

void write_file(const fs::path & path, const Regular & file)
{
    int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_EXCL | O_CLOEXEC, 0600);
    if (fd < 0)
        throw_io("cannot create", path);
    std::string_view rest = file.contents;
    while (!rest.empty()) {
        auto n = ::write(fd, rest.data(), rest.size());
        if (n < 0) {
            if (errno == EINTR)
                continue;
            ::close(fd);
            throw_io("cannot write", path);
        }
        rest.remove_prefix(static_cast<size_t>(n));
    }
    if (::close(fd) != 0)
        throw_io("cannot close", path);
}

void write_node(const Fso & tree, const fs::path & path)
{
    std::visit(
        [&](const auto & node) {
            using T = std::decay_t<decltype(node)>;
            if constexpr (std::is_same_v<T, Regular>) {
                write_file(path, node);
            } else if constexpr (std::is_same_v<T, Symlink>) {
                if (::symlink(node.target.c_str(), path.c_str()) != 0)
                    throw_io("cannot create symlink", path);
            } else {
                if (::mkdir(path.c_str(), 0700) != 0)
                    throw_io("cannot create directory", path);
                for (auto & entry : node.entries())
                    write_node(entry.node, path / entry.name);
            }
        },
        tree.node());
    if (!tree.is_symlink() && ::chmod(path.c_str(), canonical_mode(tree)) != 0)
        throw_io("cannot chmod", path);
    set_epoch_mtime(path);
}

} // namespace

Fso canonicalize(const fs::path & path)
{
    return Reader{}.read(path);
}

void materialize(const Fso & tree, const fs::path & path)
{
    write_node(tree, path);
}

void remove_tree(const fs::path & path)
{
    struct stat st;
    if (::lstat(path.c_str(), &st) != 0)
        return;
    if (S_ISDIR(st.st_mode)) {
        ::chmod(path.c_str(), 0700);
        std::error_code ec;
        for (auto it = fs::directory_iterator(path, ec); !ec && it != fs::directory_iterator(); it.increment(ec))
            remove_tree(it->path());
    }
    std::error_code ec;
    fs::remove(path, ec);
    if (ec)
        throw Io("cannot remove '" + path.string() + "': " + ec.message());
}

static void visit_leaves(
    const Fso & tree,
    const std::string & prefix,
    const std::function<void(const std::string &, const Fso &)> & fn)
{
    if (tree.is_directory()) {
        for (auto & e : tree.directory_node().entries())
            visit_leaves(e.node, prefix.empty() ? e.name : prefix + "/" + e.name, fn);
    } else
        fn(prefix, tree);
}

void for_each_leaf(const Fso & tree, const std::function<void(const std::string &, const Fso &)> & fn)
{
    visit_leaves(tree, "", fn);
}

size_t node_count(const Fso & tree)
{
    size_t n = 1;
    if (tree.is_directory())
        for (auto & e : tree.directory_node().entries())
            n += node_count(e.node);
    return n;
}

} // namespace minstore
