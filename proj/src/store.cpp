#include "minstore/store.hpp"
#include "minstore/error.hpp"
#include "minstore/nar.hpp"

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cstring>
#include <fcntl.h>
#include <fstream>
#include <sstream>
#include <sys/file.h>
#include <sys/stat.h>
#include <thread>
#include <unistd.h>

namespace minstore {

namespace fs = std::filesystem;

std::string nar_hash_of(std::string_view nar)
{
    return store_hash32(nar);
}

FileLock::FileLock(const fs::path & path, Mode mode)
{
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0600);
    if (fd_ < 0)
        throw Io("cannot open lock '" + path.string() + "': " + std::strerror(errno));
    while (::flock(fd_, mode == Mode::Shared ? LOCK_SH : LOCK_EX) != 0) {
        if (errno != EINTR) {
            ::close(fd_);
            throw Io("cannot lock '" + path.string() + "': " + std::strerror(errno));
        }
    }
}

std::unique_ptr<FileLock> FileLock::try_acquire(const fs::path & path, Mode mode)
{
    std::unique_ptr<FileLock> lock(new FileLock());
    lock->fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0600);
    if (lock->fd_ < 0)
        throw Io("cannot open lock '" + path.string() + "': " + std::strerror(errno));
    if (::flock(lock->fd_, (mode == Mode::Shared ? LOCK_SH : LOCK_EX) | LOCK_NB) != 0)
        return nullptr;
    return lock;
}

FileLock::~FileLock()
{
    if (fd_ >= 0)
        ::close(fd_);
}

namespace {

std::string stat_stamp(const fs::path & path)
{
    struct stat st;
    if (::stat(path.c_str(), &st) != 0)
        return "missing";
    return std::to_string(st.st_ino) + ":" + std::to_string(st.st_size) + ":" + std::to_string(st.st_mtim.tv_sec)
        + "." + std::to_string(st.st_mtim.tv_nsec) + ":" + std::to_string(st.st_ctim.tv_nsec);
}

std::vector<std::string> split(std::string_view s, char sep)
{
    std::vector<std::string> out;
    size_t start = 0;
    for (;;) {
        auto pos = s.find(sep, start);
        out.emplace_back(s.substr(start, pos - start));
        if (pos == std::string_view::npos)
            return out;
        start = pos + 1;
    }
}

std::string unique_suffix()
{
    static std::atomic<uint64_t> counter{0};
    return std::to_string(::getpid()) + "-" + std::to_string(counter++);
}

uint64_t disk_usage(const fs::path & path)
{
    struct stat st;
    if (::lstat(path.c_str(), &st) != 0)
        return 0;
    uint64_t total = S_ISREG(st.st_mode) ? static_cast<uint64_t>(st.st_size) : 0;
    if (S_ISDIR(st.st_mode)) {
        std::error_code ec;
        for (auto it = fs::directory_iterator(path, ec); !ec && it != fs::directory_iterator(); it.increment(ec))
            total += disk_usage(it->path());
    }
    return total;
}

bool tree_contains(const Fso & tree, std::string_view needle)
{
    bool found = false;
    for_each_leaf(tree, [&](const std::string &, const Fso & leaf) {
        const auto & bytes = leaf.is_regular() ? leaf.regular().contents : leaf.symlink_node().target;
        if (bytes.find(needle) != std::string::npos)
            found = true;
    });
    return found;
}

} // namespace

Store::Store(StoreConfig config)
    : config_(std::move(config))
{
    config_.store_root = normalize_store_root(config_.store_root);
    if (config_.real_root.empty())
        config_.real_root = config_.store_root;
    else if (!config_.real_root.is_absolute())
        throw BadPath("real store root '" + config_.real_root.string() + "' is not absolute");
    else
        config_.real_root = normalize_store_root(config_.real_root.string());
    if (!config_.state_root.is_absolute())
        throw BadPath("state root '" + config_.state_root.string() + "' is not absolute");
    std::error_code ec;
    for (auto & dir : {config_.real_root, config_.state_root, gcroots_dir(), config_.state_root / "log",
                       config_.state_root / "locks"}) {
        fs::create_directories(dir, ec);
        if (ec)
            throw Io("cannot create '" + dir.string() + "': " + ec.message());
    }
}

fs::path Store::db_path() const
{
    return config_.state_root / "db";
}

fs::path Store::db_lock_path() const
{
    return config_.state_root / "db.lock";
}

fs::path Store::gc_lock_path() const
{
    return config_.state_root / "gc.lock";
}

fs::path Store::gcroots_dir() const
{
    return config_.state_root / "gcroots";
}

fs::path Store::real_path(const StorePath & path) const
{
    check_own(path);
    return config_.real_root / path.base_name();
}

fs::path Store::log_path(const StorePath & drv) const
{
    return config_.state_root / "log" / (drv.hash_part() + ".log");
}

std::unique_ptr<FileLock> Store::build_guard() const
{
    return std::make_unique<FileLock>(gc_lock_path(), FileLock::Mode::Shared);
}

std::unique_ptr<FileLock> Store::derivation_lock(const StorePath & drv) const
{
    return std::make_unique<FileLock>(config_.state_root / "locks" / (drv.hash_part() + ".lock"), FileLock::Mode::Exclusive);
}

void Store::check_own(const StorePath & path) const
{
    if (path.root() != config_.store_root)
        throw BadPath("'" + path.render() + "' is not in store '" + config_.store_root + "'");
}

StorePath Store::parse_path(std::string_view rendered) const
{
    auto path = StorePath::parse(rendered);
    check_own(path);
    return path;
}

/* Database format, one record per line, fields separated by tabs:

       minstore-db 1
       P <path> <narHash> <narSize> <deriver|-> <eqClass|-> <space-separated references>
       R <drvPath> <output> <path>
*/

Store::Db Store::parse_db(const std::string & text) const
{
    Db db;
    std::istringstream in(text);
    std::string line;
    size_t lineno = 0;
    auto corrupt = [&](const std::string & why) {
        return Io("corrupt database '" + db_path().string() + "' line " + std::to_string(lineno) + ": " + why);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1) {
            if (line != "minstore-db 1")
                throw corrupt("bad header");
            continue;
        }
        if (line.empty())
            continue;
        auto fields = split(line, '\t');
        try {
            if (fields[0] == "P" && fields.size() == 7) {
                PathInfo info;
                info.nar_hash = fields[2];
                info.nar_size = std::stoull(fields[3]);
                if (fields[4] != "-")
                    info.deriver = StorePath::parse(fields[4]);
                if (fields[5] != "-")
                    info.eq_class = fields[5];
                if (!fields[6].empty())
                    for (auto & ref : split(fields[6], ' '))
                        info.references.insert(StorePath::parse(ref));
                db.paths.insert_or_assign(StorePath::parse(fields[1]), std::move(info));
            } else if (fields[0] == "R" && fields.size() == 4) {
                db.realisations.insert_or_assign(
                    std::make_pair(StorePath::parse(fields[1]), fields[2]), StorePath::parse(fields[3]));
            } else
                throw corrupt("unrecognized record");
        } catch (Error &) {
            throw;
        } catch (std::exception & e) {
            throw corrupt(e.what());
        }
    }
    return db;
}

std::shared_ptr<const Store::Db> Store::load() const
{
    std::lock_guard guard(cache_mutex_);
    for (int attempt = 0; attempt < 3; ++attempt) {
        auto stamp = stat_stamp(db_path());
        if (cache_ && stamp == cache_stamp_)
            return cache_;
        if (stamp == "missing") {
            cache_ = std::make_shared<Db>();
            cache_stamp_ = stamp;
            return cache_;
        }
        std::ifstream in(db_path(), std::ios::binary);
        std::stringstream buf;
        buf << in.rdbuf();
        // The file is only ever replaced by rename, so a stable stamp means
        // the contents belong to it.
        if (stat_stamp(db_path()) != stamp)
            continue;
        cache_ = std::make_shared<Db>(parse_db(buf.str()));
        cache_stamp_ = stamp;
        return cache_;
    }
    throw Io("database keeps changing while being read");
}

void Store::write_db(const Db & db)
{
    std::string out = "minstore-db 1\n";
    for (auto & [path, info] : db.paths) {
        out += "P\t" + path.render() + "\t" + info.nar_hash + "\t" + std::to_string(info.nar_size) + "\t"
            + (info.deriver ? info.deriver->render() : "-") + "\t" + (info.eq_class ? *info.eq_class : "-") + "\t";
        bool first = true;
        for (auto & ref : info.references) {
            if (!first)
                out += ' ';
            out += ref.render();
            first = false;
        }
        out += '\n';
    }
    for (auto & [key, path] : db.realisations)
        out += "R\t" + key.first.render() + "\t" + key.second + "\t" + path.render() + "\n";

    auto tmp = config_.state_root / ("db.tmp-" + unique_suffix());
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        f << out;
        f.flush();
        if (!f)
            throw Io("cannot write '" + tmp.string() + "'");
    }
    std::error_code ec;
    fs::rename(tmp, db_path(), ec);
    if (ec) {
        fs::remove(tmp);
        throw Io("cannot replace database: " + ec.message());
    }
}

bool Store::is_valid(const StorePath & path) const
{
    return load()->paths.contains(path);
}

std::optional<PathInfo> Store::query(const StorePath & path) const
{
    auto db = load();
    auto it = db->paths.find(path);
    if (it == db->paths.end())
        return std::nullopt;
    return it->second;
}

PathInfo Store::query_info(const StorePath & path) const
{
    auto info = query(path);
    if (!info)
        throw UnknownPath("'" + path.render() + "' is not valid");
    return *info;
}

std::optional<StorePath> Store::lookup_hash_part(std::string_view hash_part) const
{
    auto db = load();
    for (auto & [path, info] : db->paths)
        if (path.hash_part() == hash_part)
            return path;
    return std::nullopt;
}

std::map<StorePath, PathInfo> Store::valid_paths() const
{
    return load()->paths;
}

std::set<StorePath> Store::closure_of(const Db & db, const std::set<StorePath> & roots) const
{
    std::set<StorePath> result;
    std::vector<StorePath> todo(roots.begin(), roots.end());
    while (!todo.empty()) {
        auto path = std::move(todo.back());
        todo.pop_back();
        if (result.contains(path))
            continue;
        auto it = db.paths.find(path);
        if (it == db.paths.end())
            throw UnknownPath("'" + path.render() + "' is not valid");
        for (auto & ref : it->second.references)
            if (!result.contains(ref))
                todo.push_back(ref);
        result.insert(std::move(path));
    }
    return result;
}

std::set<StorePath> Store::closure(const std::set<StorePath> & roots) const
{
    return closure_of(*load(), roots);
}

std::vector<StorePath> Store::topo_sorted_in(const Db & db, const std::set<StorePath> & paths) const
{
    // Kahn's algorithm over the induced subgraph; self-references ignored.
    std::map<StorePath, size_t> pending;
    std::map<StorePath, std::vector<StorePath>> referrers;
    for (auto & p : paths) {
        size_t n = 0;
        if (auto it = db.paths.find(p); it != db.paths.end())
            for (auto & ref : it->second.references)
                if (ref != p && paths.contains(ref)) {
                    ++n;
                    referrers[ref].push_back(p);
                }
        pending[p] = n;
    }
    std::set<StorePath> ready;
    for (auto & [p, n] : pending)
        if (n == 0)
            ready.insert(p);
    std::vector<StorePath> order;
    while (!ready.empty()) {
        auto p = *ready.begin();
        ready.erase(ready.begin());
        order.push_back(p);
        for (auto & r : referrers[p])
            if (--pending[r] == 0)
                ready.insert(r);
    }
    if (order.size() != paths.size())
        for (auto & [p, n] : pending)
            if (n > 0)
                order.push_back(p);
    return order;
}

std::vector<StorePath> Store::topo_sorted(const std::set<StorePath> & paths) const
{
    return topo_sorted_in(*load(), paths);
}

Fso Store::read_tree(const StorePath & path) const
{
    if (!is_valid(path))
        throw UnknownPath("'" + path.render() + "' is not valid");
    return canonicalize(real_path(path));
}

void Store::register_objects(std::vector<NewObject> objects)
{
    FileLock lock(db_lock_path(), FileLock::Mode::Exclusive);
    Db db = *load();

    std::set<StorePath> batch;
    for (auto & obj : objects) {
        check_own(obj.path);
        batch.insert(obj.path);
    }
    for (auto & obj : objects)
        for (auto & ref : obj.references)
            if (!db.paths.contains(ref) && !batch.contains(ref))
                throw UnknownPath(
                    "'" + obj.path.render() + "' references '" + ref.render() + "', which is not valid");

    std::vector<fs::path> created;
    try {
        for (auto & obj : objects) {
            if (db.paths.contains(obj.path))
                continue;
            auto nar = nar_encode(obj.tree);
            auto target = real_path(obj.path);
            auto tmp = config_.real_root / (".tmp-" + obj.path.hash_part() + "-" + unique_suffix());
            materialize(obj.tree, tmp);
            // A leftover from an interrupted operation is not valid; replace it.
            remove_tree(target);
            std::error_code ec;
            fs::rename(tmp, target, ec);
            if (ec) {
                remove_tree(tmp);
                throw Io("cannot move '" + tmp.string() + "' into place: " + ec.message());
            }
            created.push_back(target);
            PathInfo info{obj.references, nar_hash_of(nar), nar.size(), obj.deriver, obj.eq_class};
            db.paths.insert_or_assign(obj.path, std::move(info));
        }
        if (!created.empty())
            write_db(db);
    } catch (...) {
        for (auto & p : created) {
            try {
                remove_tree(p);
            } catch (...) {
            }
        }
        throw;
    }
}

StorePath Store::add_source(const Fso & tree, std::string_view name)
{
    auto path = make_store_path("source", nar_encode(tree), config_.store_root, name);
    if (is_valid(path))
        return path;
    std::set<StorePath> refs;
    if (tree_contains(tree, path.hash_part()))
        refs.insert(path);
    register_objects({NewObject{path, tree, std::move(refs), std::nullopt, std::nullopt}});
    return path;
}

StorePath Store::add_text(std::string_view name, const std::string & contents, const std::set<StorePath> & references)
{
    auto path = make_store_path("text", contents, config_.store_root, name);
    if (!is_valid(path))
        register_objects({NewObject{path, Fso::file(contents), references, std::nullopt, std::nullopt}});
    return path;
}

void Store::register_realisation(const StorePath & drv, const std::string & output, const StorePath & path)
{
    FileLock lock(db_lock_path(), FileLock::Mode::Exclusive);
    Db db = *load();
    if (!db.paths.contains(path))
        throw UnknownPath("'" + path.render() + "' is not valid");
    auto key = std::make_pair(drv, output);
    if (auto it = db.realisations.find(key); it != db.realisations.end() && it->second == path)
        return;
    db.realisations.insert_or_assign(key, path);
    write_db(db);
}

std::optional<StorePath> Store::query_realisation(const StorePath & drv, const std::string & output) const
{
    auto db = load();
    auto it = db->realisations.find(std::make_pair(drv, output));
    if (it == db->realisations.end() || !db->paths.contains(it->second))
        return std::nullopt;
    return it->second;
}

fs::path Store::add_gcroot(const std::string & name, const StorePath & target)
{
    if (!valid_entry_name(name))
        throw BadName("invalid gcroot name '" + name + "'");
    FileLock lock(db_lock_path(), FileLock::Mode::Exclusive);
    if (!is_valid(target))
        throw UnknownPath("'" + target.render() + "' is not valid");
    auto link = gcroots_dir() / name;
    std::error_code ec;
    if (fs::is_symlink(fs::symlink_status(link, ec))) {
        auto existing = fs::read_symlink(link, ec);
        if (!ec && existing == fs::path(target.render()))
            return link;
        throw RootNameClash("gcroot '" + name + "' already points to '" + existing.string() + "'");
    }
    if (fs::exists(fs::symlink_status(link, ec)))
        throw RootNameClash("gcroot '" + name + "' exists and is not a symlink");
    fs::create_symlink(target.render(), link, ec);
    if (ec)
        throw Io("cannot create gcroot '" + link.string() + "': " + ec.message());
    return link;
}

void Store::remove_gcroot(const std::string & name)
{
    FileLock lock(db_lock_path(), FileLock::Mode::Exclusive);
    std::error_code ec;
    fs::remove(gcroots_dir() / name, ec);
}

std::vector<GcRoot> Store::gcroots() const
{
    std::vector<GcRoot> roots;
    auto db = load();
    std::error_code ec;
    for (auto it = fs::recursive_directory_iterator(gcroots_dir(), ec); !ec && it != fs::recursive_directory_iterator();
         it.increment(ec)) {
        if (!it->is_symlink())
            continue;
        GcRoot root;
        root.name = fs::relative(it->path(), gcroots_dir()).string();
        // Indirect roots: follow links until something that names a store path.
        fs::path target = it->path();
        for (int hops = 0; hops < 8; ++hops) {
            std::error_code lec;
            auto next = fs::read_symlink(target, lec);
            if (lec)
                break;
            if (next.is_relative())
                next = target.parent_path() / next;
            if (hops == 0)
                root.link_target = next.string();
            try {
                auto path = StorePath::parse(next.lexically_normal().string());
                if (path.root() == config_.store_root || path.root() == config_.real_root.string()) {
                    root.path = StorePath(config_.store_root, path.hash_part(), path.name());
                    break;
                }
            } catch (Error &) {
            }
            target = next;
        }
        root.stale = !root.path || !db->paths.contains(*root.path);
        roots.push_back(std::move(root));
    }
    std::sort(roots.begin(), roots.end(), [](auto & a, auto & b) { return a.name < b.name; });
    return roots;
}

GcReport Store::gc()
{
    auto gc_lock = FileLock::try_acquire(gc_lock_path(), FileLock::Mode::Exclusive);
    if (!gc_lock)
        throw StoreBusy("a build is in progress");
    auto db_lock = FileLock::try_acquire(db_lock_path(), FileLock::Mode::Exclusive);
    if (!db_lock)
        throw StoreBusy("the store is locked by another writer");

    Db db = *load();
    GcReport report;
    std::set<StorePath> live;
    for (auto & root : gcroots()) {
        if (root.stale) {
            report.stale_roots.push_back(root.name);
            continue;
        }
        live.insert(*root.path);
    }
    report.kept = closure_of(db, live);

    std::set<StorePath> dead;
    for (auto & [path, info] : db.paths)
        if (!report.kept.contains(path))
            dead.insert(path);

    // Referrers before referees.
    auto order = topo_sorted_in(db, dead);
    std::reverse(order.begin(), order.end());

    for (auto & path : dead)
        db.paths.erase(path);
    std::erase_if(db.realisations, [&](auto & kv) { return dead.contains(kv.second); });
    write_db(db);

    for (auto & path : order) {
        auto real = real_path(path);
        report.bytes_freed += disk_usage(real);
        remove_tree(real);
        report.deleted.insert(path);
    }

    // Unregistered leftovers (interrupted builds, temporaries).
    std::error_code ec;
    for (auto it = fs::directory_iterator(config_.real_root, ec); !ec && it != fs::directory_iterator();
         it.increment(ec)) {
        auto base = it->path().filename().string();
        std::optional<StorePath> as_path;
        try {
            as_path = StorePath::parse(config_.store_root + "/" + base);
        } catch (Error &) {
        }
        if (as_path && db.paths.contains(*as_path))
            continue;
        report.bytes_freed += disk_usage(it->path());
        remove_tree(it->path());
        if (as_path)
            report.deleted.insert(*as_path);
    }
    return report;
}

VerifyReport Store::verify(bool repair, const RepairFetcher & fetch)
{
    std::unique_ptr<FileLock> lock;
    if (repair)
        lock = std::make_unique<FileLock>(db_lock_path(), FileLock::Mode::Exclusive);
    auto db = load();
    VerifyReport report;
    for (auto & [path, info] : db->paths) {
        for (auto & ref : info.references)
            if (!db->paths.contains(ref))
                report.violations.emplace_back(path, ref);

        bool ok = false;
        try {
            auto nar = nar_encode(canonicalize(real_path(path)));
            ok = nar_hash_of(nar) == info.nar_hash;
        } catch (Error &) {
        }
        if (ok)
            continue;
        report.drifted.push_back(path);

        if (!repair || !fetch)
            continue;
        auto tree = fetch(path, info);
        if (!tree || nar_hash_of(nar_encode(*tree)) != info.nar_hash)
            continue;
        auto target = real_path(path);
        auto tmp = config_.real_root / (".tmp-" + path.hash_part() + "-" + unique_suffix());
        materialize(*tree, tmp);
        remove_tree(target);
        fs::rename(tmp, target);
        report.repaired.push_back(path);
    }
    return report;
}

} // namespace minstore
