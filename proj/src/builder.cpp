#include "minstore/builder.hpp"
#include "minstore/cache.hpp"
#include "minstore/error.hpp"
#include "minstore/nar.hpp"
#include "minstore/rewrite.hpp"
#include "minstore/store.hpp"

#include <atomic>
#include <cerrno>
#include <cstring>
#include <fcntl.h>
#include <fstream>
#include <future>
#include <sstream>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

namespace minstore {

namespace fs = std::filesystem;

static std::atomic<uint64_t> execution_counter{0};

uint64_t builder_executions()
{
    return execution_counter.load();
}

std::set<StorePath> scan_references(const Fso & tree, const std::set<StorePath> & candidates)
{
    std::set<StorePath> found;
    for_each_leaf(tree, [&](const std::string &, const Fso & leaf) {
        const auto & bytes = leaf.is_regular() ? leaf.regular().contents : leaf.symlink_node().target;
        for (auto & c : candidates)
            if (!found.contains(c) && bytes.find(c.hash_part()) != std::string::npos)
                found.insert(c);
    });
    return found;
}

StorePath placeholder_path(const Derivation & drv, const StorePath & drv_path, const std::string & output, std::string_view salt)
{
    auto hash = store_hash32("placeholder:" + drv_path.hash_part() + ":" + output + std::string(salt));
    return StorePath(drv_path.root(), hash, drv.output_path_name(output));
}

std::map<std::string, std::string> build_environment(
    const Derivation & drv, const std::map<std::string, std::string> & output_bindings)
{
    std::map<std::string, std::string> env;
    for (auto & [k, v] : drv.env)
        env[k] = substitute_placeholders(v, output_bindings);
    env["name"] = drv.name;
    env["version"] = drv.version;
    if (!env.contains("PATH"))
        env["PATH"] = "/path-not-set";
    env["HOME"] = "/homeless-shelter";
    for (auto & [o, path] : output_bindings)
        env[o] = path;
    return env;
}

fs::path repeatability_build_root()
{
    std::error_code ec;
    if (fs::is_directory("/dev/shm", ec) && ::access("/dev/shm", W_OK) == 0)
        return "/dev/shm";
    return fs::temp_directory_path();
}

namespace {

class TempDir
{
public:
    explicit TempDir(const fs::path & parent)
    {
        std::string tmpl = (parent / "minstore-build-XXXXXX").string();
        if (!::mkdtemp(tmpl.data()))
            throw Io("cannot create build directory under '" + parent.string() + "': " + std::strerror(errno));
        path_ = tmpl;
    }

    ~TempDir()
    {
        try {
            remove_tree(path_);
        } catch (...) {
        }
    }

    const fs::path & path() const
    {
        return path_;
    }

private:
    fs::path path_;
};

std::string tail_of_file(const fs::path & path, size_t max_bytes = 2000)
{
    std::ifstream in(path, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    auto s = buf.str();
    return s.size() > max_bytes ? s.substr(s.size() - max_bytes) : s;
}

/**
 * Runs the builder of `drv` with outputs bound to `bindings` and collects
 * the canonicalized output trees. The raw outputs are removed afterwards.
 */
std::map<std::string, Fso> run_builder(
    const Store & store,
    const Derivation & drv,
    const StorePath & drv_path,
    const std::map<std::string, std::string> & bindings,
    const fs::path & build_root)
{
    if (store.is_relocated())
        throw BuildFailed("cannot build '" + drv_path.render() + "' in a relocated store: outputs would be written to "
            + store.store_root() + " instead of " + store.physical_root().string());
    for (auto & [o, path] : bindings)
        remove_tree(path);

    TempDir dir(build_root);
    auto env = build_environment(drv, bindings);
    auto builder = substitute_placeholders(drv.builder, bindings);
    std::vector<std::string> args{builder};
    for (auto & a : drv.args)
        args.push_back(substitute_placeholders(a, bindings));

    std::vector<std::string> env_strings;
    for (auto & [k, v] : env)
        env_strings.push_back(k + "=" + v);
    std::vector<char *> argv, envp;
    for (auto & a : args)
        argv.push_back(const_cast<char *>(a.c_str()));
    argv.push_back(nullptr);
    for (auto & e : env_strings)
        envp.push_back(const_cast<char *>(e.c_str()));
    envp.push_back(nullptr);

    auto log = store.log_path(drv_path);
    int log_fd = ::open(log.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (log_fd < 0)
        throw Io("cannot open build log '" + log.string() + "': " + std::strerror(errno));
    int null_fd = ::open("/dev/null", O_RDONLY | O_CLOEXEC);
    auto dir_str = dir.path().string();

    auto cleanup_outputs = [&] {
        for (auto & [o, path] : bindings)
            try {
                remove_tree(path);
            } catch (...) {
            }
    };

    ++execution_counter;
    pid_t pid = ::fork();
    if (pid < 0) {
        ::close(log_fd);
        ::close(null_fd);
        throw BuildFailed("cannot fork: " + std::string(std::strerror(errno)));
    }
    if (pid == 0) {
        if (::chdir(dir_str.c_str()) != 0)
            ::_exit(126);
        ::dup2(null_fd, 0);
        ::dup2(log_fd, 1);
        ::dup2(log_fd, 2);
        ::execve(argv[0], argv.data(), envp.data());
        ::_exit(127);
    }
    ::close(log_fd);
    ::close(null_fd);

    int status = 0;
    while (::waitpid(pid, &status, 0) < 0)
        if (errno != EINTR)
            throw BuildFailed("waitpid failed: " + std::string(std::strerror(errno)));

    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
        cleanup_outputs();
        std::string why = WIFEXITED(status) ? "exited with code " + std::to_string(WEXITSTATUS(status))
                                            : "was killed by signal " + std::to_string(WTERMSIG(status));
        throw BuildFailed("builder for '" + drv_path.render() + "' " + why + "; log tail:\n" + tail_of_file(log));
    }

    std::map<std::string, Fso> trees;
    try {
        for (auto & [o, path] : bindings) {
            struct stat st;
            if (::lstat(path.c_str(), &st) != 0)
                throw MissingOutput("builder for '" + drv_path.render() + "' did not produce output '" + o + "'");
            trees.emplace(o, canonicalize(fs::path(path)));
        }
    } catch (...) {
        cleanup_outputs();
        throw;
    }
    cleanup_outputs();
    return trees;
}

/// Order in which CA outputs can be finalized: an output referring to a
/// sibling's placeholder comes after that sibling.
std::vector<std::string> finalize_order(
    const std::vector<std::string> & outputs,
    const std::map<std::string, Fso> & trees,
    const std::map<std::string, StorePath> & placeholders,
    const StorePath & drv_path)
{
    std::vector<std::string> order;
    std::set<std::string> done;
    while (order.size() < outputs.size()) {
        bool progressed = false;
        for (auto & o : outputs) {
            if (done.contains(o))
                continue;
            std::set<StorePath> siblings;
            for (auto & s : outputs)
                if (s != o && !done.contains(s))
                    siblings.insert(placeholders.at(s));
            if (!scan_references(trees.at(o), siblings).empty())
                continue;
            order.push_back(o);
            done.insert(o);
            progressed = true;
        }
        if (!progressed)
            throw BuildFailed("outputs of '" + drv_path.render() + "' refer to each other cyclically");
    }
    return order;
}

class Realizer
{
public:
    Realizer(Store & store, const BuildSettings & settings)
        : store_(store)
        , settings_(settings)
        , substituters_(open_substituters(settings.substituters))
    {
    }

    BuildResult realize(const StorePath & drv_path)
    {
        if (!store_.is_valid(drv_path))
            throw UnknownPath("derivation '" + drv_path.render() + "' is not valid");
        auto drv = read_derivation(store_, drv_path);
        auto guard = store_.build_guard();
        auto lock = store_.derivation_lock(drv_path);

        if (auto existing = reuse(drv, drv_path))
            return *existing;

        if (settings_.mode == AddressingMode::InputAddressed && !substituters_.empty()) {
            for (auto & [o, rendered] : drv.output_paths) {
                auto path = store_.parse_path(rendered);
                // A corrupted copy aborts the realization instead of
                // silently falling back to a local build.
                if (!store_.is_valid(path))
                    substitute(store_, path, substituters_);
            }
            if (auto existing = reuse(drv, drv_path))
                return *existing;
        }

        return build(drv, drv_path);
    }

    /// Builds the inputs and runs the builder once, without registering.
    std::map<std::string, Fso> build_unregistered(
        const StorePath & drv_path, std::string_view salt, const fs::path & build_root,
        std::map<std::string, StorePath> & placeholders)
    {
        auto drv = read_derivation(store_, drv_path);
        auto guard = store_.build_guard();
        auto inputs = realize_inputs(drv);
        auto resolved = resolve_inputs(drv, inputs);
        std::map<std::string, std::string> bindings;
        for (auto & o : drv.outputs) {
            auto ph = placeholder_path(drv, drv_path, o, salt);
            placeholders.insert_or_assign(o, ph);
            bindings[o] = ph.render();
        }
        return run_builder(store_, resolved, drv_path, bindings, build_root);
    }

private:
    Store & store_;
    const BuildSettings & settings_;
    SubstituterList substituters_;

    OutputResult describe(const StorePath & path)
    {
        return OutputResult{path, store_.read_tree(path), store_.query_info(path).references};
    }

    std::optional<BuildResult> reuse(const Derivation & drv, const StorePath & drv_path)
    {
        BuildResult result;
        for (auto & o : drv.outputs) {
            std::optional<StorePath> path;
            if (settings_.mode == AddressingMode::InputAddressed) {
                auto ia = store_.parse_path(drv.output_paths.at(o));
                if (store_.is_valid(ia))
                    path = ia;
            } else
                path = store_.query_realisation(drv_path, o);
            if (!path)
                return std::nullopt;
            result.emplace(o, describe(*path));
        }
        return result;
    }

    /// Realizes every input derivation; returns input output path (as named
    /// in the derivation) -> realized path.
    std::map<std::string, StorePath> realize_inputs(const Derivation & drv)
    {
        std::vector<std::pair<StorePath, std::set<std::string>>> work(drv.input_drvs.begin(), drv.input_drvs.end());
        std::map<std::string, StorePath> realized;
        auto record = [&](const StorePath & input_drv, const BuildResult & result) {
            auto input = read_derivation(store_, input_drv);
            for (auto & [o, out] : result)
                realized.insert_or_assign(input.output_paths.at(o), out.path);
        };
        size_t batch = std::max(1u, settings_.parallelism);
        for (size_t i = 0; i < work.size(); i += batch) {
            std::vector<std::pair<StorePath, std::future<BuildResult>>> running;
            for (size_t j = i; j < std::min(work.size(), i + batch); ++j) {
                auto input_drv = work[j].first;
                if (batch == 1) {
                    record(input_drv, realize(input_drv));
                    continue;
                }
                running.emplace_back(input_drv, std::async(std::launch::async, [this, input_drv] {
                    Realizer nested(store_, settings_);
                    return nested.realize(input_drv);
                }));
            }
            for (auto & [input_drv, fut] : running)
                record(input_drv, fut.get());
        }
        return realized;
    }

    /// Binds input references to the realized paths (differs from the
    /// derivation's own text only for content-addressed inputs).
    Derivation resolve_inputs(const Derivation & drv, const std::map<std::string, StorePath> & realized)
    {
        Derivation resolved = drv;
        auto bind = [&](std::string s) {
            for (auto & [from, to] : realized) {
                auto target = to.render();
                if (from == target)
                    continue;
                for (size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += target.size())
                    s.replace(pos, from.size(), target);
            }
            return s;
        };
        resolved.builder = bind(resolved.builder);
        for (auto & a : resolved.args)
            a = bind(a);
        for (auto & [k, v] : resolved.env)
            v = bind(v);
        return resolved;
    }

    BuildResult build(const Derivation & drv, const StorePath & drv_path)
    {
        auto realized = realize_inputs(drv);
        auto resolved = resolve_inputs(drv, realized);

        std::set<StorePath> input_roots = drv.input_srcs;
        for (auto & [from, to] : realized)
            input_roots.insert(to);
        auto input_closure = store_.closure(input_roots);

        auto ia_paths = output_paths(drv, store_.store_root());
        bool ca = settings_.mode == AddressingMode::ContentAddressed;

        std::map<std::string, StorePath> targets;
        std::map<std::string, std::string> bindings;
        for (auto & o : drv.outputs) {
            StorePath target = ca ? placeholder_path(drv, drv_path, o, settings_.placeholder_salt)
                : store_.is_valid(ia_paths.at(o)) ? placeholder_path(drv, drv_path, o, ":scratch")
                                                   : ia_paths.at(o);
            targets.emplace(o, target);
            bindings.emplace(o, target.render());
        }

        auto trees = run_builder(store_, resolved, drv_path, bindings, settings_.build_root);

        if (!ca) {
            std::set<StorePath> candidates = input_closure;
            for (auto & [o, p] : ia_paths)
                candidates.insert(p);
            std::vector<NewObject> objects;
            for (auto & o : drv.outputs) {
                auto & path = ia_paths.at(o);
                if (store_.is_valid(path))
                    continue;
                objects.push_back(NewObject{path, trees.at(o), scan_references(trees.at(o), candidates), drv_path, std::nullopt});
            }
            store_.register_objects(std::move(objects));
        } else {
            std::map<std::string, std::string> finalized_hashes;
            std::set<StorePath> finalized;
            for (auto & o : finalize_order(drv.outputs, trees, targets, drv_path)) {
                auto tree = rewrite_hashes(trees.at(o), finalized_hashes).tree;
                auto fin = ca_finalize(tree, {targets.at(o)}, store_.store_root(), drv.output_path_name(o));
                std::set<StorePath> candidates = input_closure;
                candidates.insert(finalized.begin(), finalized.end());
                candidates.insert(fin.path);
                auto refs = scan_references(fin.tree, candidates);
                store_.register_objects(
                    {NewObject{fin.path, fin.tree, std::move(refs), drv_path, ia_paths.at(o).hash_part()}});
                store_.register_realisation(drv_path, o, fin.path);
                finalized_hashes[targets.at(o).hash_part()] = fin.path.hash_part();
                finalized.insert(fin.path);
            }
        }

        auto result = reuse(drv, drv_path);
        if (!result)
            throw MissingOutput("outputs of '" + drv_path.render() + "' were not registered");
        return *result;
    }
};

void list_differences(
    const Fso & a, const Fso & b, const std::string & prefix, const std::string & output,
    std::vector<std::pair<std::string, std::string>> & out)
{
    if (a == b)
        return;
    if (a.is_directory() && b.is_directory()) {
        std::set<std::string> names;
        for (auto & e : a.directory_node().entries())
            names.insert(e.name);
        for (auto & e : b.directory_node().entries())
            names.insert(e.name);
        for (auto & name : names) {
            auto * ca = a.directory_node().find(name);
            auto * cb = b.directory_node().find(name);
            auto path = prefix.empty() ? name : prefix + "/" + name;
            if (!ca || !cb)
                out.emplace_back(output, path);
            else
                list_differences(*ca, *cb, path, output, out);
        }
        return;
    }
    out.emplace_back(output, prefix);
}

} // namespace

BuildResult realize(Store & store, const StorePath & drv_path, const BuildSettings & settings)
{
    return Realizer(store, settings).realize(drv_path);
}

RepeatReport check_repeatability(Store & store, const StorePath & drv_path, const BuildSettings & settings)
{
    Realizer realizer(store, settings);
    auto root = repeatability_build_root();

    std::map<std::string, StorePath> first_ph, second_ph;
    auto first = realizer.build_unregistered(drv_path, ":repeat-1", root, first_ph);
    auto second = realizer.build_unregistered(drv_path, ":repeat-2", root, second_ph);

    RepeatReport report;
    auto zero = zero_hash_part();
    for (auto & [o, tree] : first) {
        auto a = rewrite_hashes(tree, {{first_ph.at(o).hash_part(), zero}}).tree;
        auto b = rewrite_hashes(second.at(o), {{second_ph.at(o).hash_part(), zero}}).tree;
        if (nar_encode(a) == nar_encode(b))
            continue;
        report.identical = false;
        list_differences(a, b, "", o, report.differing);
    }
    return report;
}

} // namespace minstore
