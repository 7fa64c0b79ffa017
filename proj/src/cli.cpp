#include "minstore/cli.hpp"
#include "minstore/builder.hpp"
#include "minstore/cache.hpp"
#include "minstore/derivation.hpp"
#include "minstore/error.hpp"
#include "minstore/nar.hpp"
#include "minstore/rewrite.hpp"
#include "minstore/store.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <optional>
#include <sstream>

namespace minstore {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path & path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Io("cannot read '" + path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::vector<std::string> split_commas(const std::string & s)
{
    std::vector<std::string> parts;
    std::stringstream in(s);
    for (std::string part; std::getline(in, part, ',');)
        if (!part.empty())
            parts.push_back(part);
    return parts;
}

struct Options
{
    std::string store_root;
    std::string state_root;
    std::string real_root;
    std::vector<std::string> substituters;
    unsigned jobs = 1;

    std::string mode = "ia";
    std::string path;
    std::string path2;
    std::string path3;
    std::string name;
    std::string output;
    std::string bind = "127.0.0.1:0";
    std::string to;
    std::vector<std::string> replacements;
    size_t quorum = 1;
    bool repair = false;
};

class Commands
{
public:
    Commands(Options & opts, const std::map<std::string, std::string> & env, std::ostream & out, std::ostream & err)
        : opts_(opts)
        , env_(env)
        , out_(out)
        , err_(err)
    {
    }

    Store & store()
    {
        if (!store_) {
            StoreConfig config;
            if (!opts_.store_root.empty())
                config.store_root = opts_.store_root;
            else if (auto it = env_.find("MINSTORE_STORE"); it != env_.end() && !it->second.empty())
                config.store_root = it->second;
            if (!opts_.state_root.empty())
                config.state_root = opts_.state_root;
            else if (auto it = env_.find("MINSTORE_STATE"); it != env_.end() && !it->second.empty())
                config.state_root = it->second;
            config.real_root = opts_.real_root;
            store_.emplace(config);
        }
        return *store_;
    }

    std::vector<std::string> substituters()
    {
        if (!opts_.substituters.empty())
            return opts_.substituters;
        if (auto it = env_.find("MINSTORE_SUBSTITUTERS"); it != env_.end())
            return split_commas(it->second);
        return {};
    }

    BuildSettings settings()
    {
        BuildSettings s;
        if (opts_.mode == "ca")
            s.mode = AddressingMode::ContentAddressed;
        s.substituters = substituters();
        s.parallelism = std::max(1u, opts_.jobs);
        return s;
    }

    void add()
    {
        auto source = fs::path(opts_.path);
        auto name = opts_.name.empty() ? source.filename().string() : opts_.name;
        out_ << store().add_source(canonicalize(source), name).render() << "\n";
    }

    void instantiate()
    {
        out_ << minstore::instantiate(store(), load_manifest(opts_.path)).render() << "\n";
    }

    StorePath drv_argument(const std::string & arg)
    {
        if (arg.starts_with(store().store_root() + "/"))
            return store().parse_path(arg);
        return minstore::instantiate(store(), load_manifest(arg));
    }

    void realize()
    {
        auto drv_path = drv_argument(opts_.path);
        auto result = minstore::realize(store(), drv_path, settings());
        auto drv = read_derivation(store(), drv_path);
        for (auto & o : drv.outputs) {
            auto & path = result.at(o).path;
            if (!opts_.name.empty())
                store().add_gcroot(o == "out" ? opts_.name : opts_.name + "-" + o, path);
            out_ << path.render() << "\n";
        }
    }

    void check_repeat()
    {
        auto report = check_repeatability(store(), drv_argument(opts_.path), settings());
        out_ << "identical=" << (report.identical ? "true" : "false") << "\n";
        for (auto & [o, file] : report.differing)
            out_ << "differing=" << o << ":" << file << "\n";
    }

    void gc()
    {
        auto report = store().gc();
        for (auto & p : report.deleted)
            out_ << "deleted=" << p.render() << "\n";
        for (auto & r : report.stale_roots)
            out_ << "stale_root=" << r << "\n";
        out_ << "deleted_count=" << report.deleted.size() << "\n";
        out_ << "kept_count=" << report.kept.size() << "\n";
        out_ << "bytes_freed=" << report.bytes_freed << "\n";
    }

    void gcroot_add()
    {
        store().add_gcroot(opts_.name, store().parse_path(opts_.path));
        out_ << store().parse_path(opts_.path).render() << "\n";
    }

    void gcroot_remove()
    {
        store().remove_gcroot(opts_.name);
    }

    void gcroot_list()
    {
        for (auto & root : store().gcroots())
            out_ << (root.stale ? "stale_root=" : "root=") << root.name << " " << root.link_target << "\n";
    }

    void verify()
    {
        RepairFetcher fetch;
        if (opts_.repair)
            fetch = make_repair_fetcher(open_substituters(substituters()));
        auto report = store().verify(opts_.repair, fetch);
        for (auto & [p, ref] : report.violations)
            out_ << "violation=" << p.render() << " " << ref.render() << "\n";
        for (auto & p : report.drifted)
            out_ << "drifted=" << p.render() << "\n";
        for (auto & p : report.repaired)
            out_ << "repaired=" << p.render() << "\n";
        out_ << "clean=" << (report.clean() ? "true" : "false") << "\n";
    }

    void audit()
    {
        auto audit = audit_references(store(), store().parse_path(opts_.path));
        err_ << "note: only verbatim hash occurrences are detected; encoded or compressed references are not\n";
        for (auto & [ref, occ] : audit.occurrences) {
            out_ << "count=" << ref.render() << " " << occ.size() << "\n";
            for (auto & o : occ)
                out_ << "occurrence=" << ref.render() << " " << (o.file.empty() ? "." : o.file) << " " << o.offset
                     << "\n";
        }
        out_ << "necessity=" << (audit.necessity_holds ? "true" : "false") << "\n";
        out_ << "injectivity=" << (audit.injectivity_holds ? "true" : "false") << "\n";
    }

    void graft()
    {
        std::map<StorePath, StorePath> replacements;
        for (auto & r : opts_.replacements) {
            auto eq = r.find('=');
            if (eq == std::string::npos)
                throw GraftLength("replacement '" + r + "' is not OLD=NEW");
            replacements.insert_or_assign(store().parse_path(r.substr(0, eq)), store().parse_path(r.substr(eq + 1)));
        }
        out_ << minstore::graft(store(), store().parse_path(opts_.path), replacements).render() << "\n";
    }

    void rebase()
    {
        auto manifest = minstore::rebase(store(), store().parse_path(opts_.path), opts_.path2, opts_.path3);
        for (auto & p : manifest.paths)
            out_ << p << "\n";
    }

    void resolve()
    {
        out_ << resolve_equivalence(store(), store().parse_path(opts_.path)).render() << "\n";
    }

    void serve()
    {
        CacheServer server(store(), opts_.bind);
        out_ << "url=" << server.url() << std::endl;
        server.wait();
    }

    void copy()
    {
        auto dir = opts_.to.starts_with("file://") ? opts_.to.substr(7) : opts_.to;
        if (!dir.starts_with("/"))
            throw Io("copy destination '" + opts_.to + "' must be file:// or an absolute directory");
        auto path = store().parse_path(opts_.path);
        export_closure(store(), path, dir);
        for (auto & p : store().closure({path}))
            out_ << p.render() << "\n";
    }

    void verify_consensus()
    {
        auto subs = open_substituters(substituters());
        auto verdict = consensus_check(store().parse_path(opts_.path), subs, opts_.quorum);
        out_ << "accepted=" << (verdict.accepted ? "true" : "false") << "\n";
        if (verdict.agreeing_hash)
            out_ << "agreeing_hash=" << *verdict.agreeing_hash << "\n";
        for (auto & [url, vote] : verdict.votes) {
            out_ << "vote=" << url << " ";
            switch (vote.kind) {
            case Vote::Kind::Hash: out_ << vote.nar_hash; break;
            case Vote::Kind::Missing: out_ << "missing"; break;
            case Vote::Kind::Unreachable: out_ << "unreachable"; break;
            }
            out_ << "\n";
        }
        for (auto & d : verdict.dissenters)
            out_ << "dissenter=" << d << "\n";
    }

    void hash()
    {
        out_ << store_hash32(read_file(opts_.path)) << "\n";
    }

    void nar_pack()
    {
        auto nar = nar_encode(canonicalize(fs::path(opts_.path)));
        if (opts_.output.empty()) {
            out_ << nar;
            return;
        }
        std::ofstream f(opts_.output, std::ios::binary | std::ios::trunc);
        f << nar;
        if (!f)
            throw Io("cannot write '" + opts_.output + "'");
    }

    void nar_unpack()
    {
        materialize(nar_decode(read_file(opts_.path)), opts_.path2);
    }

private:
    Options & opts_;
    const std::map<std::string, std::string> & env_;
    std::ostream & out_;
    std::ostream & err_;
    std::optional<Store> store_;
};

} // namespace

int run(const std::vector<std::string> & args, const std::map<std::string, std::string> & env, std::ostream & out,
    std::ostream & err)
{
    Options opts;
    Commands commands(opts, env, out, err);

    CLI::App app{"minstore: a purely functional software store", "minstore"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);
    app.add_option("--store", opts.store_root, "Store root (default /minstore/store, env MINSTORE_STORE)");
    app.add_option("--state", opts.state_root, "State root (default /minstore/var, env MINSTORE_STATE)");
    app.add_option("--real-store", opts.real_root, "Physical location of a relocated store");
    app.add_option("--substituter", opts.substituters, "Substituter URL; repeatable (env MINSTORE_SUBSTITUTERS)")
        ->allow_extra_args(false);
    app.add_option("-j,--jobs", opts.jobs, "Concurrent input builds");

    std::vector<std::pair<CLI::App *, std::function<void()>>> actions;
    auto command = [&](CLI::App * parent, const std::string & name, const std::string & help, auto fn) {
        auto * sub = parent->add_subcommand(name, help);
        actions.emplace_back(sub, [&commands, fn] { (commands.*fn)(); });
        return sub;
    };
    auto mode_option = [&](CLI::App * sub) {
        sub->add_option("--mode", opts.mode, "Addressing mode")->check(CLI::IsMember({"ia", "ca"}));
        sub->add_option("--substituter", opts.substituters, "Substituter URL; repeatable")->allow_extra_args(false);
        sub->add_option("-j,--jobs", opts.jobs, "Concurrent input builds");
    };

    auto * add = command(&app, "add", "Add a file or directory as a source", &Commands::add);
    add->add_option("path", opts.path)->required();
    add->add_option("--name", opts.name, "Store name (default: the file name)");

    command(&app, "instantiate", "Write the derivation described by a manifest", &Commands::instantiate)
        ->add_option("manifest", opts.path)
        ->required();

    auto * realize = command(&app, "realize", "Build or fetch the outputs of a derivation or manifest", &Commands::realize);
    realize->add_option("drv", opts.path, "Derivation path or manifest file")->required();
    realize->add_option("--root", opts.name, "Register the outputs as gc roots under this name");
    mode_option(realize);

    auto * check = command(&app, "check-repeat", "Build twice and compare", &Commands::check_repeat);
    check->add_option("drv", opts.path, "Derivation path or manifest file")->required();
    mode_option(check);

    command(&app, "gc", "Delete everything unreachable from the roots", &Commands::gc);

    auto * gcroot = app.add_subcommand("gcroot", "Manage gc roots");
    gcroot->require_subcommand(1);
    auto * gcroot_add = command(gcroot, "add", "Root a path", &Commands::gcroot_add);
    gcroot_add->add_option("name", opts.name)->required();
    gcroot_add->add_option("path", opts.path)->required();
    command(gcroot, "remove", "Remove a root", &Commands::gcroot_remove)->add_option("name", opts.name)->required();
    command(gcroot, "list", "List roots", &Commands::gcroot_list);

    command(&app, "verify", "Check the closure invariant and content hashes", &Commands::verify)
        ->add_flag("--repair", opts.repair, "Re-fetch drifted paths from substituters");

    command(&app, "audit", "Show where references occur in a path", &Commands::audit)
        ->add_option("path", opts.path)
        ->required();

    auto * graft = command(&app, "graft", "Swap dependencies without rebuilding", &Commands::graft);
    graft->add_option("root", opts.path)->required();
    graft->add_option("--replace", opts.replacements, "OLD=NEW; repeatable")->required()->allow_extra_args(false);

    auto * rebase = command(&app, "rebase", "Copy a closure to another store root", &Commands::rebase);
    rebase->add_option("root", opts.path)->required();
    rebase->add_option("new-root", opts.path2)->required();
    rebase->add_option("destination", opts.path3)->required();

    command(&app, "resolve", "Keep one member per equivalence class", &Commands::resolve)
        ->add_option("root", opts.path)
        ->required();

    command(&app, "serve", "Serve the store over HTTP", &Commands::serve)
        ->add_option("--bind", opts.bind, "host:port (port 0 picks one)");

    auto * copy = command(&app, "copy", "Export a closure as a cache directory", &Commands::copy);
    copy->add_option("path", opts.path)->required();
    copy->add_option("--to", opts.to, "file:// URL or directory")->required();

    auto * consensus = command(&app, "verify-consensus", "Compare narinfo hashes across substituters",
        &Commands::verify_consensus);
    consensus->add_option("path", opts.path)->required();
    consensus->add_option("--substituter", opts.substituters, "Substituter URL; repeatable")->allow_extra_args(false);
    consensus->add_option("--quorum", opts.quorum)->check(CLI::PositiveNumber);

    command(&app, "hash", "Print the store hash of a file", &Commands::hash)->add_option("file", opts.path)->required();

    auto * nar = app.add_subcommand("nar", "Archive tools");
    nar->require_subcommand(1);
    auto * pack = command(nar, "pack", "Archive a file or directory", &Commands::nar_pack);
    pack->add_option("path", opts.path)->required();
    pack->add_option("-o,--output", opts.output, "Write here instead of stdout");
    auto * unpack = command(nar, "unpack", "Extract an archive", &Commands::nar_unpack);
    unpack->add_option("archive", opts.path)->required();
    unpack->add_option("destination", opts.path2)->required();

    std::vector<std::string> argv_storage{"minstore"};
    argv_storage.insert(argv_storage.end(), args.begin(), args.end());
    std::vector<const char *> argv;
    for (auto & a : argv_storage)
        argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError & e) {
        return app.exit(e, out, err) == 0 ? 0 : 2;
    }

    try {
        for (auto & [sub, action] : actions)
            if (sub->parsed())
                action();
        return 0;
    } catch (const Error & e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception & e) {
        err << "error: EInternal: " << e.what() << "\n";
        return 1;
    }
}

CliOutcome run(const std::vector<std::string> & args, const std::map<std::string, std::string> & env)
{
    std::ostringstream out, err;
    CliOutcome outcome;
    outcome.code = run(args, env, out, err);
    outcome.out = out.str();
    outcome.err = err.str();
    return outcome;
}

} // namespace minstore
