// Acceptance checks: prints one PASS/FAIL line per criterion and exits
// non-zero if any fails.

#include "fixtures.hpp"
#include "random_tree.hpp"

#include "minstore/cache.hpp"
#include "minstore/nar.hpp"
#include "minstore/rewrite.hpp"

#include <fcntl.h>
#include <functional>
#include <iostream>
#include <random>
#include <sys/stat.h>
#include <unistd.h>

using namespace minstore;
namespace fs = std::filesystem;
using fixtures::TempDir;

namespace {

struct Outcome
{
    bool pass = true;
    std::string detail;
};

/// Collects failed expectations instead of aborting on the first.
class Checker
{
public:
    bool operator()(bool ok, const std::string & what)
    {
        if (!ok && failures_.size() < 5)
            failures_.push_back(what);
        failed_ |= !ok;
        return ok;
    }

    Outcome outcome(std::string summary) const
    {
        if (!failed_)
            return {true, std::move(summary)};
        std::string s;
        for (auto & f : failures_)
            s += (s.empty() ? "" : "; ") + f;
        return {false, s};
    }

private:
    bool failed_ = false;
    std::vector<std::string> failures_;
};

/// Stores that share one root path, created one after another as if on
/// different machines.
class Site
{
public:
    std::string root() const
    {
        return (base_.path / "store").string();
    }

    std::unique_ptr<Store> fresh(const std::string & machine)
    {
        remove_tree(base_.path / "store");
        return std::make_unique<Store>(StoreConfig{root(), base_.path / ("var-" + machine)});
    }

    /// A store with the same root whose objects live elsewhere.
    std::unique_ptr<Store> relocated(const std::string & machine)
    {
        return std::make_unique<Store>(
            StoreConfig{root(), base_.path / ("var-" + machine), base_.path / ("real-" + machine)});
    }

    const fs::path & base() const
    {
        return base_.path;
    }

private:
    TempDir base_;
};

void materialize_shuffled(const Fso & tree, const fs::path & path, std::mt19937_64 & rng)
{
    if (tree.is_regular()) {
        fixtures::write_file(path, tree.regular().contents);
        fs::permissions(path, tree.regular().executable ? fs::perms(0750) : fs::perms(0640));
    } else if (tree.is_symlink())
        fs::create_symlink(tree.symlink_node().target, path);
    else {
        fs::create_directory(path);
        auto entries = tree.directory_node().entries();
        std::shuffle(entries.begin(), entries.end(), rng);
        for (auto & e : entries)
            materialize_shuffled(e.node, path / e.name, rng);
    }
}

std::set<std::string> observed_hashes;

void observe(const StorePath & p)
{
    observed_hashes.insert(p.hash_part());
}

Outcome nar_determinism()
{
    Checker check;
    fixtures::TreeGenerator gen(2024);
    std::map<std::string, Fso> by_encoding;
    TempDir dir;
    int n = 0;
    for (; n < 500; ++n) {
        auto tree = gen.tree(4, 50);
        auto nar = nar_encode(tree);
        check(nar_encode(nar_decode(nar)) == nar, "encode/decode/encode unstable");
        auto [it, fresh] = by_encoding.emplace(nar, tree);
        check(fresh || it->second == tree, "two distinct trees share an encoding");

        auto a = dir.path / ("a" + std::to_string(n)), b = dir.path / ("b" + std::to_string(n));
        materialize_shuffled(tree, a, gen.rng());
        materialize_shuffled(tree, b, gen.rng());
        check(nar_encode(canonicalize(a)) == nar && nar_encode(canonicalize(b)) == nar,
            "encoding depends on on-disk creation order");
        remove_tree(a);
        remove_tree(b);
    }
    return check.outcome(std::to_string(n) + " random trees, " + std::to_string(by_encoding.size()) + " distinct encodings");
}

Outcome hash_geometry()
{
    Checker check;
    std::mt19937_64 rng(5);
    for (int i = 0; i < 10000; ++i)
        observed_hashes.insert(store_hash32(std::to_string(rng())));
    for (auto & h : observed_hashes)
        check(h.size() == 32 && valid_hash_part(h), "bad hash part '" + h + "'");
    auto p = StorePath::parse("/nix/store/lz9gfg6iybsh0hiignpk55w99a3bj4vb-hello-2.12.1");
    check(p.root() == "/nix/store", "root");
    check(p.hash_part() == "lz9gfg6iybsh0hiignpk55w99a3bj4vb", "hash part");
    check(p.name() == "hello-2.12.1", "name");
    check(p.render() == "/nix/store/lz9gfg6iybsh0hiignpk55w99a3bj4vb-hello-2.12.1", "render");
    return check.outcome(std::to_string(observed_hashes.size()) + " hash parts checked, example path parsed");
}

Manifest sensitivity_package(const std::string & script, const std::string & env_value, const std::string & arg)
{
    auto m = fixtures::shell_package("sense", "1", script, {}, {"out", "lib"});
    m.args.push_back(arg);
    m.env["VALUE"] = env_value;
    return m;
}

Outcome input_sensitivity()
{
    Checker check;
    Site site;
    const std::string script = "mkdir -p $out $lib\necho \"$VALUE $1\" > $out/v\necho lib > $lib/l\n";
    auto base = sensitivity_package(script, "value", "arg");

    std::vector<std::pair<StorePath, std::map<std::string, StorePath>>> runs;
    for (auto machine : {"one", "two"}) {
        auto store = site.fresh(machine);
        auto drv = instantiate(*store, base);
        std::map<std::string, StorePath> outs;
        for (auto & [o, r] : realize(*store, drv)) {
            outs.emplace(o, r.path);
            observe(r.path);
        }
        runs.emplace_back(drv, outs);
    }
    check(runs[0].first == runs[1].first, "drv paths differ across stores");
    check(runs[0].second == runs[1].second, "output paths differ across stores");

    auto store = site.fresh("three");
    std::vector<std::pair<std::string, Manifest>> flips{
        {"env byte", sensitivity_package(script, "valuf", "arg")},
        {"script byte", sensitivity_package(script.substr(0, script.size() - 2) + "m\n", "value", "arg")},
        {"arg", sensitivity_package(script, "value", "arh")},
    };
    for (auto & [what, m] : flips) {
        auto result = realize(*store, instantiate(*store, m));
        for (auto & [o, r] : result) {
            observe(r.path);
            check(r.path != runs[0].second.at(o), what + " left output '" + o + "' unchanged");
        }
    }
    return check.outcome("identical paths on two stores; env/script/arg flips move out and lib");
}

Outcome closure_fuzz()
{
    Checker check;
    TempDir dir;
    Store store(StoreConfig{(dir.path / "store").string(), dir.path / "var"});
    auto cache = dir.path / "cache";
    std::mt19937_64 rng(77);
    auto pick = [&](size_t n) { return std::uniform_int_distribution<size_t>(0, n - 1)(rng); };

    // Ten packages in two same-length variants: twenty derivations.
    constexpr int packages = 10;
    std::vector<std::vector<int>> deps(packages);
    for (int i = 1; i < packages; ++i)
        for (int k = 0; k < 2; ++k)
            if (rng() % 2)
                deps[i].push_back(static_cast<int>(pick(i)));
    for (auto & d : deps) {
        std::sort(d.begin(), d.end());
        d.erase(std::unique(d.begin(), d.end()), d.end());
    }

    std::function<StorePath(int, char)> instantiate_pkg = [&](int i, char variant) {
        std::string script = "mkdir -p $out\necho p" + std::to_string(i) + variant + " > $out/id\n";
        std::vector<std::pair<std::string, StorePath>> inputs;
        for (auto d : deps[i]) {
            auto key = "d" + std::to_string(d);
            inputs.emplace_back(key, instantiate_pkg(d, 'a'));
            script += "echo $" + key + " >> $out/deps\n";
        }
        auto m = fixtures::shell_package("p" + std::to_string(i), std::string("1.0") + variant, script, inputs);
        for (auto d : deps[i])
            m.env["d" + std::to_string(d)] = "${d" + std::to_string(d) + "}";
        return instantiate(store, m);
    };

    std::map<std::string, size_t> counts;
    std::vector<StorePath> cached;
    std::vector<std::string> roots;
    int steps = 0, domain_errors = 0, effective_grafts = 0;
    for (; steps < 1000; ++steps) {
        auto valid = store.valid_paths();
        std::vector<StorePath> valid_list;
        for (auto & [p, info] : valid)
            valid_list.push_back(p);
        std::string op;
        try {
            switch (pick(8)) {
            case 0: {
                op = "add";
                Fso t;
                t.add("f", Fso::file(std::to_string(pick(30))));
                if (!valid_list.empty() && rng() % 2)
                    t.add("ref", Fso::file(valid_list[pick(valid_list.size())].render()));
                store.add_source(t, "src");
                break;
            }
            case 1:
                op = "instantiate";
                instantiate_pkg(static_cast<int>(pick(packages)), rng() % 2 ? 'a' : 'b');
                break;
            case 2:
            case 3:
                op = "realize";
                realize(store, instantiate_pkg(static_cast<int>(pick(packages)), rng() % 2 ? 'a' : 'b'));
                break;
            case 4: {
                op = "graft";
                std::vector<int> with_deps;
                for (int j = 0; j < packages; ++j)
                    if (!deps[j].empty())
                        with_deps.push_back(j);
                int j = with_deps[pick(with_deps.size())];
                int i = deps[j][pick(deps[j].size())];
                auto root = fixtures::realize_out(store, instantiate_pkg(j, rng() % 2 ? 'a' : 'b'));
                auto a = fixtures::realize_out(store, instantiate_pkg(i, 'a'));
                auto b = fixtures::realize_out(store, instantiate_pkg(i, 'b'));
                effective_grafts += graft(store, root, {{a, b}}) != root;
                break;
            }
            case 5: {
                op = "gc";
                if (!valid_list.empty() && rng() % 2) {
                    auto name = "r" + std::to_string(steps);
                    store.add_gcroot(name, valid_list[pick(valid_list.size())]);
                    roots.push_back(name);
                } else if (!roots.empty()) {
                    auto k = pick(roots.size());
                    store.remove_gcroot(roots[k]);
                    roots.erase(roots.begin() + static_cast<long>(k));
                }
                store.gc();
                break;
            }
            case 6: {
                op = "export";
                if (valid_list.empty())
                    break;
                auto p = valid_list[pick(valid_list.size())];
                export_closure(store, p, cache);
                cached.push_back(p);
                break;
            }
            case 7: {
                op = "substitute";
                if (cached.empty())
                    break;
                auto p = cached[pick(cached.size())];
                if (!store.is_valid(p))
                    substitute(store, p, open_substituters({cache.string()}));
                break;
            }
            }
        } catch (const Error & e) {
            ++domain_errors;
        }
        ++counts[op];
        auto report = store.verify();
        if (!check(report.violations.empty(), "closure violated after step " + std::to_string(steps) + " (" + op + ")"))
            break;
        check(report.drifted.empty(), "content drift after step " + std::to_string(steps));
    }
    std::string summary = std::to_string(steps) + " steps:";
    for (auto & [op, n] : counts)
        summary += " " + op + "=" + std::to_string(n);
    return check.outcome(summary + " (" + std::to_string(effective_grafts) + " rewrote a closure), "
        + std::to_string(domain_errors) + " rejected operations, zero violations");
}

Outcome gc_safety()
{
    Checker check;
    TempDir dir;
    Store store(StoreConfig{(dir.path / "store").string(), dir.path / "var"});
    std::mt19937_64 rng(11);
    std::vector<StorePath> nodes;
    std::map<StorePath, std::set<StorePath>> edges;
    for (int i = 0; i < 24; ++i) {
        std::set<StorePath> refs;
        for (auto & n : nodes)
            if (rng() % 5 == 0)
                refs.insert(n);
        std::string body = "node " + std::to_string(i) + "\n";
        for (auto & r : refs)
            body += r.render() + "\n";
        auto p = store.add_text("n" + std::to_string(i), body, refs);
        nodes.push_back(p);
        edges[p] = refs;
    }
    std::set<StorePath> roots;
    for (auto & n : nodes)
        if (rng() % 10 == 0)
            roots.insert(n);
    for (auto & r : roots)
        store.add_gcroot(r.name(), r);

    std::set<StorePath> live = roots;
    for (bool grew = true; grew;) {
        grew = false;
        for (auto p : live)
            for (auto & r : edges[p])
                grew |= live.insert(r).second;
    }
    std::set<StorePath> dead;
    for (auto & n : nodes)
        if (!live.contains(n))
            dead.insert(n);

    auto report = store.gc();
    check(report.deleted == dead, "deleted set differs from the complement of the rooted closure");
    check(report.kept == live, "kept set differs from the rooted closure");
    for (auto & p : live)
        check(store.is_valid(p) && fs::exists(store.real_path(p)), "live path removed");
    for (auto & p : dead)
        check(!fs::exists(store.real_path(p)), "dead path still on disk");
    check(store.gc().deleted.empty(), "second gc deleted something");
    return check.outcome(std::to_string(roots.size()) + " roots, kept " + std::to_string(live.size()) + ", deleted "
        + std::to_string(dead.size()) + ", second pass deleted 0");
}

Outcome ca_self_reference()
{
    Checker check;
    Site site;
    const std::string script = "mkdir -p $out/bin\necho \"$out\" > $out/bin/self\nln -s $out/bin/self $out/link\n";
    std::set<StorePath> finals;
    std::set<std::string> contents;
    size_t placeholder_hits = 0;
    for (int i = 0; i < 100; ++i) {
        auto store = site.fresh("m" + std::to_string(i));
        auto drv = fixtures::instantiate_shell(*store, "selfref", "1", script);
        BuildSettings settings;
        settings.mode = AddressingMode::ContentAddressed;
        settings.placeholder_salt = ":" + std::to_string(i);
        auto out = realize(*store, drv, settings).at("out");
        observe(out.path);
        finals.insert(out.path);
        contents.insert(nar_encode(out.tree));
        auto placeholder = placeholder_path(read_derivation(*store, drv), drv, "out", settings.placeholder_salt);
        placeholder_hits += count_hash_in_closure(*store, out.path, placeholder.hash_part());
        remove_tree(site.base() / ("var-m" + std::to_string(i)));
    }
    check(finals.size() == 1, std::to_string(finals.size()) + " distinct final paths");
    check(contents.size() == 1, std::to_string(contents.size()) + " distinct contents");
    check(placeholder_hits == 0, std::to_string(placeholder_hits) + " placeholder occurrences");
    return check.outcome("100 placeholders -> 1 path, 1 content, 0 placeholder occurrences");
}

Outcome two_glibc()
{
    Checker check;
    Site site;
    BuildSettings ca;
    ca.mode = AddressingMode::ContentAddressed;

    auto instantiate_all = [&](Store & store) {
        std::map<std::string, StorePath> drvs;
        drvs.emplace("glibc", fixtures::instantiate_shell(store, "glibc", "2.38",
            "mkdir -p $out/lib\necho libc > $out/lib/libc.so\nod -An -N8 -tx1 /dev/urandom > $out/build-id\n"
            "echo $out > $out/lib/origin\n"));
        for (auto lib : {"libfoo", "libbar"}) {
            auto m = fixtures::shell_package(lib, "1", "mkdir -p $out/lib\necho \"$GLIBC/lib/libc.so\" > $out/lib/needed\n",
                {{"glibc", drvs.at("glibc")}});
            m.env["GLIBC"] = "${glibc}";
            drvs.emplace(lib, instantiate(store, m));
        }
        auto m = fixtures::shell_package("baz", "1", "mkdir -p $out/bin\necho \"$FOO $BAR\" > $out/bin/baz\n",
            {{"foo", drvs.at("libfoo")}, {"bar", drvs.at("libbar")}});
        m.env["FOO"] = "${foo}";
        m.env["BAR"] = "${bar}";
        drvs.emplace("baz", instantiate(store, m));
        return drvs;
    };

    // Machine L builds libfoo against its glibc and publishes it.
    auto cache = site.base() / "cache-L";
    auto [libfoo_drv, libfoo] = [&] {
        auto store = site.fresh("L");
        auto drv = instantiate_all(*store).at("libfoo");
        auto out = realize(*store, drv, ca).at("out").path;
        export_closure(*store, out, cache);
        return std::pair{drv, out};
    }();

    // Machine S builds libbar against a different glibc build, fetches
    // libfoo, then builds baz on top of both.
    auto store = site.fresh("S");
    auto drvs = instantiate_all(*store);
    check(drvs.at("libfoo") == libfoo_drv, "derivations differ between machines");
    realize(*store, drvs.at("libbar"), ca);
    check(substitute(*store, libfoo, open_substituters({cache.string()})), "libfoo not substituted");
    store->register_realisation(libfoo_drv, "out", libfoo);
    auto baz = realize(*store, drvs.at("baz"), ca).at("out").path;

    auto glibcs = [&](const StorePath & root) {
        std::vector<StorePath> found;
        for (auto & p : store->closure({root}))
            if (p.name() == "glibc-2.38")
                found.push_back(p);
        return found;
    };
    auto before = glibcs(baz);
    check(before.size() == 2, "fixture closure holds " + std::to_string(before.size()) + " glibc members");
    check(equivalence_classes(*store, baz).size() >= 1, "no equivalence classes recorded");

    auto resolved = resolve_equivalence(*store, baz);
    auto after = glibcs(resolved);
    check(after.size() == 1, "resolved closure holds " + std::to_string(after.size()) + " glibc members");
    size_t hits = 0;
    for (auto & g : before)
        if (after.size() == 1 && g != after[0])
            hits += count_hash_in_closure(*store, resolved, g.hash_part());
    check(hits == 0, std::to_string(hits) + " scan hits for the rejected glibc");
    check(store->verify().clean(), "store not clean after resolution");
    observe(resolved);
    return check.outcome("closure had 2 glibc members, resolved closure has 1 and 0 hits for the rejected hash");
}

Outcome graft_without_rebuild()
{
    Checker check;
    TempDir dir;
    Store store(StoreConfig{(dir.path / "store").string(), dir.path / "var"});
    auto libc_drv = fixtures::instantiate_shell(store, "libc", "2.38", "mkdir -p $out/lib\necho libc > $out/lib/libc.so\n");
    auto ssl_drv = [&](const std::string & version) {
        auto m = fixtures::shell_package("libssl", version,
            "mkdir -p $out/bin\nprintf '#!/bin/sh\\necho \"libssl %s via %s\"\\n' \"$VERSION\" \"$LIBC\" > $out/bin/openssl\n"
            "chmod +x $out/bin/openssl\n",
            {{"libc", libc_drv}});
        m.env["VERSION"] = version;
        m.env["LIBC"] = "${libc}";
        return instantiate(store, m);
    };
    auto app_m = fixtures::shell_package("app", "1",
        "mkdir -p $out/bin\nprintf '#!/bin/sh\\nexec %s/bin/openssl\\n' \"$SSL\" > $out/bin/app\nchmod +x $out/bin/app\n",
        {{"ssl", ssl_drv("1.1.1w")}});
    app_m.env["SSL"] = "${ssl}";
    auto app = fixtures::realize_out(store, instantiate(store, app_m));
    auto old_ssl = fixtures::realize_out(store, ssl_drv("1.1.1w"));
    auto new_ssl = fixtures::realize_out(store, ssl_drv("1.1.1x"));

    auto builds = builder_executions();
    auto grafted = graft(store, app, {{old_ssl, new_ssl}});
    check(builder_executions() == builds, "graft ran a builder");
    observe(grafted);
    auto old_hits = count_hash_in_closure(store, grafted, old_ssl.hash_part());
    check(old_hits == 0, std::to_string(old_hits) + " occurrences of the old libssl hash");

    auto out = dir.path / "run.out";
    auto cmd = store.real_path(grafted).string() + "/bin/app > " + out.string() + " 2>&1";
    int rc = std::system(cmd.c_str());
    auto text = fixtures::read_file(out);
    check(rc == 0 && text.starts_with("libssl 1.1.1x via " + store.store_root()), "grafted app printed '" + text + "'");

    bool length_error = false;
    try {
        auto longer = store.add_text("libssl-1.1.1xx", "x", {});
        graft(store, app, {{old_ssl, longer}});
    } catch (const GraftLength &) {
        length_error = true;
    }
    check(length_error, "length-mismatched graft accepted");
    return check.outcome("0 builders, 0 old-hash occurrences, grafted app runs against 1.1.1x, EGraftLength on mismatch");
}

Outcome rebase_closure()
{
    Checker check;
    TempDir dir;
    Store store(StoreConfig{(dir.path / "store").string(), dir.path / "var"});
    auto data = store.add_text("greeting", "hello from the rebased store\n", {});
    auto lib_path = store.add_text("greet.sh", "greet() { cat " + data.render() + "; }\n", {data});
    auto app_path = store.add_text("greet", ". " + lib_path.render() + "\ngreet\n", {lib_path});

    auto new_root = (dir.path / "st0re").string();
    auto manifest = rebase(store, app_path, new_root, "/");
    check(manifest.paths.size() == 3, std::to_string(manifest.paths.size()) + " exported paths");
    size_t old_hits = 0;
    for (auto & entry : fs::recursive_directory_iterator(new_root))
        if (entry.is_regular_file())
            old_hits += find_all(fixtures::read_file(entry.path()), store.store_root()).size();
    check(old_hits == 0, std::to_string(old_hits) + " occurrences of the old root");

    remove_tree(dir.path / "store");
    auto out = dir.path / "out";
    auto cmd = "/bin/sh " + new_root + "/" + app_path.base_name() + " > " + out.string() + " 2>&1";
    int rc = std::system(cmd.c_str());
    check(rc == 0 && fixtures::read_file(out) == "hello from the rebased store\n",
        "exported script printed '" + fixtures::read_file(out) + "'");

    Store again(StoreConfig{(dir.path / "store").string(), dir.path / "var2"});
    auto p = again.add_text("x", "x", {});
    bool rejected = false;
    try {
        rebase(again, p, (dir.path / "longer-store").string(), "/");
    } catch (const RebaseLength &) {
        rejected = true;
    }
    check(rejected, "unequal-length root accepted");
    return check.outcome("3 paths exported, 0 old-root occurrences, script runs from the new root, ERebaseLength on mismatch");
}

Outcome substitution()
{
    Checker check;
    Site site;
    auto origin = site.fresh("origin");
    auto lib_m = fixtures::shell_package("lib", "1", "mkdir -p $out\necho lib > $out/lib.so\n");
    auto lib_drv = instantiate(*origin, lib_m);
    auto app_m = fixtures::shell_package("app", "1", "mkdir -p $out\necho \"$LIB/lib.so\" > $out/conf\n", {{"lib", lib_drv}});
    app_m.env["LIB"] = "${lib}";
    auto app_drv = instantiate(*origin, app_m);
    auto app = fixtures::realize_out(*origin, app_drv);
    auto lib = fixtures::realize_out(*origin, lib_drv);
    CacheServer server(*origin, "127.0.0.1:0");
    BuildSettings settings;
    settings.substituters = {server.url()};

    auto client = site.relocated("client");
    instantiate(*client, lib_m);
    check(instantiate(*client, app_m) == app_drv, "client derivation differs");
    auto builds = builder_executions();
    auto got = realize(*client, app_drv, settings).at("out").path;
    check(builder_executions() == builds, std::to_string(builder_executions() - builds) + " local builds");
    check(got == app && client->is_valid(lib), "closure not substituted");
    check(client->verify().clean(), "client verify not clean");

    // Corrupt the origin's copy of lib: the served archive no longer
    // matches the advertised hash.
    auto file = origin->real_path(lib) / "lib.so";
    fs::permissions(file, fs::perms::owner_write, fs::perm_options::add);
    fixtures::write_file(file, "lia\n");
    auto tampered = site.relocated("tampered");
    instantiate(*tampered, lib_m);
    instantiate(*tampered, app_m);
    auto before = tampered->valid_paths();
    bool mismatch = false;
    try {
        realize(*tampered, app_drv, settings);
    } catch (const HashMismatch &) {
        mismatch = true;
    }
    check(mismatch, "tampered archive not rejected with EHashMismatch");
    check(tampered->valid_paths() == before, "something was registered from the tampered cache");
    return check.outcome("cold client: 0 builds, verify clean; tampered NAR: EHashMismatch, nothing registered");
}

Outcome consensus()
{
    Checker check;
    Site site;
    auto origin = site.fresh("origin");
    auto lib_drv = fixtures::instantiate_shell(*origin, "lib", "1", "echo lib > $out\n");
    auto m = fixtures::shell_package("app", "1", "echo \"$LIB\" > $out\n", {{"lib", lib_drv}});
    m.env["LIB"] = "${lib}";
    auto app = fixtures::realize_out(*origin, instantiate(*origin, m));

    std::vector<fs::path> dirs;
    for (auto name : {"honest-1", "honest-2", "poisoned"}) {
        dirs.push_back(site.base() / name);
        export_closure(*origin, app, dirs.back());
    }
    auto evil = nar_encode(Fso::file("evil\n"));
    auto ni = make_narinfo(*origin, app);
    ni.nar_hash = nar_hash_of(evil);
    ni.nar_size = evil.size();
    fixtures::write_file(dirs[2] / (app.hash_part() + ".narinfo"), ni.render());
    fixtures::write_file(dirs[2] / "nar" / (app.hash_part() + ".nar"), evil);

    auto subs = open_substituters({dirs[0].string(), dirs[1].string(), dirs[2].string()});
    auto verdict = consensus_check(app, subs, 2);
    check(verdict.accepted, "honest majority not accepted");
    check(verdict.dissenters == std::vector<std::string>{dirs[2].string()}, "poisoned cache not flagged");

    auto client = site.relocated("client");
    check(substitute_with_consensus(*client, app, subs, 2), "consensus substitution failed");
    check(client->read_tree(app) == origin->read_tree(app), "client holds the wrong content");
    // The poisoned cache was consulted for lib as well, where it agrees;
    // its archive for app must never be downloaded.
    check(client->query_info(app).nar_hash == make_narinfo(*origin, app).nar_hash, "poisoned archive registered");
    auto fetched_from_poisoned = subs[2]->nar_fetches();

    auto split_dir = site.base() / "split";
    export_closure(*origin, app, split_dir);
    auto other = make_narinfo(*origin, app);
    other.nar_hash = store_hash32("yet another build");
    fixtures::write_file(split_dir / (app.hash_part() + ".narinfo"), other.render());
    auto split = consensus_check(app, open_substituters({dirs[0].string(), dirs[2].string(), split_dir.string()}), 2);
    check(!split.accepted, "three-way disagreement accepted");

    // Trust is per path: run a client that already has lib to observe
    // the poisoned cache serving nothing.
    auto strict = site.relocated("strict");
    auto fresh_subs = open_substituters({dirs[0].string(), dirs[1].string(), dirs[2].string()});
    substitute(*strict, StorePath::parse(make_narinfo(*origin, app).references.at(0)), {fresh_subs[0]});
    substitute_with_consensus(*strict, app, fresh_subs, 2);
    check(fresh_subs[2]->nar_fetches() == 0, "archive fetched from the poisoned cache");
    return check.outcome("accepted 2/3 with the poisoned cache flagged and 0 fetches of its archive ("
        + std::to_string(fetched_from_poisoned) + " for paths it agreed on); 3-way split rejected");
}

Outcome impurity_detection()
{
    Checker check;
    TempDir dir;
    Store store(StoreConfig{(dir.path / "store").string(), dir.path / "var"});
    auto stamp = fixtures::instantiate_shell(store, "stamped", "1",
        "mkdir -p $out/share\necho fixed > $out/share/a\ndate +%s%N > $out/share/build-time\n");
    auto report = check_repeatability(store, stamp);
    check(!report.identical, "timestamp builder passed");
    check(report.differing == std::vector<std::pair<std::string, std::string>>{{"out", "share/build-time"}},
        "offending file not listed exactly");

    auto listing = fixtures::instantiate_shell(store, "listing", "1",
        "mkdir $out d\nfor f in $(seq 1 16 | shuf); do : > d/$f; done\nls -f d > $out/order\n");
    auto listing_report = check_repeatability(store, listing);
    check(!listing_report.identical, "directory-order builder passed (build root " + repeatability_build_root().string() + ")");

    auto pure = fixtures::instantiate_shell(store, "pure", "1", "mkdir $out\necho \"$out\" > $out/self\n");
    check(check_repeatability(store, pure).identical, "pure builder flagged");
    return check.outcome("timestamp flagged at out:share/build-time, listing order flagged, pure builder identical");
}

Outcome canonicalization()
{
    Checker check;
    TempDir dir;
    Store store(StoreConfig{(dir.path / "store").string(), dir.path / "var"});
    auto drv = fixtures::instantiate_shell(store, "modes", "1",
        "mkdir -p $out/bin $out/etc\necho x > $out/bin/tool\nchmod 0755 $out/bin/tool\necho y > $out/etc/conf\n"
        "chmod 0600 $out/etc/conf\necho z > $out/etc/shared\nchmod 0666 $out/etc/shared\n"
        "ln -s ../bin/tool $out/etc/link\ntouch -d 2020-01-01 $out/etc/conf\n");
    auto out = fixtures::realize_out(store, drv);
    std::set<unsigned> modes;
    size_t nonzero_mtime = 0, nodes = 0;
    for (auto & entry : fs::recursive_directory_iterator(store.real_path(out))) {
        struct stat st;
        ::lstat(entry.path().c_str(), &st);
        ++nodes;
        if (!S_ISLNK(st.st_mode))
            modes.insert(st.st_mode & 07777);
        nonzero_mtime += st.st_mtime != 0;
    }
    struct stat top;
    ::lstat(store.real_path(out).c_str(), &top);
    nonzero_mtime += top.st_mtime != 0;
    const std::set<unsigned> allowed{0444, 0555};
    check(std::includes(allowed.begin(), allowed.end(), modes.begin(), modes.end()), "unexpected modes in the store");
    check(nonzero_mtime == 0, std::to_string(nonzero_mtime) + " non-zero timestamps");

    TempDir src;
    ::mkfifo((src.path / "pipe").c_str(), 0644);
    bool unsupported = false;
    try {
        canonicalize(src.path);
    } catch (const UnsupportedNode &) {
        unsupported = true;
    }
    check(unsupported, "fifo accepted");

    auto fifo_drv = fixtures::instantiate_shell(store, "fifo", "1", "mkdir $out\nmkfifo $out/pipe\n");
    bool build_rejected = false;
    try {
        realize(store, fifo_drv);
    } catch (const UnsupportedNode &) {
        build_rejected = true;
    }
    check(build_rejected, "fifo build output accepted");
    return check.outcome(std::to_string(nodes + 1) + " nodes with modes in {0444,0555} and mtime 0; fifo raises EUnsupportedNode");
}

} // namespace

int main()
{
    std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"archive determinism and bijectivity", nar_determinism},
        {"input sensitivity and stability", input_sensitivity},
        {"closure invariant under random operations", closure_fuzz},
        {"garbage collection safety", gc_safety},
        {"content-addressed self-reference stability", ca_self_reference},
        {"two-glibc resolution", two_glibc},
        {"graft without rebuild", graft_without_rebuild},
        {"rebase to an equal-length root", rebase_closure},
        {"substitution", substitution},
        {"consensus", consensus},
        {"impurity detection", impurity_detection},
        {"canonicalization", canonicalization},
        // Last, so it also checks every hash part produced above.
        {"hash geometry", hash_geometry},
    };
    std::vector<int> numbering{1, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 2};

    std::vector<std::string> lines(criteria.size());
    int failed = 0;
    for (size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception & e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        lines[static_cast<size_t>(numbering[i] - 1)] = std::string(o.pass ? "PASS" : "FAIL") + "  "
            + std::to_string(numbering[i]) + ". " + criteria[i].first + ": " + o.detail;
    }
    for (auto & l : lines)
        std::cout << l << "\n";
    std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed\n";
    return failed == 0 ? 0 : 1;
}
