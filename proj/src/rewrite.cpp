#include "minstore/rewrite.hpp"
#include "minstore/error.hpp"
#include "minstore/nar.hpp"
#include "minstore/store.hpp"

#include <algorithm>
#include <functional>
#include <unordered_map>

namespace minstore {

namespace fs = std::filesystem;

std::vector<size_t> find_all(std::string_view haystack, std::string_view needle)
{
    std::vector<size_t> offsets;
    if (needle.empty())
        return offsets;
    for (auto pos = haystack.find(needle); pos != std::string_view::npos; pos = haystack.find(needle, pos + needle.size()))
        offsets.push_back(pos);
    return offsets;
}

namespace {

/// Applies `edit` to every file's contents and symlink's target.
Fso map_leaves(const Fso & tree, const std::function<std::string(const std::string &)> & edit)
{
    return std::visit(
        [&](const auto & node) -> Fso {
            using T = std::decay_t<decltype(node)>;
            if constexpr (std::is_same_v<T, Regular>)
                return Regular{edit(node.contents), node.executable};
            else if constexpr (std::is_same_v<T, Symlink>)
                return Symlink{edit(node.target)};
            else {
                Directory dir;
                for (auto & entry : node.entries())
                    dir.append_sorted(entry.name, map_leaves(entry.node, edit));
                return dir;
            }
        },
        tree.node());
}

std::string replace_all(const std::string & bytes, const std::string & from, const std::string & to)
{
    std::string out = bytes;
    for (auto off : find_all(bytes, from))
        out.replace(off, from.size(), to);
    return out;
}

const std::string & leaf_bytes(const Fso & leaf)
{
    return leaf.is_regular() ? leaf.regular().contents : leaf.symlink_node().target;
}

} // namespace

RewriteResult rewrite_hashes(const Fso & tree, const std::map<std::string, std::string> & mapping)
{
    std::unordered_map<std::string_view, std::string_view> table;
    std::set<std::string_view> values;
    for (auto & [from, to] : mapping) {
        if (from.size() != hash_part_len || to.size() != hash_part_len)
            throw LengthMismatch(
                "rewrite '" + from + "' -> '" + to + "' is not between two " + std::to_string(hash_part_len)
                + "-character hashes");
        table.emplace(from, to);
        values.insert(to);
    }
    for (auto & [from, to] : mapping)
        if (values.contains(from))
            throw AliasedMapping("'" + from + "' is both rewritten and a rewrite target");

    RewriteResult result;
    if (table.empty()) {
        result.tree = tree;
        return result;
    }
    std::array<bool, 256> first_chars{};
    for (auto & [from, to] : table)
        first_chars[static_cast<unsigned char>(from[0])] = true;

    result.tree = map_leaves(tree, [&](const std::string & bytes) {
        std::string out = bytes;
        for (size_t i = 0; i + hash_part_len <= out.size();) {
            if (first_chars[static_cast<unsigned char>(out[i])]) {
                auto it = table.find(std::string_view(out).substr(i, hash_part_len));
                if (it != table.end()) {
                    out.replace(i, hash_part_len, it->second);
                    ++result.replacements;
                    i += hash_part_len;
                    continue;
                }
            }
            ++i;
        }
        return out;
    });
    return result;
}

Finalized ca_finalize(
    const Fso & tree, const std::set<StorePath> & placeholders, std::string_view store_root, std::string_view name)
{
    auto zero = zero_hash_part();
    std::map<std::string, std::string> zeroing;
    for (auto & p : placeholders)
        if (p.hash_part() != zero)
            zeroing[p.hash_part()] = zero;
    auto normalized = rewrite_hashes(tree, zeroing).tree;
    auto final_path = make_store_path("ca", nar_encode(normalized), store_root, name);

    std::map<std::string, std::string> fixup;
    for (auto & p : placeholders)
        if (p.hash_part() != final_path.hash_part())
            fixup[p.hash_part()] = final_path.hash_part();
    auto result = rewrite_hashes(tree, fixup).tree;
    return {final_path, std::move(result)};
}

ReferenceAudit audit_references(const Store & store, const StorePath & path)
{
    auto info = store.query_info(path);
    auto tree = store.read_tree(path);

    ReferenceAudit audit{path, {}, true, true};
    std::set<StorePath> candidates = info.references;
    candidates.insert(path);

    std::set<std::string> hashes;
    for (auto & c : candidates)
        if (!hashes.insert(c.hash_part()).second)
            audit.injectivity_holds = false;

    for (auto & c : candidates) {
        auto & occ = audit.occurrences[c];
        for_each_leaf(tree, [&](const std::string & file, const Fso & leaf) {
            for (auto off : find_all(leaf_bytes(leaf), c.hash_part()))
                occ.push_back({file, off});
        });
        if (c != path && occ.empty())
            audit.necessity_holds = false;
    }
    return audit;
}

size_t count_hash_in_closure(const Store & store, const StorePath & root, std::string_view hash_part)
{
    size_t n = 0;
    for (auto & p : store.closure({root}))
        for_each_leaf(store.read_tree(p), [&](const std::string &, const Fso & leaf) {
            n += find_all(leaf_bytes(leaf), hash_part).size();
        });
    return n;
}

std::vector<EquivalenceClass> equivalence_classes(const Store & store, const StorePath & root)
{
    std::map<std::string, std::set<StorePath>> by_key;
    for (auto & p : store.closure({root}))
        if (auto info = store.query_info(p); info.eq_class)
            by_key[*info.eq_class].insert(p);
    std::vector<EquivalenceClass> classes;
    for (auto & [key, members] : by_key)
        classes.push_back({key, members});
    return classes;
}

namespace {

/**
 * Shared machinery of resolution and grafting: each path maps either to a
 * fixed substitute or to a copy of itself whose references were mapped.
 * Copies are re-addressed modulo self-references under their old name.
 */
class ReferenceRemapper
{
public:
    enum class Mode {
        /// Substitutes are members of the closure and are remapped themselves.
        Resolve,
        /// Substitutes are taken as given; old paths found anywhere in the
        /// content are rewritten even if unregistered.
        Graft,
    };

    ReferenceRemapper(Store & store, std::map<StorePath, StorePath> substitutes, Mode mode)
        : store_(store)
        , substitutes_(std::move(substitutes))
        , global_(mode == Mode::Graft)
    {
    }

    StorePath map(const StorePath & p)
    {
        if (auto it = memo_.find(p); it != memo_.end())
            return it->second;
        if (!in_progress_.insert(p).second)
            throw ClassUnresolvable("rewriting '" + p.render() + "' would create a reference cycle");

        StorePath result = p;
        if (auto it = substitutes_.find(p); it != substitutes_.end())
            result = global_ ? it->second : map(it->second);
        else
            result = copy_if_needed(p);

        in_progress_.erase(p);
        memo_.emplace(p, result);
        return result;
    }

private:
    Store & store_;
    std::map<StorePath, StorePath> substitutes_;
    bool global_;
    std::map<StorePath, StorePath> memo_;
    std::set<StorePath> in_progress_;

    StorePath copy_if_needed(const StorePath & p)
    {
        auto info = store_.query_info(p);
        std::map<std::string, std::string> mapping;
        std::set<StorePath> new_refs;
        bool self_ref = false;
        for (auto & ref : info.references) {
            if (ref == p) {
                self_ref = true;
                continue;
            }
            auto mapped = map(ref);
            new_refs.insert(mapped);
            if (mapped != ref)
                mapping[ref.hash_part()] = mapped.hash_part();
        }

        if (global_) {
            // Replaced paths found in the content but missing from the
            // registered references are rewritten as well.
            auto tree = store_.read_tree(p);
            for (auto & [old_path, new_path] : substitutes_) {
                bool present = false;
                for_each_leaf(tree, [&](const std::string &, const Fso & leaf) {
                    present = present || leaf_bytes(leaf).find(old_path.hash_part()) != std::string::npos;
                });
                if (present && old_path != p) {
                    auto mapped = map(old_path);
                    mapping[old_path.hash_part()] = mapped.hash_part();
                    new_refs.insert(mapped);
                }
            }
        }

        if (mapping.empty())
            return p;

        auto tree = store_.read_tree(p);
        if (global_) {
            // A replacement may carry a different name of the same length
            // (a version bump); rewrite whole base names before bare hashes.
            for (auto & [old_path, new_path] : substitutes_)
                if (mapping.contains(old_path.hash_part()) && old_path.name() != new_path.name())
                    tree = map_leaves(tree, [&](const std::string & bytes) {
                        return replace_all(bytes, old_path.base_name(), new_path.base_name());
                    });
        }
        auto rewritten = rewrite_hashes(tree, mapping);
        auto fin = ca_finalize(rewritten.tree, {p}, store_.store_root(), p.name());
        if (self_ref || rewritten.tree != fin.tree)
            new_refs.insert(fin.path);
        new_refs.erase(p);
        store_.register_objects({NewObject{fin.path, fin.tree, new_refs, info.deriver, info.eq_class}});
        return fin.path;
    }
};

} // namespace

StorePath resolve_equivalence(Store & store, const StorePath & root, const std::vector<EquivalenceClass> & classes)
{
    auto closure = store.closure({root});
    std::map<StorePath, StorePath> rejected;
    for (auto & cls : classes) {
        std::vector<StorePath> present;
        for (auto & m : cls.members)
            if (closure.contains(m))
                present.push_back(m);
        if (present.size() < 2)
            continue;
        for (auto & m : present)
            if (m.name() != present.front().name())
                throw ClassUnresolvable(
                    "class " + cls.key + " mixes '" + m.name() + "' and '" + present.front().name() + "'");
        auto chosen = *std::min_element(present.begin(), present.end(), [](auto & a, auto & b) {
            return a.hash_part() < b.hash_part();
        });
        for (auto & m : present)
            if (m != chosen)
                rejected.emplace(m, chosen);
    }
    if (rejected.empty())
        return root;
    return ReferenceRemapper(store, std::move(rejected), ReferenceRemapper::Mode::Resolve).map(root);
}

StorePath resolve_equivalence(Store & store, const StorePath & root)
{
    return resolve_equivalence(store, root, equivalence_classes(store, root));
}

StorePath graft(Store & store, const StorePath & root, const std::map<StorePath, StorePath> & replacements)
{
    for (auto & [old_path, new_path] : replacements) {
        if (old_path.render().size() != new_path.render().size())
            throw GraftLength(
                "'" + old_path.render() + "' and '" + new_path.render() + "' differ in length");
        if (!store.is_valid(new_path))
            throw UnknownPath("'" + new_path.render() + "' is not valid");
    }
    if (!store.is_valid(root))
        throw UnknownPath("'" + root.render() + "' is not valid");
    return ReferenceRemapper(store, replacements, ReferenceRemapper::Mode::Graft).map(root);
}

RebaseManifest rebase(const Store & store, const StorePath & root, std::string_view new_store_root, const fs::path & destination)
{
    auto new_root = normalize_store_root(new_store_root);
    const auto & old_root = store.store_root();
    if (new_root.size() != old_root.size())
        throw RebaseLength("'" + old_root + "' and '" + new_root + "' differ in length");

    RebaseManifest manifest{old_root, new_root, {}};
    auto target_dir = destination / fs::path(new_root).relative_path();
    std::error_code ec;
    fs::create_directories(target_dir, ec);
    if (ec)
        throw Io("cannot create '" + target_dir.string() + "': " + ec.message());

    for (auto & p : store.topo_sorted(store.closure({root}))) {
        auto tree = map_leaves(store.read_tree(p), [&](const std::string & bytes) {
            return replace_all(bytes, old_root, new_root);
        });
        auto target = target_dir / p.base_name();
        remove_tree(target);
        materialize(tree, target);
        manifest.paths.push_back(new_root + "/" + p.base_name());
    }
    return manifest;
}

} // namespace minstore
