#include "minstore/derivation.hpp"
#include "minstore/error.hpp"
#include "minstore/store.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <optional>
#include <sstream>

namespace minstore {

namespace fs = std::filesystem;

std::string Derivation::full_name() const
{
    return version.empty() ? name : name + "-" + version;
}

std::string Derivation::output_path_name(const std::string & output) const
{
    return output == "out" ? full_name() : full_name() + "-" + output;
}

static bool valid_identifier(std::string_view s)
{
    if (s.empty() || !(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_'))
        return false;
    return std::all_of(s.begin(), s.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
    });
}

void normalize_outputs(std::vector<std::string> & outputs)
{
    std::set<std::string> seen;
    for (auto & o : outputs) {
        if (!valid_identifier(o))
            throw Semantic("invalid output name '" + o + "'");
        if (!seen.insert(o).second)
            throw Semantic("duplicate output '" + o + "'");
    }
    if (!seen.contains("out"))
        throw Semantic("derivation has no 'out' output");
    outputs.assign(seen.begin(), seen.end());
    std::stable_partition(outputs.begin(), outputs.end(), [](auto & o) { return o == "out"; });
}

namespace {

void put_quoted(std::string & out, std::string_view s)
{
    out += '"';
    for (char c : s) {
        switch (c) {
        case '"':
            out += "\\\"";
            break;
        case '\\':
            out += "\\\\";
            break;
        case '\n':
            out += "\\n";
            break;
        case '\t':
            out += "\\t";
            break;
        default:
            out += c;
        }
    }
    out += '"';
}

template<typename Range, typename F>
void put_list(std::string & out, const Range & items, F && put_item)
{
    out += '[';
    bool first = true;
    for (auto & item : items) {
        if (!first)
            out += ',';
        first = false;
        put_item(item);
    }
    out += ']';
}

class AtermReader
{
public:
    explicit AtermReader(std::string_view in)
        : in_(in)
    {
    }

    [[noreturn]] void fail(const std::string & msg) const
    {
        throw Parse("derivation, offset " + std::to_string(pos_) + ": " + msg);
    }

    void expect(std::string_view token)
    {
        if (in_.substr(pos_, token.size()) != token)
            fail("expected '" + std::string(token) + "'");
        pos_ += token.size();
    }

    bool peek(char c) const
    {
        return pos_ < in_.size() && in_[pos_] == c;
    }

    std::string quoted()
    {
        expect("\"");
        std::string out;
        for (;;) {
            if (pos_ >= in_.size())
                fail("unterminated string");
            char c = in_[pos_++];
            if (c == '"')
                return out;
            if (c != '\\') {
                out += c;
                continue;
            }
            if (pos_ >= in_.size())
                fail("unterminated escape");
            char e = in_[pos_++];
            switch (e) {
            case '"':
            case '\\':
                out += e;
                break;
            case 'n':
                out += '\n';
                break;
            case 't':
                out += '\t';
                break;
            default:
                fail("unknown escape");
            }
        }
    }

    template<typename F>
    void list(F && item)
    {
        expect("[");
        if (peek(']')) {
            ++pos_;
            return;
        }
        for (;;) {
            item();
            if (peek(',')) {
                ++pos_;
                continue;
            }
            expect("]");
            return;
        }
    }

    bool at_end() const
    {
        return pos_ == in_.size();
    }

private:
    std::string_view in_;
    size_t pos_ = 0;
};

StorePath parse_drv_path(AtermReader & r, const std::string & s)
{
    try {
        return StorePath::parse(s);
    } catch (Error & e) {
        r.fail(e.what());
    }
}

} // namespace

std::string Derivation::serialize() const
{
    std::string out = "Derive(";

    std::vector<std::string> sorted_outputs(outputs.begin(), outputs.end());
    std::sort(sorted_outputs.begin(), sorted_outputs.end());
    put_list(out, sorted_outputs, [&](const std::string & o) {
        out += '(';
        put_quoted(out, o);
        out += ',';
        auto it = output_paths.find(o);
        put_quoted(out, it == output_paths.end() ? "" : it->second);
        out += ')';
    });
    out += ',';

    put_list(out, input_drvs, [&](const auto & kv) {
        out += '(';
        put_quoted(out, kv.first.render());
        out += ',';
        put_list(out, kv.second, [&](const std::string & o) { put_quoted(out, o); });
        out += ')';
    });
    out += ',';

    put_list(out, input_srcs, [&](const StorePath & p) { put_quoted(out, p.render()); });
    out += ',';
    put_quoted(out, system);
    out += ',';
    put_quoted(out, builder);
    out += ',';
    put_list(out, args, [&](const std::string & a) { put_quoted(out, a); });
    out += ',';

    auto full_env = env;
    full_env["name"] = name;
    full_env["version"] = version;
    put_list(out, full_env, [&](const auto & kv) {
        out += '(';
        put_quoted(out, kv.first);
        out += ',';
        put_quoted(out, kv.second);
        out += ')';
    });
    out += ')';
    return out;
}

Derivation Derivation::parse(std::string_view text)
{
    AtermReader r(text);
    Derivation drv;
    drv.outputs.clear();

    r.expect("Derive(");
    r.list([&] {
        r.expect("(");
        auto name = r.quoted();
        r.expect(",");
        auto path = r.quoted();
        r.expect(")");
        if (!drv.output_paths.emplace(name, path).second)
            r.fail("duplicate output '" + name + "'");
        drv.outputs.push_back(name);
    });
    r.expect(",");
    r.list([&] {
        r.expect("(");
        auto path = parse_drv_path(r, r.quoted());
        r.expect(",");
        std::set<std::string> outs;
        r.list([&] { outs.insert(r.quoted()); });
        r.expect(")");
        drv.input_drvs.emplace(path, std::move(outs));
    });
    r.expect(",");
    r.list([&] { drv.input_srcs.insert(parse_drv_path(r, r.quoted())); });
    r.expect(",");
    drv.system = r.quoted();
    r.expect(",");
    drv.builder = r.quoted();
    r.expect(",");
    r.list([&] { drv.args.push_back(r.quoted()); });
    r.expect(",");
    r.list([&] {
        r.expect("(");
        auto key = r.quoted();
        r.expect(",");
        auto value = r.quoted();
        r.expect(")");
        if (!drv.env.emplace(key, value).second)
            r.fail("duplicate environment key '" + key + "'");
    });
    r.expect(")");
    if (!r.at_end())
        r.fail("trailing characters");

    auto take = [&](const char * key) {
        auto it = drv.env.find(key);
        if (it == drv.env.end())
            r.fail(std::string("missing '") + key + "' in environment");
        auto value = it->second;
        drv.env.erase(it);
        return value;
    };
    drv.name = take("name");
    drv.version = take("version");
    try {
        normalize_outputs(drv.outputs);
    } catch (Semantic & e) {
        r.fail(e.what());
    }
    return drv;
}

std::map<std::string, StorePath> output_paths(const Derivation & drv, std::string_view store_root)
{
    Derivation blank = drv;
    for (auto & o : blank.outputs)
        blank.output_paths[o] = "";
    auto inner = blank.serialize();
    std::map<std::string, StorePath> result;
    for (auto & o : drv.outputs)
        result.emplace(o, make_store_path("output:" + o, inner, store_root, drv.output_path_name(o)));
    return result;
}

Derivation read_derivation(const Store & store, const StorePath & drv_path)
{
    auto tree = store.read_tree(drv_path);
    if (!tree.is_regular())
        throw Semantic("'" + drv_path.render() + "' is not a derivation file");
    return Derivation::parse(tree.regular().contents);
}

std::string substitute_placeholders(std::string_view text, const std::map<std::string, std::string> & bindings)
{
    std::string out;
    size_t pos = 0;
    while (pos < text.size()) {
        auto start = text.find("${", pos);
        if (start == std::string_view::npos)
            break;
        auto end = text.find('}', start + 2);
        if (end == std::string_view::npos)
            break;
        out.append(text.substr(pos, start - pos));
        auto key = std::string(text.substr(start + 2, end - start - 2));
        if (auto it = bindings.find(key); it != bindings.end())
            out += it->second;
        else
            out.append(text.substr(start, end - start + 1));
        pos = end + 1;
    }
    out.append(text.substr(pos));
    return out;
}

namespace {

std::string trim(std::string_view s)
{
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos)
        return {};
    auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> words(std::string_view s)
{
    std::vector<std::string> out;
    std::istringstream in{std::string(s)};
    std::string w;
    while (in >> w)
        out.push_back(w);
    return out;
}

/// Every `${...}` reference in `text`.
std::vector<std::string> references_in(std::string_view text)
{
    std::vector<std::string> refs;
    size_t pos = 0;
    while ((pos = text.find("${", pos)) != std::string_view::npos) {
        auto end = text.find('}', pos + 2);
        if (end == std::string_view::npos)
            break;
        refs.emplace_back(text.substr(pos + 2, end - pos - 2));
        pos = end + 1;
    }
    return refs;
}

enum class Section { Top, Args, Env, Sources, Inputs };

} // namespace

Manifest parse_manifest(std::string_view text)
{
    Manifest m;
    Section section = Section::Top;
    std::set<std::string> top_keys;
    std::set<std::string> section_keys[5];
    std::optional<std::vector<std::string>> declared_outputs;

    size_t lineno = 0;
    size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        auto raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++lineno;

        auto fail = [&](size_t column, const std::string & msg) {
            return Parse("line " + std::to_string(lineno) + ", column " + std::to_string(column) + ": " + msg);
        };

        auto line = trim(raw);
        auto indent = raw.find_first_not_of(" \t") + 1;
        if (line.empty() || line[0] == '#')
            continue;

        if (line.front() == '[') {
            if (line.back() != ']')
                throw fail(indent, "unterminated section header");
            auto name = line.substr(1, line.size() - 2);
            if (name == "args")
                section = Section::Args;
            else if (name == "env")
                section = Section::Env;
            else if (name == "sources")
                section = Section::Sources;
            else if (name == "inputs")
                section = Section::Inputs;
            else
                throw fail(indent + 1, "unknown section '" + name + "'");
            continue;
        }

        if (section == Section::Args) {
            m.args.push_back(line);
            continue;
        }

        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw fail(indent, "expected 'key = value'");
        auto key = trim(line.substr(0, eq));
        auto value = trim(line.substr(eq + 1));
        bool key_ok = !key.empty() && std::all_of(key.begin(), key.end(), [](char c) {
            return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
        });
        if (!key_ok)
            throw fail(indent, "invalid key '" + key + "'");

        if (!section_keys[static_cast<int>(section)].insert(key).second)
            throw fail(indent, "duplicate key '" + key + "'");

        switch (section) {
        case Section::Top:
            if (key == "name")
                m.name = value;
            else if (key == "version")
                m.version = value;
            else if (key == "system")
                m.system = value;
            else if (key == "builder")
                m.builder = value;
            else if (key == "outputs")
                declared_outputs = words(value);
            else
                throw fail(indent, "unknown key '" + key + "'");
            break;
        case Section::Env:
            m.env.emplace(key, value);
            break;
        case Section::Sources:
            if (value.empty())
                throw fail(indent, "source '" + key + "' has no path");
            m.sources.push_back(SourceSpec{key, value});
            break;
        case Section::Inputs: {
            InputSpec input{key, value, {}};
            if (auto bang = value.find('!'); bang != std::string::npos) {
                input.drv_path = value.substr(0, bang);
                auto list = value.substr(bang + 1);
                std::replace(list.begin(), list.end(), ',', ' ');
                for (auto & o : words(list))
                    input.outputs.insert(o);
            }
            if (input.outputs.empty())
                input.outputs.insert("out");
            m.inputs.push_back(std::move(input));
            break;
        }
        case Section::Args:
            break;
        }
    }

    if (m.name.empty())
        throw Semantic("manifest has no name");
    if (m.system.empty())
        throw Semantic("manifest has no system");
    if (m.builder.empty())
        throw Semantic("manifest has no builder");
    if (declared_outputs)
        m.outputs = *declared_outputs;
    normalize_outputs(m.outputs);

    Derivation probe;
    probe.name = m.name;
    probe.version = m.version;
    for (auto & o : m.outputs)
        if (!valid_path_name(probe.output_path_name(o)))
            throw Semantic("invalid name or version: '" + probe.output_path_name(o) + "'");

    std::map<std::string, std::set<std::string>> known; // key -> selectable sub-outputs
    auto declare = [&](const std::string & key, std::set<std::string> subs) {
        if (!valid_identifier(key))
            throw Semantic("invalid reference name '" + key + "'");
        if (!known.emplace(key, std::move(subs)).second)
            throw Semantic("'" + key + "' is declared more than once across outputs, sources and inputs");
    };
    for (auto & o : m.outputs)
        declare(o, {});
    for (auto & s : m.sources)
        declare(s.key, {});
    for (auto & i : m.inputs) {
        declare(i.key, i.outputs);
        try {
            StorePath::parse(i.drv_path);
        } catch (Error & e) {
            throw Semantic("input '" + i.key + "': " + e.what());
        }
    }

    for (auto & [key, value] : m.env) {
        if (key == "name" || key == "version" || key == "HOME")
            throw Semantic("environment variable '" + key + "' is reserved");
        if (std::find(m.outputs.begin(), m.outputs.end(), key) != m.outputs.end())
            throw Semantic("environment variable '" + key + "' clashes with an output name");
    }

    auto check_refs = [&](std::string_view text) {
        for (auto & ref : references_in(text)) {
            auto dot = ref.find('.');
            auto head = ref.substr(0, dot);
            auto it = known.find(head);
            if (it == known.end())
                throw Semantic("reference to undeclared '${" + ref + "}'");
            if (dot != std::string::npos && !it->second.contains(ref.substr(dot + 1)))
                throw Semantic("reference to unselected output '${" + ref + "}'");
        }
    };
    check_refs(m.builder);
    for (auto & a : m.args)
        check_refs(a);
    for (auto & [k, v] : m.env)
        check_refs(v);
    return m;
}

Manifest load_manifest(const fs::path & file)
{
    std::ifstream in(file, std::ios::binary);
    if (!in)
        throw Io("cannot read manifest '" + file.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    auto m = parse_manifest(buf.str());
    m.base_dir = fs::absolute(file).parent_path();
    return m;
}

StorePath instantiate(Store & store, const Manifest & m)
{
    Derivation drv;
    drv.name = m.name;
    drv.version = m.version;
    drv.outputs = m.outputs;
    drv.system = m.system;

    std::map<std::string, std::string> bindings;
    for (auto & s : m.sources) {
        auto path = fs::path(s.path).is_absolute() ? fs::path(s.path) : m.base_dir / s.path;
        auto base = path.filename().string();
        auto name = valid_path_name(base) ? base : s.key;
        auto src = store.add_source(canonicalize(path), name);
        drv.input_srcs.insert(src);
        bindings[s.key] = src.render();
    }
    for (auto & i : m.inputs) {
        auto drv_path = StorePath::parse(i.drv_path);
        if (drv_path.root() != store.store_root() || !store.is_valid(drv_path))
            throw Semantic("input '" + i.key + "': derivation '" + i.drv_path + "' has not been instantiated");
        auto input = read_derivation(store, drv_path);
        for (auto & o : i.outputs) {
            auto it = input.output_paths.find(o);
            if (it == input.output_paths.end())
                throw Semantic("input '" + i.key + "' has no output '" + o + "'");
            bindings[i.key + "." + o] = it->second;
            if (o == "out")
                bindings[i.key] = it->second;
        }
        drv.input_drvs[drv_path].insert(i.outputs.begin(), i.outputs.end());
    }

    drv.builder = substitute_placeholders(m.builder, bindings);
    for (auto & a : m.args)
        drv.args.push_back(substitute_placeholders(a, bindings));
    for (auto & [k, v] : m.env)
        drv.env[k] = substitute_placeholders(v, bindings);

    for (auto & [o, path] : output_paths(drv, store.store_root()))
        drv.output_paths[o] = path.render();

    std::set<StorePath> refs = drv.input_srcs;
    for (auto & [p, outs] : drv.input_drvs)
        refs.insert(p);
    return store.add_text(drv.full_name() + ".drv", drv.serialize(), refs);
}

} // namespace minstore
