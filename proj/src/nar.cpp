#include "minstore/nar.hpp"
#include "minstore/error.hpp"

#include <cstdint>

namespace minstore {

namespace {

void put_string(std::string & out, std::string_view s)
{
    uint64_t len = s.size();
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
    out.append(s);
    out.append((8 - s.size() % 8) % 8, '\0');
}

void encode_node(std::string & out, const Fso & tree)
{
    put_string(out, "(");
    put_string(out, "type");
    std::visit(
        [&](const auto & node) {
            using T = std::decay_t<decltype(node)>;
            if constexpr (std::is_same_v<T, Regular>) {
                put_string(out, "regular");
                if (node.executable) {
                    put_string(out, "executable");
                    put_string(out, "");
                }
                put_string(out, "contents");
                put_string(out, node.contents);
            } else if constexpr (std::is_same_v<T, Symlink>) {
                put_string(out, "symlink");
                put_string(out, "target");
                put_string(out, node.target);
            } else {
                put_string(out, "directory");
                for (auto & entry : node.entries()) {
                    put_string(out, "entry");
                    put_string(out, "(");
                    put_string(out, "name");
                    put_string(out, entry.name);
                    put_string(out, "node");
                    encode_node(out, entry.node);
                    put_string(out, ")");
                }
            }
        },
        tree.node());
    put_string(out, ")");
}

class Decoder
{
public:
    explicit Decoder(std::string_view in)
        : in_(in)
    {
    }

    Fso archive()
    {
        expect(nar_magic);
        auto tree = node(0);
        if (pos_ != in_.size())
            fail("trailing bytes after archive");
        return tree;
    }

private:
    // Deep trees are legal but bounded to keep decoding off the stack limit.
    static constexpr int max_depth = 1024;

    std::string_view in_;
    size_t pos_ = 0;

    [[noreturn]] void fail(const std::string & msg) const
    {
        throw MalformedArchive(msg + " at offset " + std::to_string(pos_));
    }

    std::string_view string()
    {
        if (in_.size() - pos_ < 8)
            fail("truncated length field");
        uint64_t len = 0;
        for (int i = 0; i < 8; ++i)
            len |= uint64_t(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
        pos_ += 8;
        uint64_t padded = len + (8 - len % 8) % 8;
        if (len > in_.size() || padded > in_.size() - pos_)
            fail("truncated string");
        auto s = in_.substr(pos_, len);
        for (auto i = pos_ + len; i < pos_ + padded; ++i)
            if (in_[i] != '\0')
                fail("non-zero padding");
        pos_ += padded;
        return s;
    }

    void expect(std::string_view token)
    {
        auto s = string();
        if (s != token)
            fail("expected '" + std::string(token) + "'");
    }

    Fso node(int depth)
    {
        if (depth > max_depth)
            fail("nesting too deep");
        expect("(");
        expect("type");
        auto kind = string();
        if (kind == "regular") {
            Regular file;
            auto tag = string();
            if (tag == "executable") {
                if (!string().empty())
                    fail("executable marker must be empty");
                file.executable = true;
                tag = string();
            }
            if (tag != "contents")
                fail("expected 'contents'");
            file.contents = std::string(string());
            expect(")");
            return file;
        }
        if (kind == "symlink") {
            expect("target");
            Symlink link{std::string(string())};
            expect(")");
            return link;
        }
        if (kind == "directory") {
            Directory dir;
            for (;;) {
                auto tag = string();
                if (tag == ")")
                    return dir;
                if (tag != "entry")
                    fail("expected 'entry' or ')'");
                expect("(");
                expect("name");
                auto name = std::string(string());
                expect("node");
                auto child = node(depth + 1);
                expect(")");
                try {
                    dir.append_sorted(std::move(name), std::move(child));
                } catch (BadName & e) {
                    fail(e.what());
                }
            }
        }
        fail("unknown node type '" + std::string(kind) + "'");
    }
};

} // namespace

std::string nar_encode(const Fso & tree)
{
    std::string out;
    put_string(out, nar_magic);
    encode_node(out, tree);
    return out;
}

Fso nar_decode(std::string_view bytes)
{
    return Decoder(bytes).archive();
}

} // namespace minstore
