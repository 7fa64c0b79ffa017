#include "minstore/hash.hpp"
#include "minstore/error.hpp"

#include <openssl/evp.h>

namespace minstore {

std::string Base32::encode(std::span<const uint8_t> data)
{
    if (data.empty())
        return {};
    size_t len = (data.size() * 8 - 1) / 5 + 1;
    std::string out;
    out.reserve(len);
    for (size_t n = 0; n < len; ++n) {
        size_t bit = n * 5;
        size_t i = bit / 8;
        unsigned j = bit % 8;
        unsigned c = data[i] >> j;
        if (i + 1 < data.size())
            c |= unsigned(data[i + 1]) << (8 - j);
        out.push_back(characters[c & 0x1f]);
    }
    return out;
}

std::optional<std::string> Base32::decode(std::string_view s, size_t bytes)
{
    if (s.size() != (bytes * 8 - 1) / 5 + 1)
        return std::nullopt;
    std::string out(bytes, '\0');
    for (size_t n = 0; n < s.size(); ++n) {
        auto digit = characters.find(s[n]);
        if (digit == std::string_view::npos)
            return std::nullopt;
        size_t bit = n * 5;
        size_t i = bit / 8;
        unsigned j = bit % 8;
        out[i] = static_cast<char>(static_cast<uint8_t>(out[i]) | (digit << j));
        unsigned carry = static_cast<unsigned>(digit) >> (8 - j);
        if (i + 1 < bytes)
            out[i + 1] = static_cast<char>(static_cast<uint8_t>(out[i + 1]) | carry);
        else if (carry)
            return std::nullopt;
    }
    return out;
}

Sha256Digest sha256(std::string_view data)
{
    Sha256Digest digest;
    unsigned len = 0;
    if (!EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr) || len != digest.size())
        throw Error("ECrypto", "SHA-256 computation failed");
    return digest;
}

StoreDigest fold_digest(const Sha256Digest & digest)
{
    StoreDigest folded{};
    for (size_t i = 0; i < digest.size(); ++i)
        folded[i % folded.size()] ^= digest[i];
    return folded;
}

std::string store_hash32(std::string_view input)
{
    return Base32::encode(fold_digest(sha256(input)));
}

bool valid_hash_part(std::string_view s)
{
    if (s.size() != hash_part_len)
        return false;
    for (char c : s)
        if (!Base32::is_valid_char(c))
            return false;
    return true;
}

bool valid_path_name(std::string_view name)
{
    if (name.empty() || name.front() == '.')
        return false;
    for (char c : name) {
        bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '+'
            || c == '-' || c == '.' || c == '_' || c == '?' || c == '=';
        if (!ok)
            return false;
    }
    return true;
}

std::string normalize_store_root(std::string_view root)
{
    std::string r(root);
    while (r.size() > 1 && r.back() == '/')
        r.pop_back();
    if (r.empty() || r.front() != '/')
        throw BadPath("store root '" + std::string(root) + "' is not absolute");
    if (r == "/")
        throw BadPath("store root cannot be '/'");
    return r;
}

StorePath::StorePath(std::string root, std::string hash_part, std::string name)
    : root_(normalize_store_root(root))
    , hash_(std::move(hash_part))
    , name_(std::move(name))
{
    if (!valid_hash_part(hash_))
        throw BadPath("invalid hash part '" + hash_ + "'");
    if (!valid_path_name(name_))
        throw BadName("invalid store path name '" + name_ + "'");
}

StorePath StorePath::parse(std::string_view rendered)
{
    auto slash = rendered.rfind('/');
    if (slash == std::string_view::npos || slash == 0)
        throw BadPath("'" + std::string(rendered) + "' is not a store path");
    auto base = rendered.substr(slash + 1);
    if (base.size() < hash_part_len + 2 || base[hash_part_len] != '-')
        throw BadPath("'" + std::string(rendered) + "' is not a store path");
    try {
        return StorePath(
            std::string(rendered.substr(0, slash)),
            std::string(base.substr(0, hash_part_len)),
            std::string(base.substr(hash_part_len + 1)));
    } catch (BadName & e) {
        throw BadPath(e.what());
    }
}

StorePath make_store_path(std::string_view type, std::string_view inner, std::string_view store_root, std::string_view name)
{
    if (!valid_path_name(name))
        throw BadName("invalid store path name '" + std::string(name) + "'");
    auto root = normalize_store_root(store_root);
    Fingerprint fp{std::string(type), store_hash32(inner), root, std::string(name)};
    return StorePath(root, store_hash32(fp.render()), std::string(name));
}

} // namespace minstore
