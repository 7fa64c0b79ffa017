#pragma once
///@file
/// Store hashes and store paths.

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

namespace minstore {

using Sha256Digest = std::array<uint8_t, 32>;

/// 160-bit folded digest used for store hashes.
using StoreDigest = std::array<uint8_t, 20>;

constexpr size_t hash_part_len = 32;

struct Base32
{
    /// omitted: e o u t
    static constexpr std::string_view characters = "0123456789abcdfghijklmnpqrsvwxyz";

    static bool is_valid_char(char c)
    {
        return characters.find(c) != std::string_view::npos;
    }

    /// Character k holds bits [5k, 5k+5) of the input read as a little-endian
    /// integer, i.e. least-significant group first.
    static std::string encode(std::span<const uint8_t> data);

    static std::optional<std::string> decode(std::string_view s, size_t bytes);
};

Sha256Digest sha256(std::string_view data);

/// Folds a digest to 20 bytes by XOR-ing byte i into byte i mod 20.
StoreDigest fold_digest(const Sha256Digest & digest);

/// SHA-256, folded to 160 bits, rendered as exactly 32 base32 characters.
std::string store_hash32(std::string_view input);

/// The all-zero hash part used when hashing modulo self-references.
inline std::string zero_hash_part()
{
    return std::string(hash_part_len, '0');
}

bool valid_hash_part(std::string_view s);

/// Characters [A-Za-z0-9+-._?=], non-empty, no leading '.'.
bool valid_path_name(std::string_view name);

/**
 * A location in a store: `<root>/<hash part>-<name>`. The root is an
 * absolute directory without a trailing slash.
 */
class StorePath
{
public:
    /// Throws BadName on an invalid name, BadPath on a malformed root or hash.
    StorePath(std::string root, std::string hash_part, std::string name);

    /// Parses a rendered path; throws BadPath.
    static StorePath parse(std::string_view rendered);

    const std::string & root() const
    {
        return root_;
    }

    const std::string & hash_part() const
    {
        return hash_;
    }

    const std::string & name() const
    {
        return name_;
    }

    /// "<hash part>-<name>"
    std::string base_name() const
    {
        return hash_ + "-" + name_;
    }

    std::string render() const
    {
        return root_ + "/" + base_name();
    }

    StorePath with_hash(std::string hash_part) const
    {
        return StorePath(root_, std::move(hash_part), name_);
    }

    bool operator==(const StorePath &) const = default;
    std::strong_ordering operator<=>(const StorePath & other) const
    {
        return render() <=> other.render();
    }

private:
    std::string root_;
    std::string hash_;
    std::string name_;
};

/// Validates and normalizes a store root: absolute, no trailing slash.
std::string normalize_store_root(std::string_view root);

/// `type:sha256:<inner hash>:<store root>:<name>`
struct Fingerprint
{
    std::string type;
    std::string inner_hash;
    std::string store_root;
    std::string name;

    std::string render() const
    {
        return type + ":sha256:" + inner_hash + ":" + store_root + ":" + name;
    }
};

/**
 * Computes the store path of an object. `type` is one of "text", "source",
 * "ca", or "output:<output name>". Throws BadName for an invalid name.
 */
StorePath make_store_path(std::string_view type, std::string_view inner, std::string_view store_root, std::string_view name);

} // namespace minstore

template<>
struct std::hash<minstore::StorePath>
{
    size_t operator()(const minstore::StorePath & p) const noexcept
    {
        return std::hash<std::string>{}(p.render());
    }
};
