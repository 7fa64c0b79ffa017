#pragma once
///@file
/// The archive format: a deterministic, bijective serialization of Fso trees.
///
/// Every token is a string framed as a 64-bit little-endian length, the
/// bytes, then zero padding up to an 8-byte boundary:
///
///     archive = "nix-archive-1" node
///     node    = "(" "type" ( regular | symlink | directory ) ")"
///     regular = "regular" [ "executable" "" ] "contents" <bytes>
///     symlink = "symlink" "target" <bytes>
///     directory = "directory" { "entry" "(" "name" <name> "node" node ")" }
///
/// Directory entries appear in strictly ascending byte-wise name order.

#include "minstore/fso.hpp"

#include <string>
#include <string_view>

namespace minstore {

constexpr std::string_view nar_magic = "nix-archive-1";

std::string nar_encode(const Fso & tree);

/// Throws MalformedArchive on any deviation from the grammar, including bad
/// padding, misordered or duplicate entries and trailing bytes.
Fso nar_decode(std::string_view bytes);

} // namespace minstore
