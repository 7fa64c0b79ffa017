#pragma once
///@file

#include <stdexcept>
#include <string>
#include <string_view>

namespace minstore {

/**
 * Base class of every domain error. `code()` is the stable error name
 * (e.g. "EUnknownPath") that the CLI prints and scripts match on.
 */
class Error : public std::runtime_error
{
public:
    Error(std::string_view code, const std::string & msg)
        : std::runtime_error(std::string(code) + ": " + msg)
        , code_(code)
    {
    }

    const std::string & code() const noexcept
    {
        return code_;
    }

private:
    std::string code_;
};

#define MINSTORE_MAKE_ERROR(name)                                   \
    class name : public ::minstore::Error                           \
    {                                                               \
    public:                                                         \
        explicit name(const std::string & msg)                      \
            : ::minstore::Error("E" #name, msg)                     \
        {                                                           \
        }                                                           \
    }

MINSTORE_MAKE_ERROR(UnsupportedNode);
MINSTORE_MAKE_ERROR(MalformedArchive);
MINSTORE_MAKE_ERROR(BadName);
MINSTORE_MAKE_ERROR(BadPath);
MINSTORE_MAKE_ERROR(Io);
MINSTORE_MAKE_ERROR(UnknownPath);
MINSTORE_MAKE_ERROR(RootNameClash);
MINSTORE_MAKE_ERROR(StoreBusy);
MINSTORE_MAKE_ERROR(Parse);
MINSTORE_MAKE_ERROR(Semantic);
MINSTORE_MAKE_ERROR(BuildFailed);
MINSTORE_MAKE_ERROR(MissingOutput);
MINSTORE_MAKE_ERROR(LengthMismatch);
MINSTORE_MAKE_ERROR(AliasedMapping);
MINSTORE_MAKE_ERROR(ClassUnresolvable);
MINSTORE_MAKE_ERROR(GraftLength);
MINSTORE_MAKE_ERROR(RebaseLength);
MINSTORE_MAKE_ERROR(BindFailed);
MINSTORE_MAKE_ERROR(HashMismatch);
MINSTORE_MAKE_ERROR(BadNarInfo);
MINSTORE_MAKE_ERROR(SubstituterUnreachable);
MINSTORE_MAKE_ERROR(ConsensusFailed);

} // namespace minstore
