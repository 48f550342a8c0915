#ifndef MOECACHE_ERRORS_HPP
#define MOECACHE_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace moecache
{

/*
 * Every failure raised by the library derives from Error so that the CLI can
 * report it uniformly and exit non-zero.
 */
class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

// A configuration field is out of range. field() names the offending field.
class InvalidConfig : public Error
{
public:
    InvalidConfig(std::string field, std::string const & why)
        : Error("invalid-config: " + field + ": " + why)
        , field_(std::move(field))
        , why_(why)
    {
    }

    std::string const & field() const noexcept { return field_; }
    std::string const & why() const noexcept { return why_; }

private:
    std::string field_;
    std::string why_;
};

// A trace file could not be parsed or violates a RoutingTrace invariant.
class MalformedFile : public Error
{
public:
    MalformedFile(std::size_t line, std::string const & why)
        : Error("malformed-file: line " + std::to_string(line) + ": " + why)
        , line_(line)
    {
    }

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

// An event refers to a layer or expert outside the header's bounds.
class HeaderMismatch : public MalformedFile
{
public:
    using MalformedFile::MalformedFile;
};

class InsufficientTokens : public Error
{
public:
    explicit InsufficientTokens(std::string const & why)
        : Error("insufficient-tokens: " + why)
    {
    }
};

class CapacityTooSmall : public Error
{
public:
    explicit CapacityTooSmall(std::string const & why)
        : Error("capacity-too-small: " + why)
    {
    }
};

class NoEvictable : public Error
{
public:
    explicit NoEvictable(std::string const & why)
        : Error("no-evictable: " + why)
    {
    }
};

class DimensionMismatch : public Error
{
public:
    explicit DimensionMismatch(std::string const & why)
        : Error("dimension-mismatch: " + why)
    {
    }
};

class ShapeMismatch : public Error
{
public:
    explicit ShapeMismatch(std::string const & why)
        : Error("checkpoint-shape-mismatch: " + why)
    {
    }
};

class EmptyDataset : public Error
{
public:
    explicit EmptyDataset(std::string const & why)
        : Error("empty-dataset: " + why)
    {
    }
};

class NonFiniteLoss : public Error
{
public:
    explicit NonFiniteLoss(std::string const & why)
        : Error("non-finite-loss: " + why)
    {
    }
};

class MissingCheckpoint : public Error
{
public:
    explicit MissingCheckpoint(std::string const & why)
        : Error("missing-checkpoint: " + why)
    {
    }
};

} // namespace moecache

#endif
