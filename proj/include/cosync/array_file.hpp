#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

namespace cosync {

/// Little-endian multi-array container. Layout:
///   "CSYNARR1" | u32 version | u32 count |
///   count x ( u32 name_len | name | u8 dtype | u32 ndim | u64 dims... | payload ) |
///   u64 fnv1a(all preceding bytes)
/// dtype 1 = float64 matrix (ndim 2, row-major payload), 2 = int64 vector (ndim 1).
using ArrayValue = std::variant<Eigen::MatrixXd, std::vector<std::int64_t>>;
using ArrayMap = std::map<std::string, ArrayValue>;

class ArrayFileError : public std::runtime_error {
public:
    enum class Kind { Io, Format };
    ArrayFileError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

std::vector<std::uint8_t> encode_arrays(const ArrayMap& arrays);
ArrayMap decode_arrays(const std::vector<std::uint8_t>& bytes);

void write_arrays(const std::filesystem::path& path, const ArrayMap& arrays);
ArrayMap read_arrays(const std::filesystem::path& path);

// Shared byte helpers for the other binary formats.
namespace bytes {
void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v);
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f64(std::vector<std::uint8_t>& out, double v);
void put_string(std::vector<std::uint8_t>& out, const std::string& s);

class Reader {
public:
    Reader(const std::vector<std::uint8_t>& data, std::size_t end) : data_(data), end_(end) {}
    std::uint8_t u8();
    std::uint32_t u32();
    std::uint64_t u64();
    double f64();
    std::string string();
    std::size_t position() const { return pos_; }
    bool done() const { return pos_ == end_; }

private:
    void need(std::size_t n) const;
    const std::vector<std::uint8_t>& data_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t n);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
// Writes to a sibling temp file then renames, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& data);
}  // namespace bytes

}  // namespace cosync
