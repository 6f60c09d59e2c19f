#include "cosync/array_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace cosync {

namespace bytes {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

void Reader::need(std::size_t n) const {
    if (pos_ + n > end_) throw ArrayFileError(ArrayFileError::Kind::Format, "truncated data");
}

std::uint8_t Reader::u8() {
    need(1);
    return data_[pos_++];
}

std::uint32_t Reader::u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
    return v;
}

std::uint64_t Reader::u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
    return v;
}

double Reader::f64() { return std::bit_cast<double>(u64()); }

std::string Reader::string() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
}

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArrayFileError(ArrayFileError::Kind::Io, "cannot open " + path.string());
    std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw ArrayFileError(ArrayFileError::Kind::Io, "read failed: " + path.string());
    return data;
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& data) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ArrayFileError(ArrayFileError::Kind::Io, "cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
        out.flush();
        if (!out) throw ArrayFileError(ArrayFileError::Kind::Io, "write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw ArrayFileError(ArrayFileError::Kind::Io, "cannot rename onto " + path.string());
    }
}

}  // namespace bytes

namespace {

constexpr char kMagic[8] = {'C', 'S', 'Y', 'N', 'A', 'R', 'R', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kF64Matrix = 1;
constexpr std::uint8_t kI64Vector = 2;

}  // namespace

std::vector<std::uint8_t> encode_arrays(const ArrayMap& arrays) {
    using namespace bytes;
    std::vector<std::uint8_t> out(kMagic, kMagic + 8);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(arrays.size()));
    for (const auto& [name, value] : arrays) {
        put_string(out, name);
        if (const auto* m = std::get_if<Eigen::MatrixXd>(&value)) {
            put_u8(out, kF64Matrix);
            put_u32(out, 2);
            put_u64(out, static_cast<std::uint64_t>(m->rows()));
            put_u64(out, static_cast<std::uint64_t>(m->cols()));
            for (Eigen::Index r = 0; r < m->rows(); ++r) {
                for (Eigen::Index c = 0; c < m->cols(); ++c) put_f64(out, (*m)(r, c));
            }
        } else {
            const auto& v = std::get<std::vector<std::int64_t>>(value);
            put_u8(out, kI64Vector);
            put_u32(out, 1);
            put_u64(out, v.size());
            for (std::int64_t x : v) put_u64(out, static_cast<std::uint64_t>(x));
        }
    }
    put_u64(out, fnv1a(out.data(), out.size()));
    return out;
}

ArrayMap decode_arrays(const std::vector<std::uint8_t>& data) {
    using Kind = ArrayFileError::Kind;
    if (data.size() < 8 + 4 + 4 + 8 || std::memcmp(data.data(), kMagic, 8) != 0) {
        throw ArrayFileError(Kind::Format, "not an array container (bad magic)");
    }
    const std::size_t body_end = data.size() - 8;
    {
        std::uint64_t stored = 0;
        for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(data[body_end + i]) << (8 * i);
        if (stored != bytes::fnv1a(data.data(), body_end)) throw ArrayFileError(Kind::Format, "checksum mismatch");
    }
    bytes::Reader in(data, body_end);
    for (int i = 0; i < 8; ++i) in.u8();
    if (in.u32() != kVersion) throw ArrayFileError(Kind::Format, "unsupported container version");
    const std::uint32_t count = in.u32();
    ArrayMap out;
    for (std::uint32_t a = 0; a < count; ++a) {
        std::string name = in.string();
        const std::uint8_t dtype = in.u8();
        const std::uint32_t ndim = in.u32();
        if (dtype == kF64Matrix && ndim == 2) {
            const std::uint64_t rows = in.u64();
            const std::uint64_t cols = in.u64();
            if (rows * cols > (body_end - in.position()) / 8) throw ArrayFileError(Kind::Format, "truncated array " + name);
            Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
            for (Eigen::Index r = 0; r < m.rows(); ++r) {
                for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = in.f64();
            }
            out.emplace(std::move(name), std::move(m));
        } else if (dtype == kI64Vector && ndim == 1) {
            const std::uint64_t n = in.u64();
            if (n > (body_end - in.position()) / 8) throw ArrayFileError(Kind::Format, "truncated array " + name);
            std::vector<std::int64_t> v(n);
            for (auto& x : v) x = static_cast<std::int64_t>(in.u64());
            out.emplace(std::move(name), std::move(v));
        } else {
            throw ArrayFileError(Kind::Format, "array '" + name + "': unsupported dtype/ndim");
        }
    }
    if (!in.done()) throw ArrayFileError(Kind::Format, "trailing bytes after arrays");
    return out;
}

void write_arrays(const std::filesystem::path& path, const ArrayMap& arrays) {
    bytes::write_file_atomic(path, encode_arrays(arrays));
}

ArrayMap read_arrays(const std::filesystem::path& path) { return decode_arrays(bytes::read_file(path)); }

}  // namespace cosync
