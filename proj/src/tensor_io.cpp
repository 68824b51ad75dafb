#include "emma/tensor_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "emma/common.hpp"

namespace emma {

namespace {

constexpr char kMagic[4] = {'E', 'M', 'T', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const char* field) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4) throw FormatError(std::string("tensor file: truncated ") + field);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_tensor(const TensorBlob& blob, const std::string& path) {
    std::size_t count = 1;
    for (unsigned int d : blob.dims) count *= d;
    if (count != blob.values.size()) {
        throw ShapeError("save_tensor: dims/payload mismatch");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_tensor: cannot open " + path);
    out.write(kMagic, 4);
    put_u32(out, static_cast<std::uint32_t>(blob.dims.size()));
    for (unsigned int d : blob.dims) put_u32(out, d);
    for (float v : blob.values) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32(out, bits);
    }
    if (!out) throw IoError("save_tensor: write failed for " + path);
}

TensorBlob load_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_tensor: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("tensor file: bad magic");
    }
    const std::uint32_t rank = get_u32(in, "rank");
    if (rank > 8) throw FormatError("tensor file: rank too large");
    TensorBlob blob;
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint32_t d = get_u32(in, "dim");
        blob.dims.push_back(d);
        count *= d;
        if (count > (1u << 28)) throw FormatError("tensor file: dims too large");
    }
    blob.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint32_t bits = get_u32(in, "payload");
        float v;
        std::memcpy(&v, &bits, 4);
        blob.values[i] = v;
    }
    // Reject trailing garbage so dim/payload mismatches are caught both ways.
    char extra;
    if (in.read(&extra, 1); in.gcount() != 0) {
        throw FormatError("tensor file: payload longer than dims imply");
    }
    return blob;
}

}  // namespace emma
