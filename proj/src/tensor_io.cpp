#include "focusdpo/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>

#include "focusdpo/error.hpp"

namespace focusdpo::io {

namespace {

constexpr char kTensorMagic[4] = {'F', 'D', 'T', '1'};
constexpr char kCheckpointMagic[4] = {'F', 'D', 'C', 'K'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    std::string_view take(std::size_t n) {
        if (pos_ + n > bytes_.size()) throw DataError("truncated tensor data");
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint32_t u32() {
        auto s = take(4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[i]);
        return v;
    }
    std::uint64_t u64() {
        auto s = take(8);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[i]);
        return v;
    }
    std::size_t pos() const { return pos_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string encode_tensor(const Tensor& t) {
    std::string out(kTensorMagic, 4);
    out.reserve(8 + 4 * t.rank() + 8 * t.size());
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.dims()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

Tensor decode_tensor(std::string_view bytes, std::size_t* consumed) {
    Reader r(bytes);
    if (r.take(4) != std::string_view(kTensorMagic, 4)) throw DataError("bad tensor magic (expected FDT1)");
    const std::uint32_t ndim = r.u32();
    if (ndim == 0 || ndim > 16) throw DataError("implausible tensor rank " + std::to_string(ndim));
    Dims dims(ndim);
    std::size_t n = 1;
    for (auto& d : dims) {
        d = r.u32();
        if (d == 0) throw DataError("zero tensor dimension");
        n *= d;
    }
    if (n > (bytes.size() - r.pos()) / 8) throw DataError("truncated tensor payload");
    std::vector<double> data(n);
    for (auto& v : data) v = std::bit_cast<double>(r.u64());
    if (consumed) *consumed = r.pos();
    return Tensor(std::move(dims), std::move(data));
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed: " + path.string());
    return bytes;
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) { write_file(path, encode_tensor(t)); }

Tensor read_tensor(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    std::size_t used = 0;
    Tensor t = decode_tensor(bytes, &used);
    if (used != bytes.size()) throw DataError("trailing bytes after tensor in " + path.string());
    return t;
}

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
    nlohmann::json manifest = nlohmann::json::array();
    std::string blobs;
    for (const auto& [name, t] : tensors) {
        manifest.push_back({{"name", name}, {"offset", blobs.size()}, {"dims", t.dims()}});
        blobs += encode_tensor(t);
    }
    const std::string header = manifest.dump();
    std::string out(kCheckpointMagic, 4);
    put_u32(out, static_cast<std::uint32_t>(header.size()));
    out += header;
    out += blobs;
    write_file(path, out);
}

NamedTensors read_checkpoint(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    Reader r(bytes);
    if (r.take(4) != std::string_view(kCheckpointMagic, 4)) throw DataError("bad checkpoint magic in " + path.string());
    const std::uint32_t len = r.u32();
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(r.take(len));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("corrupt checkpoint manifest: " + std::string(e.what()));
    }
    const std::string_view blobs = std::string_view(bytes).substr(r.pos());
    NamedTensors out;
    for (const auto& entry : manifest) {
        const auto offset = entry.at("offset").get<std::size_t>();
        if (offset > blobs.size()) throw DataError("checkpoint offset out of range");
        Tensor t = decode_tensor(blobs.substr(offset));
        if (t.dims() != entry.at("dims").get<Dims>()) throw DataError("checkpoint dims disagree with manifest");
        out.emplace_back(entry.at("name").get<std::string>(), std::move(t));
    }
    return out;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace focusdpo::io
