#include "pvilab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace pvilab {

namespace le {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

void put_f64(std::vector<std::uint8_t>& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

std::span<const std::uint8_t> Reader::take(std::size_t n) {
    if (remaining() < n) {
        throw CheckpointError("truncated input: need " + std::to_string(n) + " bytes at offset " +
                              std::to_string(pos_));
    }
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
}

std::uint8_t Reader::u8() { return take(1)[0]; }

std::uint16_t Reader::u16() {
    auto s = take(2);
    return static_cast<std::uint16_t>(s[0] | (s[1] << 8));
}

std::uint32_t Reader::u32() {
    auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(s[i]) << (8 * i);
    return v;
}

float Reader::f32() { return std::bit_cast<float>(u32()); }

double Reader::f64() {
    auto s = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(s[i]) << (8 * i);
    return std::bit_cast<double>(v);
}

std::string Reader::str(std::size_t n) {
    auto s = take(n);
    return {s.begin(), s.end()};
}

}  // namespace le

std::vector<std::uint8_t> encode_checkpoint(const ParamStore& store) {
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    le::put_u32(out, static_cast<std::uint32_t>(store.size()));
    for (const auto& e : store.entries()) {
        if (e.name.size() > 0xffff) throw CheckpointError("parameter name too long: " + e.name);
        le::put_u16(out, static_cast<std::uint16_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        le::put_u8(out, static_cast<std::uint8_t>(e.value.dtype()));
        le::put_u8(out, e.trainable ? 1 : 0);
        le::put_u8(out, static_cast<std::uint8_t>(e.value.rank()));
        for (auto extent : e.value.shape()) le::put_u32(out, static_cast<std::uint32_t>(extent));
        if (e.value.dtype() == DType::f32) {
            for (double v : e.value.data()) le::put_f32(out, static_cast<float>(v));
        } else {
            for (double v : e.value.data()) le::put_f64(out, v);
        }
    }
    return out;
}

ParamStore decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
        throw CheckpointError("bad checkpoint magic");
    }
    le::Reader in(bytes.subspan(8));
    const std::uint32_t count = in.u32();
    ParamStore store;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = in.str(in.u16());
        const std::uint8_t dt = in.u8();
        if (dt > 1) throw CheckpointError("bad dtype code " + std::to_string(dt) + " for " + name);
        const bool trainable = in.u8() != 0;
        const std::uint8_t rank = in.u8();
        Shape shape(rank);
        for (auto& extent : shape) extent = in.u32();
        std::vector<double> values(shape_numel(shape));
        for (auto& v : values) v = dt == 0 ? static_cast<double>(in.f32()) : in.f64();
        store.add(std::move(name), Tensor::from(std::move(shape), std::move(values), static_cast<DType>(dt)),
                  trainable);
    }
    if (in.remaining() != 0) throw CheckpointError("trailing bytes after checkpoint payload");
    return store;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("write failed for " + path.string());
}

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
    write_file(path, encode_checkpoint(store));
}

ParamStore load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace pvilab
