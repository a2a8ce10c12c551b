#pragma once

// Binary checkpoint codec.
//
//   "PVILAB01"                     8 bytes magic
//   u32 entry count
//   per entry:
//     u16 name length, UTF-8 name bytes
//     u8 dtype (0 = f32, 1 = f64), u8 trainable, u8 rank
//     u32 extent x rank
//     row-major payload (4 or 8 bytes per value)
//
// All integers and floats little-endian.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pvilab/param_store.hpp"

namespace pvilab {

inline constexpr char kCheckpointMagic[8] = {'P', 'V', 'I', 'L', 'A', 'B', '0', '1'};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode_checkpoint(const ParamStore& store);
ParamStore decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path);
ParamStore load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// Little-endian primitive writers/readers shared with the dataset format.
namespace le {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v);
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v);
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_f32(std::vector<std::uint8_t>& out, float v);
void put_f64(std::vector<std::uint8_t>& out, double v);

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
    std::uint8_t u8();
    std::uint16_t u16();
    std::uint32_t u32();
    float f32();
    double f64();
    std::string str(std::size_t n);
    std::size_t remaining() const { return bytes_.size() - pos_; }
    std::size_t position() const { return pos_; }

private:
    std::span<const std::uint8_t> take(std::size_t n);
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace le

}  // namespace pvilab
