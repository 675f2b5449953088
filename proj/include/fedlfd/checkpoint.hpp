#pragma once

// "FLFD" checkpoint files:
//
//   bytes 0..3   magic "FLFD"
//   u32 LE       format version
//   u64 LE       parameter count N
//   N x f32 LE   parameters
//   UTF-8 JSON footer to end of file: {"name": ..., "shape_meta": [[name, rows, cols], ...]}
//
// Parameters are narrowed to float32 on write; everything in memory is float64.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedlfd/error.hpp"
#include "fedlfd/tensor.hpp"

namespace fedlfd {

inline constexpr std::array<char, 4> kCheckpointMagic{'F', 'L', 'F', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::string name;
    ParamVector params;
};

namespace detail {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <typename T>
T get_le(const std::vector<std::uint8_t>& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw FormatError("checkpoint truncated");
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(in[pos + i]) << (8 * i);
    pos += sizeof(T);
    return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
    std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_le<std::uint64_t>(out, ck.params.size());
    for (double v : ck.params.values())
        detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));

    nlohmann::json footer;
    footer["name"] = ck.name;
    footer["shape_meta"] = nlohmann::json::array();
    for (const auto& l : ck.params.shape()) footer["shape_meta"].push_back({l.name, l.rows, l.cols});
    const std::string text = footer.dump();
    out.insert(out.end(), text.begin(), text.end());
    return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 16 || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()))
        throw FormatError("not an FLFD checkpoint (bad magic)");
    std::size_t pos = 4;
    const auto version = detail::get_le<std::uint32_t>(bytes, pos);
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto count = detail::get_le<std::uint64_t>(bytes, pos);
    if (count > (bytes.size() - pos) / 4) throw FormatError("checkpoint truncated");
    std::vector<double> values;
    values.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i)
        values.push_back(static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, pos))));

    nlohmann::json footer;
    try {
        footer = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad checkpoint footer: ") + e.what());
    }
    std::vector<LayerShape> shape;
    for (const auto& l : footer.at("shape_meta"))
        shape.push_back({l.at(0).get<std::string>(), l.at(1).get<std::size_t>(), l.at(2).get<std::size_t>()});
    try {
        return Checkpoint{footer.value("name", std::string{}), ParamVector(std::move(values), std::move(shape))};
    } catch (const ShapeError& e) {
        throw FormatError(std::string("checkpoint footer disagrees with parameter count: ") + e.what());
    }
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
    const auto bytes = encode_checkpoint(ck);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw NotFoundError("cannot open checkpoint '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace fedlfd
