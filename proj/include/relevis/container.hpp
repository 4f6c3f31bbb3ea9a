#pragma once

// On-disk container shared by model and residualizer files:
//   8-byte magic | u64 LE header length | JSON header (UTF-8) | raw little-endian float32 payload

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"

namespace relevis::container {

using Magic = std::array<char, 8>;

struct Blob {
    nlohmann::json header;
    std::vector<float> payload;
};

inline void write(const std::filesystem::path &path, const Magic &magic, const nlohmann::json &header,
                  std::span<const float> payload) {
    static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    const std::string text = header.dump();
    const std::uint64_t len = text.size();
    out.write(magic.data(), magic.size());
    out.write(reinterpret_cast<const char *>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char *>(payload.data()), static_cast<std::streamsize>(payload.size_bytes()));
    if (!out) throw IoError("write failed for " + path.string());
}

inline Blob read(const std::filesystem::path &path, const Magic &magic) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    Magic got{};
    in.read(got.data(), got.size());
    if (!in || got != magic) throw FormatError(path.string() + ": bad magic");
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char *>(&len), sizeof(len));
    if (!in || len > (1ull << 30)) throw FormatError(path.string() + ": bad header length");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw FormatError(path.string() + ": truncated header");
    Blob blob;
    try {
        blob.header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(path.string() + ": header is not valid JSON (" + e.what() + ")");
    }
    const std::size_t count = blob.header.value("payload_floats", std::size_t{0});
    blob.payload.resize(count);
    in.read(reinterpret_cast<char *>(blob.payload.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw FormatError(path.string() + ": truncated payload");
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes after payload");
    return blob;
}

} // namespace relevis::container
