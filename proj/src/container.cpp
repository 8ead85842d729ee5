#include "container.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace pinv {

namespace {
constexpr char kMagic[8] = {'P', 'A', 'I', 'R', 'I', 'N', 'V', '1'};

void put_u32_le(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
}  // namespace

void save_container(const std::string& path, const Container& c) {
    // Offsets are absolute file offsets. Lay out payloads in name order.
    nlohmann::json index = nlohmann::json::array();
    // First pass with zero offsets to learn the header size; the header length
    // is stable because offsets are written as fixed-width numbers only after
    // the header is sized, so build the index twice.
    auto build_index = [&](std::size_t payload_base) {
        nlohmann::json idx = nlohmann::json::array();
        std::size_t off = payload_base;
        for (const auto& [name, nt] : c.tensors) {
            nlohmann::json e;
            e["dtype"] = nt.dtype;
            e["name"] = name;
            e["offset"] = off;
            e["shape"] = nt.shape;
            idx.push_back(e);
            off += nt.byte_size();
        }
        return idx;
    };
    nlohmann::json header;
    header["meta"] = c.meta;
    header["tensors"] = build_index(0);
    std::string hs = header.dump();
    // Fixing the base can change offset digit counts; iterate until stable.
    std::size_t base = 8 + 4 + hs.size();
    for (int pass = 0; pass < 8; ++pass) {
        header["tensors"] = build_index(base);
        hs = header.dump();
        std::size_t nb = 8 + 4 + hs.size();
        if (nb == base) break;
        base = nb;
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("container: cannot open '" + path + "' for writing");
    std::string head;
    head.append(kMagic, 8);
    put_u32_le(head, static_cast<std::uint32_t>(hs.size()));
    head += hs;
    f.write(head.data(), static_cast<std::streamsize>(head.size()));
    for (const auto& [name, nt] : c.tensors) {
        (void)name;
        if (nt.dtype == "f32")
            f.write(reinterpret_cast<const char*>(nt.f32.data()),
                    static_cast<std::streamsize>(nt.byte_size()));
        else
            f.write(reinterpret_cast<const char*>(nt.f64.data()),
                    static_cast<std::streamsize>(nt.byte_size()));
    }
    if (!f) throw FormatError("container: write failed for '" + path + "'");
}

Container load_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("container: cannot open '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 12) throw FormatError("container: file too short (" +
                                             std::to_string(bytes.size()) + " bytes)");
    if (std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw FormatError("container: bad magic in '" + path + "'");
    std::uint32_t hlen = get_u32_le(bytes.data() + 8);
    if (12 + static_cast<std::size_t>(hlen) > bytes.size())
        throw FormatError("container: truncated header, need " + std::to_string(12 + hlen) +
                          " bytes, have " + std::to_string(bytes.size()));
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
    } catch (const std::exception& e) {
        throw FormatError(std::string("container: invalid JSON header: ") + e.what());
    }

    Container c;
    if (header.contains("meta")) c.meta = header["meta"];
    std::vector<std::pair<std::size_t, std::size_t>> spans;  // offset, end
    for (const auto& e : header.at("tensors")) {
        NamedTensor nt;
        nt.dtype = e.at("dtype").get<std::string>();
        if (nt.dtype != "f32" && nt.dtype != "f64")
            throw FormatError("container: unknown dtype '" + nt.dtype + "'");
        nt.shape = e.at("shape").get<Shape>();
        std::size_t off = e.at("offset").get<std::size_t>();
        std::size_t n = numel(nt.shape);
        std::size_t bytes_needed = n * (nt.dtype == "f32" ? 4 : 8);
        if (off + bytes_needed > bytes.size())
            throw FormatError("container: tensor '" + e.at("name").get<std::string>() +
                              "' out of bounds, expected " + std::to_string(off + bytes_needed) +
                              " bytes, file has " + std::to_string(bytes.size()));
        spans.emplace_back(off, off + bytes_needed);
        if (nt.dtype == "f32") {
            nt.f32.resize(n);
            std::memcpy(nt.f32.data(), bytes.data() + off, bytes_needed);
        } else {
            nt.f64.resize(n);
            std::memcpy(nt.f64.data(), bytes.data() + off, bytes_needed);
        }
        c.tensors[e.at("name").get<std::string>()] = std::move(nt);
    }
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i)
        if (spans[i].first < spans[i - 1].second)
            throw FormatError("container: overlapping tensor payloads at offset " +
                              std::to_string(spans[i].first));
    return c;
}

}  // namespace pinv
