#include "csipred/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace csipred {

namespace {

constexpr char kMagic[4] = {'C', 'S', 'C', 'K'};
constexpr std::uint16_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("checkpoint truncated");
    return v;
}

void open_and_check(std::ifstream& is, const std::string& path) {
    is.open(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError(path + ": not a checkpoint file");
    const auto version = get<std::uint16_t>(is);
    if (version != kVersion) throw IoError(path + ": unsupported checkpoint version");
}

nlohmann::json read_header(std::istream& is, const std::string& path) {
    const auto len = get<std::uint32_t>(is);
    std::string buf(len, '\0');
    is.read(buf.data(), len);
    if (!is) throw IoError(path + ": truncated header");
    return nlohmann::json::parse(buf);
}

}  // namespace

void save_checkpoint(const std::string& path, const nlohmann::json& header,
                     const ParamRegistry& reg) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(kMagic, 4);
    put<std::uint16_t>(os, kVersion);
    const std::string hdr = header.dump();
    put<std::uint32_t>(os, static_cast<std::uint32_t>(hdr.size()));
    os.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(reg.items().size()));
    for (const auto& [name, t] : reg.items()) {
        put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) put<std::uint32_t>(os, static_cast<std::uint32_t>(t.dim(i)));
        for (const real_t v : t.data()) put<float>(os, static_cast<float>(v));
    }
    if (!os) throw IoError("failed writing " + path);
}

nlohmann::json load_checkpoint(const std::string& path, ParamRegistry& reg) {
    std::ifstream is;
    open_and_check(is, path);
    nlohmann::json header = read_header(is, path);
    const auto count = get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = get<std::uint16_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto rank = get<std::uint8_t>(is);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<int>(get<std::uint32_t>(is));
        Tensor t = reg.find(name);
        if (t.shape() != shape)
            throw IoError(path + ": parameter " + name + " has shape " + shape_str(shape) +
                          ", expected " + shape_str(t.shape()));
        for (std::int64_t j = 0; j < t.numel(); ++j) t.ptr()[j] = static_cast<real_t>(get<float>(is));
    }
    return header;
}

nlohmann::json peek_checkpoint(const std::string& path) {
    std::ifstream is;
    open_and_check(is, path);
    return read_header(is, path);
}

}  // namespace csipred
