#include "warpnorm/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>

namespace warpnorm {

namespace {

constexpr const char* kMagic = "WARPNORM-CKPT";
constexpr int kVersion = 1;

const char* endian_tag() {
    return std::endian::native == std::endian::little ? "little" : "big";
}

} // namespace

void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, const Tensor4*>>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw config_error("save_tensors: cannot open '" + path + "'");
    out << kMagic << " v" << kVersion << "\n";
    out << "endian " << endian_tag() << "\n";
    out << "count " << tensors.size() << "\n";
    for (const auto& [name, t] : tensors)
        out << name << " " << t->b() << " " << t->c() << " " << t->h() << " " << t->w() << "\n";
    out << "DATA\n";
    for (const auto& [name, t] : tensors)
        out.write(reinterpret_cast<const char*>(t->data()),
                  static_cast<std::streamsize>(t->size() * sizeof(double)));
    if (!out)
        throw config_error("save_tensors: write failed for '" + path + "'");
}

std::vector<std::pair<std::string, Tensor4>> load_tensors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw config_error("load_tensors: cannot open '" + path + "'");
    std::string magic, version;
    in >> magic >> version;
    if (magic != kMagic || version != "v1")
        throw config_error("load_tensors: '" + path + "' is not a v1 checkpoint");
    std::string key, endian;
    in >> key >> endian;
    if (key != "endian" || endian != endian_tag())
        throw config_error("load_tensors: endianness mismatch in '" + path + "' (" + endian + ")");
    std::size_t count = 0;
    in >> key >> count;
    if (key != "count")
        throw config_error("load_tensors: malformed header in '" + path + "'");
    struct Entry {
        std::string name;
        int b, c, h, w;
    };
    std::vector<Entry> entries(count);
    for (auto& e : entries)
        in >> e.name >> e.b >> e.c >> e.h >> e.w;
    in >> key;
    if (key != "DATA")
        throw config_error("load_tensors: missing DATA marker in '" + path + "'");
    in.get(); // newline
    std::vector<std::pair<std::string, Tensor4>> out;
    out.reserve(count);
    for (const auto& e : entries) {
        Tensor4 t(e.b, e.c, e.h, e.w);
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!in)
            throw config_error("load_tensors: truncated data in '" + path + "' at tensor '" +
                               e.name + "'");
        out.emplace_back(e.name, std::move(t));
    }
    return out;
}

} // namespace warpnorm
