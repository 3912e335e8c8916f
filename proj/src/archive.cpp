#include "emoface/archive.hpp"

#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace emoface {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'E', 'M', 'F', 'A', 'R', 'C', 'H', '1'};

std::string hash_hex(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}
}  // namespace

void Archive::put(const std::string& name, const Tensor& t) {
    if (!t.defined()) throw IoError("archive: refusing to store undefined tensor '" + name + "'");
    arrays_[name] = t;
}

bool Archive::has(const std::string& name) const { return arrays_.count(name) > 0; }

const Tensor& Archive::get(const std::string& name) const {
    auto it = arrays_.find(name);
    if (it == arrays_.end()) throw IoError("archive: missing array '" + name + "'");
    return it->second;
}

Tensor Archive::get(const std::string& name, const std::vector<int>& expect_shape) const {
    const Tensor& t = get(name);
    if (t.shape() != expect_shape)
        throw ShapeError("archive: array '" + name + "' has shape " + shape_str(t.shape()) +
                         ", expected " + shape_str(expect_shape));
    return t;
}

std::uint64_t Archive::content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : arrays_) {
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(t.data(), sizeof(double) * static_cast<size_t>(t.numel()), h);
    }
    return h;
}

void Archive::save(const std::string& path) const {
    json header;
    header["version"] = "1";
    header["meta"] = json::object();
    for (const auto& [k, v] : meta) header["meta"][k] = v;
    header["arrays"] = json::array();
    std::int64_t offset = 0;
    for (const auto& [name, t] : arrays_) {
        json a;
        a["name"] = name;
        a["shape"] = t.shape();
        a["offset"] = offset;
        a["count"] = t.numel();
        header["arrays"].push_back(a);
        offset += t.numel();
    }
    header["hash"] = hash_hex(content_hash());

    const std::string hs = header.dump();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("archive: cannot open '" + path + "' for writing");
    os.write(kMagic, 8);
    std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
    os.write(reinterpret_cast<const char*>(&hlen), 4);
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : arrays_) {
        (void)name;
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(sizeof(double) * t.numel()));
    }
    if (!os) throw IoError("archive: write failed for '" + path + "'");
}

Archive Archive::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("archive: cannot open '" + path + "'");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw IoError("archive: bad magic in '" + path + "'");
    std::uint32_t hlen = 0;
    is.read(reinterpret_cast<char*>(&hlen), 4);
    std::string hs(hlen, '\0');
    is.read(hs.data(), hlen);
    if (!is) throw IoError("archive: truncated header in '" + path + "'");

    json header = json::parse(hs);
    Archive a;
    for (auto& [k, v] : header.at("meta").items()) a.meta[k] = v.get<std::string>();
    for (const auto& entry : header.at("arrays")) {
        std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        std::int64_t count = entry.at("count").get<std::int64_t>();
        Tensor t(shape);
        if (t.numel() != count)
            throw IoError("archive: shape/count mismatch for '" + entry.at("name").get<std::string>() + "'");
        is.read(reinterpret_cast<char*>(t.mut()),
                static_cast<std::streamsize>(sizeof(double) * count));
        if (!is) throw IoError("archive: truncated data in '" + path + "'");
        a.arrays_[entry.at("name").get<std::string>()] = t;
    }
    const std::string want = header.at("hash").get<std::string>();
    if (hash_hex(a.content_hash()) != want)
        throw IoError("archive: content hash mismatch in '" + path + "'");
    return a;
}

}  // namespace emoface
