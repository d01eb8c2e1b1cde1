#include "gradleak/archive.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace gradleak {

namespace {
constexpr char kMagic[8] = {'G', 'V', 'T', 'E', 'N', 'S', '0', '1'};
}

void ArchiveWriter::add(const std::string& name, const Tensor& t, bool as_f32) {
    require(t.defined(), "archive: undefined tensor for entry '" + name + "'");
    for (const auto& e : entries_)
        require(e.name != name, "archive: duplicate entry name '" + name + "'");
    Pending p;
    p.name = name;
    p.f32 = as_f32;
    p.shape = t.shape();
    p.data.assign(t.values().begin(), t.values().end());
    entries_.push_back(std::move(p));
}

void ArchiveWriter::save(const std::filesystem::path& path) const {
    nlohmann::json header;
    header["entries"] = nlohmann::json::array();
    std::vector<unsigned char> payload;
    for (const auto& e : entries_) {
        const size_t elem = e.f32 ? 4 : 8;
        const uint64_t offset = payload.size();
        const uint64_t len = e.data.size() * elem;
        payload.resize(payload.size() + len);
        unsigned char* dst = payload.data() + offset;
        if (e.f32) {
            for (size_t i = 0; i < e.data.size(); ++i) {
                float f = static_cast<float>(e.data[i]);
                std::memcpy(dst + i * 4, &f, 4);
            }
        } else {
            std::memcpy(dst, e.data.data(), len);
        }
        nlohmann::json je;
        je["name"] = e.name;
        je["dtype"] = e.f32 ? "f32" : "f64";
        je["shape"] = e.shape;
        je["offset"] = offset;
        je["len"] = len;
        header["entries"].push_back(std::move(je));
    }
    const std::string hs = header.dump();
    require(hs.size() <= 0xffffffffu, "archive: header too large");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), "archive: cannot open '" + path.string() + "' for writing");
    out.write(kMagic, 8);
    const uint32_t hlen = static_cast<uint32_t>(hs.size());
    unsigned char lenb[4] = {static_cast<unsigned char>(hlen & 0xff),
                             static_cast<unsigned char>((hlen >> 8) & 0xff),
                             static_cast<unsigned char>((hlen >> 16) & 0xff),
                             static_cast<unsigned char>((hlen >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(lenb), 4);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    require(out.good(), "archive: write failed for '" + path.string() + "'");
}

Archive Archive::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "archive: cannot open '" + path.string() + "'");
    char magic[8];
    in.read(magic, 8);
    require(in.good() && std::memcmp(magic, kMagic, 8) == 0,
            "archive: bad magic in '" + path.string() + "'");
    unsigned char lenb[4];
    in.read(reinterpret_cast<char*>(lenb), 4);
    require(in.good(), "archive: truncated header length");
    const uint32_t hlen = static_cast<uint32_t>(lenb[0]) | (static_cast<uint32_t>(lenb[1]) << 8) |
                          (static_cast<uint32_t>(lenb[2]) << 16) |
                          (static_cast<uint32_t>(lenb[3]) << 24);
    std::string hs(hlen, '\0');
    in.read(hs.data(), hlen);
    require(in.good(), "archive: truncated header");
    nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
    require(!header.is_discarded() && header.contains("entries"),
            "archive: malformed JSON header in '" + path.string() + "'");

    Archive a;
    a.payload_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    for (const auto& je : header["entries"]) {
        Entry e;
        const std::string name = je.at("name").get<std::string>();
        e.dtype = je.at("dtype").get<std::string>();
        require(e.dtype == "f32" || e.dtype == "f64", "archive: unknown dtype '" + e.dtype + "'");
        e.shape = je.at("shape").get<Shape>();
        e.offset = je.at("offset").get<uint64_t>();
        e.len = je.at("len").get<uint64_t>();
        const uint64_t elem = e.dtype == "f32" ? 4 : 8;
        require(e.len == static_cast<uint64_t>(shape_numel(e.shape)) * elem,
                "archive: entry '" + name + "' length disagrees with shape");
        require(e.offset + e.len <= a.payload_.size(),
                "archive: entry '" + name + "' exceeds payload");
        a.order_.push_back(name);
        a.entries_.push_back(std::move(e));
    }
    return a;
}

const Archive::Entry& Archive::find(const std::string& name) const {
    for (size_t i = 0; i < order_.size(); ++i)
        if (order_[i] == name) return entries_[i];
    throw ContractViolation("archive: no entry named '" + name + "'");
}

bool Archive::has(const std::string& name) const {
    for (const auto& n : order_)
        if (n == name) return true;
    return false;
}

Tensor Archive::get(const std::string& name) const {
    const Entry& e = find(name);
    std::vector<double> data(static_cast<size_t>(shape_numel(e.shape)));
    const unsigned char* src = payload_.data() + e.offset;
    if (e.dtype == "f32") {
        for (size_t i = 0; i < data.size(); ++i) {
            float f;
            std::memcpy(&f, src + i * 4, 4);
            data[i] = static_cast<double>(f);
        }
    } else {
        std::memcpy(data.data(), src, data.size() * 8);
    }
    return Tensor::from_data(e.shape, std::move(data));
}

} // namespace gradleak
