#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gradleak/tensor.hpp"

namespace gradleak {

// GVT1 tensor archive:
//   magic "GVTENS01" | u32 LE header length | JSON header | raw payloads
// Header: {"entries":[{"name","dtype":"f32"|"f64","shape",[...],"offset","len"}]}
// with offset/len in bytes relative to the payload region. Round-trips are
// bit-exact for f64 entries.
class ArchiveWriter {
public:
    void add(const std::string& name, const Tensor& t, bool as_f32 = false);
    void save(const std::filesystem::path& path) const;

private:
    struct Pending {
        std::string name;
        bool f32;
        Shape shape;
        std::vector<double> data;
    };
    std::vector<Pending> entries_;
};

class Archive {
public:
    static Archive load(const std::filesystem::path& path);

    bool has(const std::string& name) const;
    Tensor get(const std::string& name) const; // f32 entries widen to double
    const std::vector<std::string>& names() const { return order_; } // header order

private:
    struct Entry {
        std::string dtype;
        Shape shape;
        uint64_t offset = 0;
        uint64_t len = 0;
    };
    std::vector<std::string> order_;
    std::vector<Entry> entries_;
    std::vector<unsigned char> payload_;

    const Entry& find(const std::string& name) const;
};

} // namespace gradleak
