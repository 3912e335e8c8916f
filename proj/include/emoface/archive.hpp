#pragma once

#include <map>
#include <string>

#include "emoface/core.hpp"

namespace emoface {

// Single-file container of named float64 arrays plus a small string-keyed
// metadata table. Layout:
//
//   bytes 0..7   magic "EMFARCH1"
//   bytes 8..11  header length (u32 little-endian)
//   header       JSON: {"version", "meta": {...}, "arrays": [{name, shape,
//                offset, count}...], "hash": "<fnv1a64 of the data section>"}
//   data         concatenated little-endian float64 payloads
//
// The hash is verified on load, so load(save(x)) is bitwise faithful or it
// throws.
class Archive {
public:
    void put(const std::string& name, const Tensor& t);
    bool has(const std::string& name) const;
    const Tensor& get(const std::string& name) const;
    Tensor get(const std::string& name, const std::vector<int>& expect_shape) const;

    std::map<std::string, std::string> meta;
    const std::map<std::string, Tensor>& arrays() const { return arrays_; }

    void save(const std::string& path) const;
    static Archive load(const std::string& path);

    // Hash of the would-be data section; stable content fingerprint.
    std::uint64_t content_hash() const;

private:
    std::map<std::string, Tensor> arrays_;
};

}  // namespace emoface
