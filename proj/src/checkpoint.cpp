#include "emoface/checkpoint.hpp"

#include <cstring>
#include <filesystem>

namespace emoface {

namespace {
constexpr const char* kFormatVersion = "1";
}

void Checkpoint::set_rng(const Rng& rng) {
    std::vector<std::uint64_t> st = rng.state();
    Tensor words({static_cast<int>(st.size())});
    // u64 words survive the f64 payload bit-for-bit via bit_cast semantics.
    for (size_t i = 0; i < st.size(); ++i) {
        double d;
        static_assert(sizeof(d) == sizeof(st[i]));
        std::memcpy(&d, &st[i], sizeof(d));
        words.ref(static_cast<std::int64_t>(i)) = d;
    }
    a_.put("rng_state", words);
}

std::string Checkpoint::kind() const {
    return a_.meta.count("trainer") ? a_.meta.at("trainer") : "";
}

std::int64_t Checkpoint::step() const {
    return a_.meta.count("step") ? std::stoll(a_.meta.at("step")) : 0;
}

RunConfig Checkpoint::config() const {
    if (!a_.meta.count("config")) throw ContractError("checkpoint stores no config");
    return parse_config(a_.meta.at("config"));
}

Rng Checkpoint::rng() const {
    if (!a_.has("rng_state")) throw ContractError("checkpoint stores no rng state");
    const Tensor& words = a_.get("rng_state");
    std::vector<std::uint64_t> st(static_cast<size_t>(words.numel()));
    for (size_t i = 0; i < st.size(); ++i) {
        double d = words.at(static_cast<std::int64_t>(i));
        std::memcpy(&st[i], &d, sizeof(d));
    }
    Rng out(0);
    out.set_state(st);
    return out;
}

void Checkpoint::save(const std::string& path) const {
    Archive a = a_;  // stamp format metadata without mutating the builder
    a.meta["file_kind"] = "checkpoint";
    if (!a.meta.count("format_version")) a.meta["format_version"] = kFormatVersion;
    auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    a.save(path);
}

Checkpoint Checkpoint::load(const std::string& path, const std::string& expect_kind) {
    Checkpoint c;
    c.a_ = Archive::load(path);
    if (c.a_.meta.count("file_kind") == 0 || c.a_.meta.at("file_kind") != "checkpoint")
        throw IoError(path + " is not a checkpoint file");
    if (c.a_.meta.at("format_version") != kFormatVersion)
        throw IoError("unsupported checkpoint format version " +
                      c.a_.meta.at("format_version") + " in " + path);
    if (!expect_kind.empty() && c.kind() != expect_kind)
        throw DependencyError("checkpoint " + path + " was written by trainer '" + c.kind() +
                              "', expected '" + expect_kind + "'");
    return c;
}

}  // namespace emoface
