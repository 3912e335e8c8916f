#pragma once

#include <cstdint>
#include <string>

#include "emoface/archive.hpp"
#include "emoface/config.hpp"
#include "emoface/nn.hpp"

namespace emoface {

// Single-file training snapshot: named parameter arrays, Adam moments, an
// optional rng stream, the producing config, and the step counter. Integrity
// rides on the archive's embedded data hash; corruption fails the load.
class Checkpoint {
public:
    void set_kind(const std::string& kind) { a_.meta["trainer"] = kind; }
    void set_step(std::int64_t step) { a_.meta["step"] = std::to_string(step); }
    void set_config(const RunConfig& cfg) { a_.meta["config"] = serialize_config(cfg); }
    void set_rng(const Rng& rng);

    void put_params(const ParamStore& ps, const std::string& prefix) { ps.save_into(a_, prefix); }
    void put_adam(const Adam& opt, const ParamStore& ps, const std::string& prefix) {
        opt.save_into(a_, ps, prefix);
    }

    std::string kind() const;
    std::int64_t step() const;
    RunConfig config() const;
    Rng rng() const;  // ContractError when the checkpoint stored none

    void get_params(ParamStore& ps, const std::string& prefix) const { ps.load_from(a_, prefix); }
    void get_adam(Adam& opt, ParamStore& ps, const std::string& prefix) const {
        opt.load_from(a_, ps, prefix);
    }

    void save(const std::string& path) const;
    // Verifies the format version and, when expect_kind is nonempty, the
    // producing trainer; mismatches raise IoError / DependencyError.
    static Checkpoint load(const std::string& path, const std::string& expect_kind);

    Archive& archive() { return a_; }
    const Archive& archive() const { return a_; }

private:
    Archive a_;
};

}  // namespace emoface
