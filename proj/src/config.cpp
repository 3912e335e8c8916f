#include "emoface/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace emoface {

using nlohmann::json;

namespace {

// Tracks which keys a section consumed so leftovers can be reported.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {}

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(path_ + "." + key + ": " + e.what());
        }
    }

    const json* sub(const char* key) {
        seen_.insert(key);
        if (!j_.contains(key)) return nullptr;
        if (!j_.at(key).is_object()) throw ConfigError(path_ + "." + key + " must be an object");
        return &j_.at(key);
    }

    void finish() {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw ConfigError("unknown config key '" + path_ + "." + it.key() + "'");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void parse_model(const json* j, ModelConfig& m) {
    if (!j) return;
    Section s(*j, "model");
    s.get("vertices", m.vertices);
    s.get("d_id", m.d_id);
    s.get("d_exp", m.d_exp);
    s.get("d_tex", m.d_tex);
    s.get("d_e", m.d_e);
    s.get("resolution", m.resolution);
    s.get("sigma_scale", m.sigma_scale);
    s.get("tau_z", m.tau_z);
    s.get("eps_bg", m.eps_bg);
    s.finish();
}

void parse_data(const json* j, DataConfig& d) {
    if (!j) return;
    Section s(*j, "data");
    s.get("identities", d.identities);
    s.get("held_out_identities", d.held_out_identities);
    s.get("clips_per_combo", d.clips_per_combo);
    s.get("frames_per_clip", d.frames_per_clip);
    s.get("window", d.window);
    s.get("sample_rate", d.sample_rate);
    s.get("fft_size", d.fft_size);
    s.get("hop", d.hop);
    s.get("mel_bins", d.mel_bins);
    s.finish();
}

void parse_eac(const json* j, EacConfig& e) {
    if (!j) return;
    Section s(*j, "eac");
    s.get("d_model", e.d_model);
    s.get("layers", e.layers);
    s.get("heads", e.heads);
    s.get("body", e.body);
    s.get("emotion_encoding", e.emotion_encoding);
    s.get("lr", e.lr);
    s.get("batch", e.batch);
    s.get("steps", e.steps);
    s.get("frames_per_sample", e.frames_per_sample);
    s.get("grad_clip", e.grad_clip);
    s.get("lambda_clip", e.lambda_clip);
    s.get("lambda_emo", e.lambda_emo);
    s.get("lambda_rec", e.lambda_rec);
    s.get("lambda_lm", e.lambda_lm);
    s.get("lambda_reg", e.lambda_reg);
    s.get("use_emo_loss", e.use_emo_loss);
    s.finish();
}

void parse_hef(const json* j, HefConfig& h) {
    if (!j) return;
    Section s(*j, "hef");
    s.get("blocks", h.blocks);
    s.get("base_size", h.base_size);
    s.get("channels", h.channels);
    s.get("d_sty", h.d_sty);
    s.get("lr", h.lr);
    s.get("batch_frames", h.batch_frames);
    s.get("steps", h.steps);
    s.get("lambda_rec", h.lambda_rec);
    s.get("lambda_p", h.lambda_p);
    s.get("lambda_adv", h.lambda_adv);
    s.get("r1_gamma", h.r1_gamma);
    s.get("r1_every", h.r1_every);
    s.get("flow_mode", h.flow_mode);
    s.finish();
}

void parse_train(const json* j, TrainConfig& t) {
    if (!j) return;
    Section s(*j, "train");
    s.get("log_every", t.log_every);
    s.get("ckpt_every", t.ckpt_every);
    s.finish();
}

void parse_eval(const json* j, EvalConfig& e) {
    if (!j) return;
    Section s(*j, "eval");
    s.get("max_clips", e.max_clips);
    s.get("frames_per_clip", e.frames_per_clip);
    s.finish();
}

}  // namespace

RunConfig parse_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config root must be an object");
    RunConfig c;
    Section root(j, "");
    parse_model(root.sub("model"), c.model);
    parse_data(root.sub("data"), c.data);
    parse_eac(root.sub("eac"), c.eac);
    parse_hef(root.sub("hef"), c.hef);
    parse_train(root.sub("train"), c.train);
    parse_eval(root.sub("eval"), c.eval);
    root.get("seed", c.seed);
    root.get("out_dir", c.out_dir);
    root.finish();
    validate_config(c);
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& c) {
    json j;
    j["model"] = {{"vertices", c.model.vertices}, {"d_id", c.model.d_id},
                  {"d_exp", c.model.d_exp},       {"d_tex", c.model.d_tex},
                  {"d_e", c.model.d_e},           {"resolution", c.model.resolution},
                  {"sigma_scale", c.model.sigma_scale}, {"tau_z", c.model.tau_z},
                  {"eps_bg", c.model.eps_bg}};
    j["data"] = {{"identities", c.data.identities},
                 {"held_out_identities", c.data.held_out_identities},
                 {"clips_per_combo", c.data.clips_per_combo},
                 {"frames_per_clip", c.data.frames_per_clip},
                 {"window", c.data.window},
                 {"sample_rate", c.data.sample_rate},
                 {"fft_size", c.data.fft_size},
                 {"hop", c.data.hop},
                 {"mel_bins", c.data.mel_bins}};
    j["eac"] = {{"d_model", c.eac.d_model},
                {"layers", c.eac.layers},
                {"heads", c.eac.heads},
                {"body", c.eac.body},
                {"emotion_encoding", c.eac.emotion_encoding},
                {"lr", c.eac.lr},
                {"batch", c.eac.batch},
                {"steps", c.eac.steps},
                {"frames_per_sample", c.eac.frames_per_sample},
                {"grad_clip", c.eac.grad_clip},
                {"lambda_clip", c.eac.lambda_clip},
                {"lambda_emo", c.eac.lambda_emo},
                {"lambda_rec", c.eac.lambda_rec},
                {"lambda_lm", c.eac.lambda_lm},
                {"lambda_reg", c.eac.lambda_reg},
                {"use_emo_loss", c.eac.use_emo_loss}};
    j["hef"] = {{"blocks", c.hef.blocks},
                {"base_size", c.hef.base_size},
                {"channels", c.hef.channels},
                {"d_sty", c.hef.d_sty},
                {"lr", c.hef.lr},
                {"batch_frames", c.hef.batch_frames},
                {"steps", c.hef.steps},
                {"lambda_rec", c.hef.lambda_rec},
                {"lambda_p", c.hef.lambda_p},
                {"lambda_adv", c.hef.lambda_adv},
                {"r1_gamma", c.hef.r1_gamma},
                {"r1_every", c.hef.r1_every},
                {"flow_mode", c.hef.flow_mode}};
    j["train"] = {{"log_every", c.train.log_every}, {"ckpt_every", c.train.ckpt_every}};
    j["eval"] = {{"max_clips", c.eval.max_clips}, {"frames_per_clip", c.eval.frames_per_clip}};
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    return j.dump(2);
}

void save_config(const RunConfig& c, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write config to '" + path + "'");
    os << serialize_config(c) << "\n";
}

std::string resolve_out_dir(const RunConfig& c) {
    const char* root = std::getenv("EMOFACE_OUT_ROOT");
    if (root != nullptr && root[0] != '\0') return std::string(root) + "/" + c.out_dir;
    return c.out_dir;
}

void validate_config(const RunConfig& c) {
    const ModelConfig& m = c.model;
    if (m.vertices < 200) throw ConfigError("model.vertices must be >= 200");
    if (m.d_id > 3 * m.vertices || m.d_exp > 3 * m.vertices || m.d_tex > 3 * m.vertices)
        throw ConfigError("basis dimension exceeds 3*vertices");
    if (m.d_id < 1 || m.d_exp < 12 || m.d_tex < 1)
        throw ConfigError("model dims must be positive (d_exp >= 12 for the emotion directions)");
    if (m.resolution < 16) throw ConfigError("model.resolution must be >= 16");
    if (c.data.identities < 1) throw ConfigError("data.identities must be >= 1");
    if (c.data.held_out_identities < 0 || c.data.held_out_identities >= c.data.identities)
        throw ConfigError("data.held_out_identities must leave at least one training identity");
    if (c.data.window > c.data.frames_per_clip)
        throw ConfigError("data.window exceeds frames_per_clip");
    if (c.eac.d_model % c.eac.heads != 0) throw ConfigError("eac.d_model must divide eac.heads");
    if (c.eac.body != "transformer" && c.eac.body != "gru" && c.eac.body != "mlp")
        throw ConfigError("eac.body must be transformer|gru|mlp");
    if (c.eac.emotion_encoding != "joint" && c.eac.emotion_encoding != "onehot")
        throw ConfigError("eac.emotion_encoding must be joint|onehot");
    if (static_cast<int>(c.hef.channels.size()) != c.hef.blocks + 1)
        throw ConfigError("hef.channels must list blocks+1 widths");
    if (c.hef.base_size < 4) throw ConfigError("hef.base_size must be >= 4");
    if (c.hef.flow_mode != "full" && c.hef.flow_mode != "no_res" && c.hef.flow_mode != "no_hie")
        throw ConfigError("hef.flow_mode must be full|no_res|no_hie");
    const int out = c.hef.base_size << c.hef.blocks;
    if (out != m.resolution)
        throw ConfigError("hef output " + std::to_string(out) + " != model.resolution " +
                          std::to_string(m.resolution));
}

}  // namespace emoface
