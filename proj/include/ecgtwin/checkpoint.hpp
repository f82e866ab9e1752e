#pragma once

// Single-file checkpoint: a text header (JSON) with a section table followed
// by raw little-endian binary payloads. Save -> load round trips bit-exactly
// and the payload digest is verified on load.
//
//   ECGTWIN-CKPT v1\n
//   <uint64 LE header byte count>
//   <header JSON>
//   <payload bytes>

#include "ecgtwin/base_extractor.hpp"
#include "ecgtwin/common.hpp"
#include "ecgtwin/config.hpp"
#include "ecgtwin/diffusion.hpp"
#include "ecgtwin/latent_codec.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace ecgtwin {

struct Checkpoint {
    RunConfig config;
    NormStats stats{};
    bool has_stats = false;
    NoiseSchedule schedule{};
    bool has_schedule = false;
    LatentCodec codec;
    Extractor<float> extractor;
    Predictor<float> predictor;

    std::map<std::string, std::vector<double>> loss_history;  // per training stage

    std::string digest;  // payload digest, filled on save/load

    bool has_vae() const { return !codec.vae.params.value.empty(); }
    bool has_extractor() const { return !extractor.params.value.empty(); }
    bool has_predictor() const { return !predictor.params.value.empty(); }
};

namespace ckpt_detail {

struct SectionWriter {
    std::string payload;
    nlohmann::json table = nlohmann::json::array();

    void add_f32(const std::string& name, const MatF& m) { add(name, "f32", m); }
    void add_f64(const std::string& name, const MatD& m) { add(name, "f64", m); }

    template <class M>
    void add(const std::string& name, const char* dtype, const M& m) {
        nlohmann::json e;
        e["name"] = name;
        e["dtype"] = dtype;
        e["rows"] = m.rows();
        e["cols"] = m.cols();
        e["offset"] = payload.size();
        table.push_back(e);
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                const auto v = m(r, c);
                payload.append(reinterpret_cast<const char*>(&v), sizeof(v));
            }
    }
};

struct SectionReader {
    const std::string& payload;
    std::map<std::string, nlohmann::json> table;

    SectionReader(const std::string& p, const nlohmann::json& t) : payload(p) {
        for (const auto& e : t) table[e.at("name").get<std::string>()] = e;
    }

    bool has(const std::string& name) const { return table.count(name) > 0; }

    MatF f32(const std::string& name) const { return read<float>(name, "f32"); }
    MatD f64(const std::string& name) const { return read<double>(name, "f64"); }

    template <class S>
    Mat<S> read(const std::string& name, const char* dtype) const {
        auto it = table.find(name);
        if (it == table.end()) throw ValidationError("checkpoint: missing section " + name);
        const auto& e = it->second;
        if (e.at("dtype").get<std::string>() != dtype)
            throw ValidationError("checkpoint: dtype mismatch in section " + name);
        const Eigen::Index rows = e.at("rows").get<Eigen::Index>();
        const Eigen::Index cols = e.at("cols").get<Eigen::Index>();
        size_t off = e.at("offset").get<size_t>();
        if (off + sizeof(S) * rows * cols > payload.size())
            throw ValidationError("checkpoint: section out of bounds: " + name);
        Mat<S> m(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) {
                S v;
                std::memcpy(&v, payload.data() + off, sizeof(S));
                off += sizeof(S);
                m(r, c) = v;
            }
        return m;
    }

    // all section names under a prefix, with the prefix stripped
    std::vector<std::string> under(const std::string& prefix) const {
        std::vector<std::string> names;
        for (const auto& [name, e] : table)
            if (name.rfind(prefix, 0) == 0) names.push_back(name.substr(prefix.size()));
        return names;
    }
};

inline void write_store(SectionWriter& w, const std::string& prefix, const ParamStore<float>& ps) {
    for (const auto& [name, m] : ps.value) w.add_f32(prefix + name, m);
    for (const auto& [name, m] : ps.adam_m) w.add_f32(prefix + "opt.m/" + name, m);
    for (const auto& [name, m] : ps.adam_v) w.add_f32(prefix + "opt.v/" + name, m);
}

inline void read_store(const SectionReader& r, const std::string& prefix, ParamStore<float>& ps) {
    for (const auto& name : r.under(prefix)) {
        if (name.rfind("opt.m/", 0) == 0)
            ps.adam_m[name.substr(6)] = r.f32(prefix + name);
        else if (name.rfind("opt.v/", 0) == 0)
            ps.adam_v[name.substr(6)] = r.f32(prefix + name);
        else
            ps.value[name] = r.f32(prefix + name);
    }
}

}  // namespace ckpt_detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    ckpt_detail::SectionWriter w;

    if (ck.has_vae()) {
        ckpt_detail::write_store(w, "vae/", ck.codec.vae.params);
        MatF norm(2, ck.codec.vae.lat_mean.size());
        norm.row(0) = ck.codec.vae.lat_mean.transpose();
        norm.row(1) = ck.codec.vae.lat_std.transpose();
        w.add_f32("vae.norm", norm);
        w.add_f32("vae.lead_scale", ck.codec.vae.lead_scale.transpose());
    }
    if (ck.has_extractor()) ckpt_detail::write_store(w, "extractor/", ck.extractor.params);
    if (ck.has_predictor()) ckpt_detail::write_store(w, "predictor/", ck.predictor.params);
    if (ck.has_schedule) {
        MatD sched(ck.schedule.T, 3);
        sched.col(0) = ck.schedule.beta;
        sched.col(1) = ck.schedule.alpha;
        sched.col(2) = ck.schedule.alpha_bar;
        w.add_f64("schedule", sched);
    }

    nlohmann::json header;
    header["format_version"] = 1;
    header["config"] = ck.config.json();
    header["config_digest"] = ck.config.digest();
    header["sections"] = w.table;
    nlohmann::json meta;
    meta["mode"] = ck.codec.mode == LatentMode::vae ? "vae" : "signal";
    meta["vae_trained"] = ck.codec.vae.trained;
    meta["vae_adam_step"] = ck.codec.vae.params.adam_step;
    meta["extractor_trained"] = ck.extractor.trained;
    meta["extractor_adam_step"] = ck.extractor.params.adam_step;
    meta["extractor_dims"] = {{"d_model", ck.extractor.d_model},
                              {"layers", ck.extractor.layers},
                              {"heads", ck.extractor.heads},
                              {"embed_dim", ck.extractor.embed_dim}};
    meta["predictor_trained"] = ck.predictor.trained;
    meta["predictor_adam_step"] = ck.predictor.params.adam_step;
    meta["predictor_dims"] = {{"d_model", ck.predictor.d_model},
                              {"blocks", ck.predictor.blocks},
                              {"heads", ck.predictor.heads},
                              {"base_dim", ck.predictor.base_dim},
                              {"embed_dim", ck.predictor.embed_dim}};
    meta["has_stats"] = ck.has_stats;
    if (ck.has_stats)
        meta["stats"] = {{"age_mean", ck.stats.age_mean},
                         {"age_std", ck.stats.age_std},
                         {"hr_mean", ck.stats.hr_mean},
                         {"hr_std", ck.stats.hr_std}};
    meta["has_schedule"] = ck.has_schedule;
    if (ck.has_schedule) meta["schedule_T"] = ck.schedule.T;
    meta["loss_history"] = ck.loss_history;
    header["meta"] = meta;
    header["payload_digest"] = hex64(fnv1a64(w.payload.data(), w.payload.size()));

    const std::string header_str = header.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ValidationError("cannot write checkpoint: " + path.string());
    f << "ECGTWIN-CKPT v1\n";
    const uint64_t hsize = header_str.size();
    f.write(reinterpret_cast<const char*>(&hsize), sizeof(hsize));
    f.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    f.write(w.payload.data(), static_cast<std::streamsize>(w.payload.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DependencyError("checkpoint not found: " + path.string());
    std::string magic;
    std::getline(f, magic);
    if (magic != "ECGTWIN-CKPT v1") throw ValidationError("not an ECGTWIN checkpoint: " + path.string());
    uint64_t hsize = 0;
    f.read(reinterpret_cast<char*>(&hsize), sizeof(hsize));
    std::string header_str(hsize, '\0');
    f.read(header_str.data(), static_cast<std::streamsize>(hsize));
    std::string payload((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    nlohmann::json header = nlohmann::json::parse(header_str);
    const std::string want = header.at("payload_digest").get<std::string>();
    const std::string got = hex64(fnv1a64(payload.data(), payload.size()));
    if (want != got)
        throw NumericError("checkpoint digest mismatch (file corrupt): " + path.string());

    Checkpoint ck;
    ck.config = RunConfig(header.at("config"));
    ck.digest = got;
    const auto& meta = header.at("meta");
    ckpt_detail::SectionReader r(payload, header.at("sections"));

    ck.codec.mode = meta.at("mode").get<std::string>() == "signal" ? LatentMode::signal
                                                                   : LatentMode::vae;
    ckpt_detail::read_store(r, "vae/", ck.codec.vae.params);
    if (r.has("vae.norm")) {
        const MatF norm = r.f32("vae.norm");
        ck.codec.vae.lat_mean = norm.row(0).transpose();
        ck.codec.vae.lat_std = norm.row(1).transpose();
    }
    if (r.has("vae.lead_scale")) ck.codec.vae.lead_scale = r.f32("vae.lead_scale").row(0).transpose();
    ck.codec.vae.trained = meta.at("vae_trained").get<bool>();
    ck.codec.vae.params.adam_step = meta.at("vae_adam_step").get<int64_t>();

    ckpt_detail::read_store(r, "extractor/", ck.extractor.params);
    ck.extractor.trained = meta.at("extractor_trained").get<bool>();
    ck.extractor.params.adam_step = meta.at("extractor_adam_step").get<int64_t>();
    ck.extractor.d_model = meta.at("extractor_dims").at("d_model").get<int>();
    ck.extractor.layers = meta.at("extractor_dims").at("layers").get<int>();
    ck.extractor.heads = meta.at("extractor_dims").at("heads").get<int>();
    ck.extractor.embed_dim = meta.at("extractor_dims").at("embed_dim").get<int>();

    ckpt_detail::read_store(r, "predictor/", ck.predictor.params);
    ck.predictor.trained = meta.at("predictor_trained").get<bool>();
    ck.predictor.params.adam_step = meta.at("predictor_adam_step").get<int64_t>();
    ck.predictor.d_model = meta.at("predictor_dims").at("d_model").get<int>();
    ck.predictor.blocks = meta.at("predictor_dims").at("blocks").get<int>();
    ck.predictor.heads = meta.at("predictor_dims").at("heads").get<int>();
    ck.predictor.base_dim = meta.at("predictor_dims").at("base_dim").get<int>();
    ck.predictor.embed_dim = meta.at("predictor_dims").at("embed_dim").get<int>();

    ck.has_stats = meta.at("has_stats").get<bool>();
    if (ck.has_stats) {
        ck.stats.age_mean = meta.at("stats").at("age_mean").get<double>();
        ck.stats.age_std = meta.at("stats").at("age_std").get<double>();
        ck.stats.hr_mean = meta.at("stats").at("hr_mean").get<double>();
        ck.stats.hr_std = meta.at("stats").at("hr_std").get<double>();
    }
    if (meta.contains("loss_history"))
        ck.loss_history =
            meta.at("loss_history").get<std::map<std::string, std::vector<double>>>();
    ck.has_schedule = meta.at("has_schedule").get<bool>();
    if (ck.has_schedule) {
        const MatD sched = r.f64("schedule");
        ck.schedule.T = static_cast<int>(sched.rows());
        ck.schedule.beta = sched.col(0);
        ck.schedule.alpha = sched.col(1);
        ck.schedule.alpha_bar = sched.col(2);
    }
    return ck;
}

}  // namespace ecgtwin
