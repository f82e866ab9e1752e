#pragma once

// Prompt-to-prompt ECG editing: capture the cross-attention maps of a source
// generation, then regenerate with one appended report token while injecting
// the source maps so structure and identity carry over. Both trajectories
// share the initial latent and the per-step noise draws.

#include "ecgtwin/common.hpp"
#include "ecgtwin/diffusion.hpp"
#include "ecgtwin/signal_forge.hpp"

#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace ecgtwin {

struct EditSpec {
    CardiacCondition source_condition;
    CardiacCondition edited_condition;  // source reports + exactly one appended
    int tau_edit = 0;                   // inject while t < tau_edit
    uint64_t seed = 0;

    // empty new report means the degenerate no-op edit
    static EditSpec appending(const CardiacCondition& source, const std::string& new_report,
                              int tau_edit, uint64_t seed) {
        EditSpec s;
        s.source_condition = source;
        s.edited_condition = source;
        if (!new_report.empty()) s.edited_condition.reports.push_back(new_report);
        s.tau_edit = tau_edit;
        s.seed = seed;
        return s;
    }

    bool degenerate() const { return edited_condition.reports == source_condition.reports; }

    void validate(int T) const {
        if (tau_edit < 0 || tau_edit > T + 1)
            throw ValidationError("EditSpec: tau_edit out of [0, T+1]");
        const auto& src = source_condition.reports;
        const auto& ed = edited_condition.reports;
        if (degenerate()) return;
        if (ed.size() != src.size() + 1)
            throw ValidationError("EditSpec: edited reports must be source plus one appended");
        for (size_t i = 0; i < src.size(); ++i)
            if (ed[i] != src[i])
                throw ValidationError("EditSpec: edited reports must preserve source order");
    }
};

// Eq.13: append the new token's column while t < tau, otherwise pass the
// source map through unchanged. Rows are renormalized after the concat since
// raw concatenation breaks row-stochasticity.
inline MatF edit_function(const MatF& m_t, const MatF& m_star_t, int t, int tau_edit) {
    if (m_star_t.cols() != 1)
        throw ValidationError("edit_function: new-token map must have exactly one column");
    if (m_star_t.rows() != m_t.rows())
        throw ValidationError("edit_function: row count mismatch between maps");
    if (t >= tau_edit) return m_t;
    MatF out(m_t.rows(), m_t.cols() + 1);
    out.leftCols(m_t.cols()) = m_t;
    out.col(m_t.cols()) = m_star_t.col(0);
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const float s = out.row(r).sum();
        if (s > 0) out.row(r) /= s;
    }
    return out;
}

// source generation plus its full per-(block, step) map set
inline std::pair<EcgRecord, AttentionMaps> capture_run(const GenerationRequest& request,
                                                       ModelBundle m) {
    GenerationRequest req = request;
    req.capture_attention = true;
    AttentionMaps maps;
    EcgRecord rec = sample(req, m.sched, m.pred, m.extractor, m.codec, m.stats, m.clamp_c, &maps);
    return {std::move(rec), std::move(maps)};
}

// Algorithm: both branches start from the same z_T; per step the edited
// branch first computes its own maps (for the new token's column), then steps
// with the injected map while keeping V from the edited prompt.
inline std::pair<EcgRecord, EcgRecord> p2p_edit(const EditSpec& spec, const VecF* base,
                                                ModelBundle m,
                                                AttentionMaps* source_maps_out = nullptr) {
    spec.validate(m.sched.T);
    if (!m.pred.trained) throw DependencyError("p2p_edit: predictor untrained");

    GenerationRequest src_req;
    src_req.base = base;
    src_req.target_condition = spec.source_condition;
    src_req.seed = spec.seed;

    if (spec.degenerate()) {
        auto [rec, maps] = capture_run(src_req, m);
        if (source_maps_out) *source_maps_out = std::move(maps);
        return {rec, rec};
    }

    const Eigen::Index channels = m.codec.channels();
    const Eigen::Index positions = m.codec.positions();
    const int n_src =
        std::max<int>(1, static_cast<int>(spec.source_condition.reports.size()));

    MatF z = initial_noise(spec.seed, channels, positions);
    MatF z_star = z;
    AttentionMaps src_maps;
    src_maps.by_step.resize(m.sched.T);
    src_maps.seed = spec.seed;
    src_maps.source_reports = spec.source_condition.reports;

    for (int t = m.sched.T; t >= 1; --t) {
        const MatF xi = t > 1 ? step_noise(spec.seed, t, channels, positions)
                              : MatF::Zero(channels, positions);

        std::vector<MatF> maps_src;
        const MatF z_next = reverse_step(m.pred, m.sched, z, t, base, spec.source_condition,
                                         m.stats, m.clamp_c, xi, &maps_src);

        // the edited branch's own pass supplies the new token's column
        std::vector<MatF> maps_edit;
        predict_noise<float>(m.pred, z_star, t, base, spec.edited_condition, m.stats, &maps_edit);

        std::vector<MatF> inject(maps_src.size());
        for (size_t bl = 0; bl < maps_src.size(); ++bl) {
            const MatF new_col = maps_edit[bl].rightCols(1);
            MatF edited = edit_function(maps_src[bl], new_col, t, spec.tau_edit);
            if (edited.cols() == maps_src[bl].cols()) {
                // past the threshold the new token receives zero attention
                MatF padded(edited.rows(), edited.cols() + 1);
                padded.leftCols(edited.cols()) = edited;
                padded.col(edited.cols()).setZero();
                edited = std::move(padded);
            }
            inject[bl] = std::move(edited);
        }

        z_star = reverse_step(m.pred, m.sched, z_star, t, base, spec.edited_condition, m.stats,
                              m.clamp_c, xi, nullptr, &inject);
        z = z_next;
        src_maps.by_step[t - 1] = std::move(maps_src);
    }

    EcgRecord source;
    source.signal = m.codec.decode(LatentTensor{z, m.codec.mode});
    source.condition = spec.source_condition;
    EcgRecord edited;
    edited.signal = m.codec.decode(LatentTensor{z_star, m.codec.mode});
    edited.condition = spec.edited_condition;
    if (source_maps_out) *source_maps_out = std::move(src_maps);
    return {std::move(source), std::move(edited)};
}

// ---------- attention export ----------
//
// maps.bin holds row-major float32 matrices in (step descending, block) order;
// the JSON index records shapes and byte offsets for plotting tools.
inline void export_attention(const std::filesystem::path& dir, const AttentionMaps& maps) {
    std::filesystem::create_directories(dir);
    std::ofstream bin(dir / "maps.bin", std::ios::binary);
    nlohmann::json index;
    index["seed"] = maps.seed;
    index["reports"] = maps.source_reports;
    index["steps"] = maps.steps();
    index["blocks"] = maps.blocks();
    auto& entries = index["entries"] = nlohmann::json::array();
    uint64_t offset = 0;
    for (int t = maps.steps(); t >= 1; --t) {
        const auto& per_block = maps.by_step[t - 1];
        for (size_t bl = 0; bl < per_block.size(); ++bl) {
            const MatF& mmat = per_block[bl];
            for (Eigen::Index r = 0; r < mmat.rows(); ++r)
                for (Eigen::Index c = 0; c < mmat.cols(); ++c) {
                    const float v = mmat(r, c);
                    bin.write(reinterpret_cast<const char*>(&v), sizeof(float));
                }
            entries.push_back({{"step", t},
                               {"block", bl},
                               {"rows", mmat.rows()},
                               {"cols", mmat.cols()},
                               {"offset", offset}});
            offset += static_cast<uint64_t>(mmat.size()) * sizeof(float);
        }
    }
    std::ofstream f(dir / "attention_index.json");
    f << index.dump(2) << "\n";
}

}  // namespace ecgtwin
