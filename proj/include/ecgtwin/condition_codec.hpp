#pragma once

// Cardiac condition encoding: report strings become hashed-trigram embedding
// tokens, demographics become the 3-vector heading p appended to every token,
// and the stacked sequence is projected and position-encoded into the model
// space consumed by cross-attention.

#include "ecgtwin/common.hpp"
#include "ecgtwin/nn.hpp"

#include <algorithm>
#include <cctype>
#include <optional>
#include <string>
#include <vector>

namespace ecgtwin {

struct CardiacCondition {
    std::vector<std::string> reports;
    double age = 0.0;
    int sex = 0;  // 1 male, 0 female
    double heart_rate = 0.0;
};

struct NormStats {
    double age_mean = 0.0;
    double age_std = 1.0;
    double hr_mean = 0.0;
    double hr_std = 1.0;

    void validate() const {
        if (age_std <= 0 || hr_std <= 0) throw ValidationError("NormStats stds must be positive");
    }
};

inline NormStats compute_norm_stats(const std::vector<CardiacCondition>& conditions) {
    if (conditions.empty()) throw ValidationError("cannot compute NormStats from empty corpus");
    double am = 0, hm = 0;
    for (const auto& c : conditions) {
        am += c.age;
        hm += c.heart_rate;
    }
    am /= conditions.size();
    hm /= conditions.size();
    double av = 0, hv = 0;
    for (const auto& c : conditions) {
        av += (c.age - am) * (c.age - am);
        hv += (c.heart_rate - hm) * (c.heart_rate - hm);
    }
    av = std::sqrt(av / conditions.size());
    hv = std::sqrt(hv / conditions.size());
    NormStats s{am, av > 1e-9 ? av : 1.0, hm, hv > 1e-9 ? hv : 1.0};
    return s;
}

// ---------- report embedding ----------
//
// Deterministic feature-hashed bag of character trigrams, L2-normalized.
// Stands in for an external pretrained text embedder; reports here are short
// controlled phrases, so lexical hashing carries the needed signal.
inline VecD embed_report(const std::string& text, int dim) {
    if (dim < 8) throw ValidationError("embed_report: dim must be >= 8");
    VecD v = VecD::Zero(dim);
    if (text.empty()) {
        v(0) = 1.0;  // reserved empty-report vector
        return v;
    }
    std::string s = "#";
    for (char ch : text) s += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    s += "#";
    for (size_t i = 0; i + 3 <= s.size(); ++i) {
        const uint64_t h = fnv1a64(std::string_view(s.data() + i, 3));
        const int idx = static_cast<int>(h % static_cast<uint64_t>(dim));
        const double sign = (h >> 63) ? -1.0 : 1.0;
        v(idx) += sign;
    }
    const double n = v.norm();
    if (n < 1e-12) {
        v.setZero();
        v(static_cast<int>(fnv1a64(text) % static_cast<uint64_t>(dim))) = 1.0;
        return v;
    }
    return v / n;
}

// p = [sex, z(age), z(heart_rate)]
inline VecD encode_demographics(const CardiacCondition& c, const NormStats& stats) {
    stats.validate();
    VecD p(3);
    p(0) = static_cast<double>(c.sex);
    p(1) = (c.age - stats.age_mean) / stats.age_std;
    p(2) = (c.heart_rate - stats.hr_mean) / stats.hr_std;
    return p;
}

// Pre-projection token rows: one row per report, [embed_dim + 3] wide with the
// demographic heading appended to every row. Empty report lists yield no rows;
// the learnable null token is substituted by the sequence builder.
template <class S>
Mat<S> condition_token_rows(const CardiacCondition& c, const NormStats& stats, int embed_dim) {
    const VecD p = encode_demographics(c, stats);
    const Eigen::Index n = static_cast<Eigen::Index>(c.reports.size());
    Mat<S> rows(n, embed_dim + 3);
    for (Eigen::Index i = 0; i < n; ++i) {
        const VecD e = embed_report(c.reports[i], embed_dim);
        for (int j = 0; j < embed_dim; ++j) rows(i, j) = static_cast<S>(e(j));
        for (int j = 0; j < 3; ++j) rows(i, embed_dim + j) = static_cast<S>(p(j));
    }
    return rows;
}

// Builds the condition sequence on a tape: stack(concat(e_i, p)) * W + PE.
// Parameters live under `prefix` in the owning model's store, so the extractor
// and the noise predictor each keep dedicated projection weights.
template <class S>
int build_condition_sequence(Ctx<S>& c, const std::string& prefix, const CardiacCondition& cond,
                             const NormStats& stats, int embed_dim, Eigen::Index d_model) {
    Mat<S> rows = condition_token_rows<S>(cond, stats, embed_dim);
    int toks;
    if (rows.rows() == 0) {
        toks = c.p(prefix + ".null_token", 1, embed_dim + 3, Init::Scaled);
    } else {
        toks = c.tape.leaf(std::move(rows));
    }
    const int w = c.p(prefix + ".w", embed_dim + 3, d_model, Init::Scaled);
    int seq = c.tape.matmul(toks, w);
    const int pe = c.tape.leaf(sinusoidal_position_encoding<S>(c.tape.val(seq).rows(), d_model));
    return c.tape.add(seq, pe);
}

// Convenience wrapper for callers that only need the encoded matrix.
template <class S>
Mat<S> condition_sequence_matrix(ParamStore<S>& store, const std::string& prefix,
                                 const CardiacCondition& cond, const NormStats& stats,
                                 int embed_dim, Eigen::Index d_model) {
    Tape<S> tape;
    Ctx<S> ctx(tape, store);
    const int seq = build_condition_sequence(ctx, prefix, cond, stats, embed_dim, d_model);
    return tape.val(seq);
}

}  // namespace ecgtwin
