#pragma once

// Stage 1: the individual base extractor. A 3-layer transformer encoder over
// latent position tokens with one cross-attention layer for the reference
// cardiac condition; a learnable summary token pools the sequence into the
// base vector b. Trained with a symmetric InfoNCE objective over same-patient
// record pairs. Also hosts the similarity-score and silhouette consistency
// metrics computed over sets of base vectors.

#include "ecgtwin/autodiff.hpp"
#include "ecgtwin/common.hpp"
#include "ecgtwin/condition_codec.hpp"
#include "ecgtwin/latent_codec.hpp"
#include "ecgtwin/nn.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace ecgtwin {

template <class S>
struct Extractor {
    ParamStore<S> params;
    int d_model = 256;
    int layers = 3;
    int heads = 4;
    int embed_dim = 64;   // report embedding width feeding the condition codec
    bool trained = false;

    // latent tokens: positions become tokens, channels are projected to
    // d_model; condition == nullptr runs the learnable-mask path
    int forward(Ctx<S>& c, const Mat<S>& latent, const CardiacCondition* condition,
                const NormStats& stats) const {
        Tape<S>& t = c.tape;
        const Eigen::Index channels = latent.rows();
        const Eigen::Index positions = latent.cols();

        int x = t.leaf(latent.transpose());  // [positions x channels]
        x = linear(c, "in_proj", x, channels, d_model);
        x = t.add(x, t.leaf(sinusoidal_position_encoding<S>(positions, d_model)));
        const int summary = c.p("summary_token", 1, d_model, Init::Scaled);
        x = t.concat_rows({summary, x});

        for (int l = 0; l < layers; ++l) {
            const std::string pfx = "layer" + std::to_string(l);
            int h = layer_norm_affine(c, pfx + ".ln1", x, d_model);
            h = multihead_self_attention(c, pfx + ".attn", h, d_model, heads);
            x = t.add(x, h);
            h = layer_norm_affine(c, pfx + ".ln2", x, d_model);
            h = feed_forward(c, pfx + ".ff", h, d_model, 4 * d_model);
            x = t.add(x, h);
        }

        int ctxt;
        if (condition) {
            ctxt = build_condition_sequence(c, "cond", *condition, stats, embed_dim, d_model);
        } else {
            ctxt = c.p("mask_embedding", 1, d_model, Init::Scaled);
        }
        int h = layer_norm_affine(c, "xattn.ln", x, d_model);
        h = cross_attention(c, "xattn", h, ctxt, d_model);
        x = t.add(x, h);

        x = layer_norm_affine(c, "final.ln", x, d_model);
        const int pooled = t.slice_rows(x, 0, 1);
        return linear(c, "out_proj", pooled, d_model, d_model);
    }

    int log_tau_node(Ctx<S>& c) const { return c.p("log_tau", 1, 1, Init::Zero); }
};

// b = f_IBE(z_ref, c_ref); condition == nullptr selects the MASK path
template <class S>
Vec<S> extract_base(const Mat<S>& latent, const CardiacCondition* condition,
                    Extractor<S>& extractor, const NormStats& stats) {
    if (!latent.allFinite()) throw NumericError("extract_base: non-finite latent");
    Tape<S> tape;
    Ctx<S> ctx(tape, extractor.params);
    const int b = extractor.forward(ctx, latent, condition, stats);
    return Vec<S>(tape.val(b).row(0).transpose());
}

inline VecF extract_base(const LatentTensor& latent, const CardiacCondition* condition,
                         Extractor<float>& extractor, const NormStats& stats) {
    return extract_base<float>(latent.data, condition, extractor, stats);
}

// ---------- contrastive objective ----------

// Symmetric InfoNCE over cosine similarities. The default denominator sums
// over all j including the positive; literal_eq1 reproduces the printed form
// that skips j == i in the denominator.
template <class S>
int contrastive_loss_node(Tape<S>& t, int b_mat, int bp_mat, int log_tau, bool literal_eq1) {
    const int bn = t.l2_normalize_rows(b_mat);
    const int bpn = t.l2_normalize_rows(bp_mat);
    const int sims = t.matmul(bn, t.transpose(bpn));
    const int inv_tau = t.exp_(t.scale(log_tau, S(-1)));
    const int logits = t.mul_scalar_var(sims, inv_tau);
    const int ce_fwd = t.ce_diag_rows(logits, literal_eq1);
    const int ce_bwd = t.ce_diag_rows(t.transpose(logits), literal_eq1);
    return t.scale(t.add(ce_fwd, ce_bwd), S(0.5));
}

inline double cosine(const VecD& a, const VecD& b) {
    const double na = a.norm(), nb = b.norm();
    if (na < 1e-30 || nb < 1e-30) return 0.0;
    return a.dot(b) / (na * nb);
}

// standalone scalar evaluation used by metrics and tests
inline double contrastive_loss(const std::vector<VecD>& b, const std::vector<VecD>& bp,
                               double tau, bool literal_eq1 = false) {
    const size_t n = b.size();
    if (n != bp.size()) throw ValidationError("contrastive_loss: mismatched batch sizes");
    if (n < 2) throw ValidationError("contrastive_loss: batch must contain >= 2 pairs");
    if (tau <= 0) throw ValidationError("contrastive_loss: temperature must be positive");
    MatD logits(n, n);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) logits(i, j) = cosine(b[i], bp[j]) / tau;
    auto ce = [&](bool transpose) {
        double total = 0;
        for (size_t i = 0; i < n; ++i) {
            double mx = -1e300;
            for (size_t j = 0; j < n; ++j) {
                if (literal_eq1 && j == i) continue;
                mx = std::max(mx, transpose ? logits(j, i) : logits(i, j));
            }
            double z = 0;
            for (size_t j = 0; j < n; ++j) {
                if (literal_eq1 && j == i) continue;
                z += std::exp((transpose ? logits(j, i) : logits(i, j)) - mx);
            }
            total -= logits(i, i) - mx - std::log(z);
        }
        return total / static_cast<double>(n);
    };
    return 0.5 * (ce(false) + ce(true));
}

// ---------- consistency metrics ----------

using VectorSets = std::map<std::string, std::vector<VecD>>;

// mean over vectors of (mean same-patient cosine, self excluded) minus
// (mean cross-patient cosine); include_self restores the printed form
inline double similarity_score(const VectorSets& sets, bool include_self = false) {
    if (sets.size() < 2)
        throw ValidationError("similarity_score: need >= 2 patients (complement undefined)");
    for (const auto& [pid, vecs] : sets)
        if (vecs.empty()) throw ValidationError("similarity_score: empty set for " + pid);

    double total = 0;
    int counted = 0;
    for (const auto& [pid, vecs] : sets) {
        for (size_t i = 0; i < vecs.size(); ++i) {
            double within = 0;
            int nw = 0;
            for (size_t j = 0; j < vecs.size(); ++j) {
                if (!include_self && j == i) continue;
                within += cosine(vecs[i], vecs[j]);
                ++nw;
            }
            if (nw == 0) continue;  // singleton set with self excluded
            double cross = 0;
            int nc = 0;
            for (const auto& [qid, others] : sets) {
                if (qid == pid) continue;
                for (const auto& o : others) {
                    cross += cosine(vecs[i], o);
                    ++nc;
                }
            }
            total += within / nw - cross / nc;
            ++counted;
        }
    }
    if (counted == 0) throw ValidationError("similarity_score: no vector has a same-patient peer");
    return total / counted;
}

// standard mean silhouette with euclidean distances and patient labels
inline double silhouette_coefficient(const VectorSets& sets) {
    if (sets.size() < 2) throw ValidationError("silhouette: need >= 2 clusters");
    std::vector<const std::vector<VecD>*> clusters;
    for (const auto& [pid, vecs] : sets) {
        if (vecs.empty()) throw ValidationError("silhouette: empty cluster " + pid);
        clusters.push_back(&vecs);
    }
    double total = 0;
    int n_points = 0;
    for (size_t ci = 0; ci < clusters.size(); ++ci) {
        const auto& own = *clusters[ci];
        for (size_t i = 0; i < own.size(); ++i) {
            if (own.size() == 1) {
                ++n_points;  // singleton convention: s = 0
                continue;
            }
            double a = 0;
            for (size_t j = 0; j < own.size(); ++j)
                if (j != i) a += (own[i] - own[j]).norm();
            a /= static_cast<double>(own.size() - 1);
            double b = 1e300;
            for (size_t cj = 0; cj < clusters.size(); ++cj) {
                if (cj == ci) continue;
                const auto& other = *clusters[cj];
                double d = 0;
                for (const auto& o : other) d += (own[i] - o).norm();
                b = std::min(b, d / static_cast<double>(other.size()));
            }
            const double m = std::max(a, b);
            total += m > 0 ? (b - a) / m : 0.0;
            ++n_points;
        }
    }
    return total / n_points;
}

// ---------- training ----------

struct ExtractorTrainConfig {
    int epochs = 40;
    int batch = 256;
    double lr = 1e-3;
    double mask_prob = 0.15;
    double tau_init = 0.07;
    bool literal_eq1 = false;
    uint64_t seed = 1;
};

// Pairs index into `corpus`; latents are precomputed deterministic posterior
// means. Each side of a pair is masked independently with mask_prob.
inline TrainLog train_extractor(Extractor<float>& extractor, LatentCodec& codec,
                                const std::vector<EcgRecord>& corpus,
                                const std::vector<std::pair<int, int>>& pairs,
                                const NormStats& stats, const ExtractorTrainConfig& cfg) {
    if (pairs.empty()) throw ValidationError("train_extractor: empty pair set");
    extractor.params.init_seed = derive_seed(cfg.seed, "extractor-init");
    extractor.params.get_or_init("log_tau", 1, 1, Init::Zero)(0, 0) =
        static_cast<float>(std::log(cfg.tau_init));

    // precompute latents once; record indexing keeps this deterministic
    std::vector<MatF> latents(corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i)
        latents[i] = codec.encode(corpus[i].signal, false).data;

    TrainLog log;
    Rng order_rng(derive_seed(cfg.seed, "ext-order"));
    Rng mask_rng(derive_seed(cfg.seed, "ext-mask"));
    std::vector<int> order(pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    // keyed off the persisted optimizer step so resumed runs continue the
    // cosine decay instead of restarting it
    int64_t step = extractor.params.adam_step;
    const int64_t total_steps =
        step + static_cast<int64_t>(cfg.epochs) * ((pairs.size() + cfg.batch - 1) / cfg.batch);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(order);
        double ep_loss = 0;
        int n_batches = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch) {
            const size_t end = std::min(order.size(), start + cfg.batch);
            if (end - start < 2) continue;  // no negatives in a 1-pair batch
            Tape<float> tape;
            Ctx<float> ctx(tape, extractor.params);
            std::vector<int> b_rows, bp_rows;
            for (size_t s = start; s < end; ++s) {
                const auto& [ri, ti] = pairs[order[s]];
                const bool mask_ref = mask_rng.uniform() < cfg.mask_prob;
                const bool mask_tar = mask_rng.uniform() < cfg.mask_prob;
                b_rows.push_back(extractor.forward(
                    ctx, latents[ri], mask_ref ? nullptr : &corpus[ri].condition, stats));
                bp_rows.push_back(extractor.forward(
                    ctx, latents[ti], mask_tar ? nullptr : &corpus[ti].condition, stats));
            }
            const int b_mat = tape.concat_rows(b_rows);
            const int bp_mat = tape.concat_rows(bp_rows);
            const int loss = contrastive_loss_node(tape, b_mat, bp_mat,
                                                   extractor.log_tau_node(ctx), cfg.literal_eq1);
            const double loss_v = tape.scalar(loss);
            if (!std::isfinite(loss_v))
                throw NumericError("train_extractor: loss NaN at epoch " + std::to_string(epoch));
            extractor.params.zero_grad();
            tape.backward(loss);
            ctx.harvest();
            extractor.params.clip_grad_norm(5.0);
            const double lr = cfg.lr * 0.5 *
                              (1.0 + std::cos(M_PI * static_cast<double>(step) / total_steps));
            extractor.params.adamw(lr, 0.9, 0.999, 1e-8, 1e-4);
            float& lt = extractor.params.value.at("log_tau")(0, 0);
            lt = static_cast<float>(clampd(lt, std::log(0.005), std::log(5.0)));
            ++step;
            ep_loss += loss_v;
            ++n_batches;
        }
        log.epoch_loss.push_back(ep_loss / std::max(1, n_batches));
    }
    extractor.trained = true;
    return log;
}

}  // namespace ecgtwin
