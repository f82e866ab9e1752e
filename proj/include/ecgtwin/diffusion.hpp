#pragma once

// Stage 2: DDPM forward/reverse processes, the DiT-style noise predictor with
// the two-pathway condition injector (cross-attention for the cardiac
// condition sequence, adaptive layer norm for base vector + timestep), the
// denoising training objective, and the ancestral sampler.

#include "ecgtwin/autodiff.hpp"
#include "ecgtwin/base_extractor.hpp"
#include "ecgtwin/common.hpp"
#include "ecgtwin/condition_codec.hpp"
#include "ecgtwin/latent_codec.hpp"
#include "ecgtwin/nn.hpp"

#include <functional>
#include <string>
#include <vector>

namespace ecgtwin {

// ---------- noise schedule ----------

struct NoiseSchedule {
    int T = 0;
    VecD beta;       // beta[t-1] is beta_t
    VecD alpha;      // 1 - beta
    VecD alpha_bar;  // running product

    // alpha_bar_0 := 1 so the t=1 posterior variance is exactly zero
    double abar(int t) const { return t == 0 ? 1.0 : alpha_bar(t - 1); }
    double a(int t) const { return alpha(t - 1); }
    double b(int t) const { return beta(t - 1); }

    double posterior_var(int t) const {
        return (1.0 - a(t)) * (1.0 - abar(t - 1)) / (1.0 - abar(t));
    }

    void validate() const {
        if (T < 1) throw ValidationError("schedule: T must be >= 1");
        for (int t = 1; t <= T; ++t) {
            if (!(b(t) > 0.0 && b(t) < 1.0)) throw ValidationError("schedule: beta out of (0,1)");
            if (t > 1 && b(t) < b(t - 1)) throw ValidationError("schedule: beta must be nondecreasing");
            if (abar(t) >= abar(t - 1)) throw ValidationError("schedule: alpha_bar must decrease");
        }
    }
};

inline NoiseSchedule build_schedule(int T, double beta_start = 8.5e-4, double beta_end = 1.2e-2) {
    if (T < 1) throw ValidationError("build_schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ValidationError("build_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        s.beta(t) = T == 1 ? beta_start
                           : beta_start + (beta_end - beta_start) * static_cast<double>(t) /
                                              static_cast<double>(T - 1);
        s.alpha(t) = 1.0 - s.beta(t);
        prod *= s.alpha(t);
        s.alpha_bar(t) = prod;
    }
    s.validate();
    return s;
}

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
inline MatF forward_diffuse(const MatF& z0, int t, const MatF& eps, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.T) throw ValidationError("forward_diffuse: t out of range");
    if (eps.rows() != z0.rows() || eps.cols() != z0.cols())
        throw ValidationError("forward_diffuse: eps shape mismatch");
    const double ab = sched.abar(t);
    return (std::sqrt(ab) * z0.cast<double>() + std::sqrt(1.0 - ab) * eps.cast<double>())
        .cast<float>();
}

// Eq.6's inner reconstruction: zhat0 = (z_t - sqrt(1-abar_t) eps) / sqrt(abar_t)
inline MatD reconstruct_z0(const MatD& z_t, const MatD& eps_hat, int t, const NoiseSchedule& sched) {
    const double ab = sched.abar(t);
    return (z_t - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
}

// ---------- standalone modulate (Eq.4) ----------

// per-token normalization over the feature axis, then scale/shift
inline MatD modulate(const MatD& z, const VecD& gamma, const VecD& beta, double eps_stab) {
    if (eps_stab <= 0) throw ValidationError("modulate: eps_stab must be positive");
    MatD out(z.rows(), z.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const double mu = z.row(r).mean();
        const double var = (z.row(r).array() - mu).square().sum() / z.cols();
        const double inv = 1.0 / std::sqrt(var + eps_stab);
        for (Eigen::Index c = 0; c < z.cols(); ++c)
            out(r, c) = (z(r, c) - mu) * inv * gamma(c) + beta(c);
    }
    return out;
}

// ---------- noise predictor ----------

template <class S>
struct Predictor {
    ParamStore<S> params;
    int d_model = 256;
    int blocks = 7;
    int heads = 4;
    int base_dim = 256;  // matches the extractor model dimension
    int embed_dim = 64;
    bool trained = false;

    struct StepIO {
        std::vector<Mat<S>>* capture = nullptr;       // one map per block
        const std::vector<Mat<S>>* inject = nullptr;  // override per block
    };

    // z_t: [channels x positions]; base == nullptr means the ZERO base path.
    // Returns a node holding the predicted noise with the same shape.
    int forward(Ctx<S>& c, const Mat<S>& z_t, int t, const Vec<S>* base,
                const CardiacCondition& cond, const NormStats& stats, StepIO io = {},
                std::vector<int>* block_nodes = nullptr) const {
        Tape<S>& tp = c.tape;
        const Eigen::Index channels = z_t.rows();
        const Eigen::Index positions = z_t.cols();

        const int cond_seq = build_condition_sequence(c, "cond", cond, stats, embed_dim, d_model);

        // conditioning vector: timestep embedding + projected base vector
        int t_emb = tp.leaf(timestep_embedding<S>(t, d_model));
        t_emb = linear(c, "t_mlp.1", t_emb, d_model, d_model);
        t_emb = tp.silu(t_emb);
        t_emb = linear(c, "t_mlp.2", t_emb, d_model, d_model);
        Mat<S> base_row(1, base_dim);
        if (base) {
            if (base->size() != base_dim) throw ValidationError("predict_noise: base dim mismatch");
            base_row = base->transpose();
        } else {
            base_row.setZero();
        }
        const int b_proj = linear(c, "base_proj", tp.leaf(base_row), base_dim, d_model);
        const int cvec = tp.silu(tp.add(t_emb, b_proj));

        int x = tp.leaf(z_t.transpose());  // [positions x channels]
        x = linear(c, "in_proj", x, channels, d_model);
        x = tp.add(x, tp.leaf(sinusoidal_position_encoding<S>(positions, d_model)));

        if (io.capture) io.capture->clear();
        for (int bl = 0; bl < blocks; ++bl) {
            const std::string pfx = "block" + std::to_string(bl);
            // adaLN-MLP: 9 chunks = (gamma, beta, alpha) x (self, cross, ff);
            // final layer zero-initialized so every block starts as identity
            const int mod = linear(c, pfx + ".ada", cvec, d_model, 9 * d_model, true, Init::Zero);
            auto chunk = [&](int i) { return tp.slice_cols(mod, i * d_model, d_model); };

            int h = tp.layer_norm_rows(x, S(1e-5));
            h = tp.add_rowvec(tp.mul_rowvec(h, chunk(0)), chunk(1));
            h = multihead_self_attention(c, pfx + ".attn", h, d_model, heads);
            x = tp.add(x, tp.mul_rowvec(h, chunk(2)));

            h = tp.layer_norm_rows(x, S(1e-5));
            h = tp.add_rowvec(tp.mul_rowvec(h, chunk(3)), chunk(4));
            Mat<S> captured;
            const Mat<S>* inject = io.inject ? &(*io.inject)[bl] : nullptr;
            h = cross_attention(c, pfx + ".xattn", h, cond_seq, d_model,
                                io.capture ? &captured : nullptr, inject);
            if (io.capture) io.capture->push_back(std::move(captured));
            x = tp.add(x, tp.mul_rowvec(h, chunk(5)));

            h = tp.layer_norm_rows(x, S(1e-5));
            h = tp.add_rowvec(tp.mul_rowvec(h, chunk(6)), chunk(7));
            h = feed_forward(c, pfx + ".ff", h, d_model, 4 * d_model);
            x = tp.add(x, tp.mul_rowvec(h, chunk(8)));
            if (block_nodes) block_nodes->push_back(x);
        }

        // final modulation + zero-initialized output projection
        const int fmod = linear(c, "final.ada", cvec, d_model, 2 * d_model, true, Init::Zero);
        int h = tp.layer_norm_rows(x, S(1e-5));
        h = tp.add_rowvec(tp.mul_rowvec(h, tp.slice_cols(fmod, 0, d_model)),
                          tp.slice_cols(fmod, d_model, d_model));
        const int out = linear(c, "out_proj", h, d_model, channels, true, Init::Zero);
        return tp.transpose(out);
    }
};

// inference wrapper; checks finiteness per block and reports the first bad one
template <class S>
Mat<S> predict_noise(Predictor<S>& pred, const Mat<S>& z_t, int t, const Vec<S>* base,
                     const CardiacCondition& cond, const NormStats& stats,
                     std::vector<Mat<S>>* capture = nullptr,
                     const std::vector<Mat<S>>* inject = nullptr) {
    Tape<S> tape;
    Ctx<S> ctx(tape, pred.params);
    typename Predictor<S>::StepIO io;
    io.capture = capture;
    io.inject = inject;
    std::vector<int> block_nodes;
    const int out = pred.forward(ctx, z_t, t, base, cond, stats, io, &block_nodes);
    for (size_t bl = 0; bl < block_nodes.size(); ++bl)
        if (!tape.val(block_nodes[bl]).allFinite())
            throw NumericError("predict_noise: non-finite activations in block " +
                               std::to_string(bl));
    return tape.val(out);
}

// ---------- training ----------

struct DiffusionTrainConfig {
    int epochs = 30;
    int batch = 64;
    double lr = 1e-4;
    double base_mask_prob = 0.15;
    double zhat0_clamp = 5.0;
    uint64_t seed = 1;
};

// Pairs index into `corpus`. Latents and base vectors are precomputed with the
// frozen stage-1 models; gradients flow only into the predictor parameters.
inline TrainLog train_diffusion(
    Predictor<float>& pred, Extractor<float>& extractor, LatentCodec& codec,
    const NoiseSchedule& sched, const std::vector<EcgRecord>& corpus,
    const std::vector<std::pair<int, int>>& pairs, const NormStats& stats,
    const DiffusionTrainConfig& cfg,
    const std::function<void(int, Predictor<float>&)>& on_epoch = nullptr) {
    if (pairs.empty()) throw ValidationError("train_diffusion: empty pair set");
    if (!extractor.trained) throw DependencyError("train_diffusion: extractor is not trained");
    if (codec.mode == LatentMode::vae && !codec.vae.trained)
        throw DependencyError("train_diffusion: vae is not trained");
    pred.params.init_seed = derive_seed(cfg.seed, "diff-init");
    pred.base_dim = extractor.d_model;

    std::vector<MatF> latents(corpus.size());
    std::vector<VecF> bases(corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
        latents[i] = codec.encode(corpus[i].signal, false).data;
        bases[i] = extract_base<float>(latents[i], &corpus[i].condition, extractor, stats);
    }

    TrainLog log;
    Rng order_rng(derive_seed(cfg.seed, "diff-order"));
    Rng step_rng(derive_seed(cfg.seed, "diff-step"));
    std::vector<int> order(pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    int64_t step = pred.params.adam_step;
    const int64_t total_steps =
        step + static_cast<int64_t>(cfg.epochs) * ((pairs.size() + cfg.batch - 1) / cfg.batch);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(order);
        double ep_loss = 0;
        int n_batches = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch) {
            const size_t end = std::min(order.size(), start + cfg.batch);
            Tape<float> tape;
            Ctx<float> ctx(tape, pred.params);
            int total = -1;
            for (size_t s = start; s < end; ++s) {
                const auto& [ri, ti] = pairs[order[s]];
                const int t = step_rng.uniform_int(1, sched.T);
                MatF eps(latents[ti].rows(), latents[ti].cols());
                step_rng.fill_normal(eps);
                const MatF z_t = forward_diffuse(latents[ti], t, eps, sched);
                const bool mask_base = step_rng.uniform() < cfg.base_mask_prob;
                const VecF* base = mask_base ? nullptr : &bases[ri];
                const int out =
                    pred.forward(ctx, z_t, t, base, corpus[ti].condition, stats);
                const int loss = tape.mse(out, tape.leaf(eps));
                total = total < 0 ? loss : tape.add(total, loss);
            }
            total = tape.scale(total, 1.0f / static_cast<float>(end - start));
            const double loss_v = tape.scalar(total);
            if (!std::isfinite(loss_v))
                throw NumericError("train_diffusion: loss NaN at epoch " + std::to_string(epoch));
            pred.params.zero_grad();
            tape.backward(total);
            ctx.harvest();
            pred.params.clip_grad_norm(5.0);
            const double lr = cfg.lr * (0.1 + 0.9 * 0.5 *
                                                  (1.0 + std::cos(M_PI * static_cast<double>(step) /
                                                                  total_steps)));
            pred.params.adamw(lr, 0.9, 0.999, 1e-8, 0.0);
            ++step;
            ep_loss += loss_v;
            ++n_batches;
        }
        log.epoch_loss.push_back(ep_loss / std::max(1, n_batches));
        pred.trained = true;  // sampling usable from the first completed epoch
        if (on_epoch) on_epoch(epoch, pred);
    }
    return log;
}

// ---------- sampling ----------

struct GenerationRequest {
    const VecF* base = nullptr;  // nullptr = ZERO base (non-personalized path)
    CardiacCondition target_condition;
    uint64_t seed = 0;
    bool capture_attention = false;
};

// everything a generation-side consumer needs, passed by reference
struct ModelBundle {
    const NoiseSchedule& sched;
    Predictor<float>& pred;
    Extractor<float>& extractor;
    LatentCodec& codec;
    const NormStats& stats;
    double clamp_c = 5.0;
};

struct AttentionMaps {
    // by_step[t-1][block], each [n_latent_tokens x n_cond_tokens]
    std::vector<std::vector<MatF>> by_step;
    uint64_t seed = 0;
    std::vector<std::string> source_reports;

    int steps() const { return static_cast<int>(by_step.size()); }
    int blocks() const { return by_step.empty() ? 0 : static_cast<int>(by_step[0].size()); }
};

// per-step noise comes from a stream derived from (seed, t) so interleaved
// branch runs consume identical draws
inline MatF step_noise(uint64_t seed, int t, Eigen::Index rows, Eigen::Index cols) {
    MatF xi(rows, cols);
    Rng rng(derive_seed(seed, "xi" + std::to_string(t)));
    rng.fill_normal(xi);
    return xi;
}

inline MatF initial_noise(uint64_t seed, Eigen::Index rows, Eigen::Index cols) {
    MatF z(rows, cols);
    Rng rng(derive_seed(seed, "zT"));
    rng.fill_normal(z);
    return z;
}

// One reverse step t -> t-1 (Eqs. 6-7 with zhat0 clamping).
inline MatF reverse_step(Predictor<float>& pred, const NoiseSchedule& sched, const MatF& z_t,
                         int t, const VecF* base, const CardiacCondition& cond,
                         const NormStats& stats, double clamp_c, const MatF& xi,
                         std::vector<MatF>* capture = nullptr,
                         const std::vector<MatF>* inject = nullptr) {
    const MatD eps_hat =
        predict_noise<float>(pred, z_t, t, base, cond, stats, capture, inject).cast<double>();
    const MatD zt = z_t.cast<double>();
    MatD zhat0 = reconstruct_z0(zt, eps_hat, t, sched);
    zhat0 = zhat0.cwiseMax(-clamp_c).cwiseMin(clamp_c);
    const double ab_t = sched.abar(t), ab_prev = sched.abar(t - 1), a_t = sched.a(t);
    const MatD mu = (std::sqrt(a_t) * (1.0 - ab_prev) * zt +
                     std::sqrt(ab_prev) * (1.0 - a_t) * zhat0) /
                    (1.0 - ab_t);
    if (t == 1) return mu.cast<float>();
    const double sigma = std::sqrt(sched.posterior_var(t));
    return (mu + sigma * xi.cast<double>()).cast<float>();
}

inline EcgRecord sample(const GenerationRequest& req, const NoiseSchedule& sched,
                        Predictor<float>& pred, Extractor<float>& extractor, LatentCodec& codec,
                        const NormStats& stats, double clamp_c = 5.0,
                        AttentionMaps* maps_out = nullptr) {
    if (!pred.trained)
        throw DependencyError("sample: predictor has no trained parameters; train stage 2 first");
    const Eigen::Index channels = codec.channels();
    const Eigen::Index positions = codec.positions();
    (void)extractor;

    MatF z = initial_noise(req.seed, channels, positions);
    AttentionMaps maps;
    if (req.capture_attention || maps_out) {
        maps.by_step.resize(sched.T);
        maps.seed = req.seed;
        maps.source_reports = req.target_condition.reports;
    }
    for (int t = sched.T; t >= 1; --t) {
        const MatF xi = t > 1 ? step_noise(req.seed, t, channels, positions)
                              : MatF::Zero(channels, positions);
        std::vector<MatF> captured;
        z = reverse_step(pred, sched, z, t, req.base, req.target_condition, stats, clamp_c, xi,
                         (req.capture_attention || maps_out) ? &captured : nullptr);
        if (req.capture_attention || maps_out) maps.by_step[t - 1] = std::move(captured);
    }

    EcgRecord rec;
    rec.signal = codec.decode(LatentTensor{z, codec.mode});
    rec.condition = req.target_condition;
    if (maps_out) *maps_out = std::move(maps);
    return rec;
}

}  // namespace ecgtwin
