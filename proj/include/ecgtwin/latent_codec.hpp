#pragma once

// Maps 12x1024 signals to and from the 4x128 diffusion latent space with a
// small 1-D convolutional VAE, or passes signals through untouched in
// signal-space mode. Latents are standardized per channel after training so
// the diffusion noise scale stays sane.

#include "ecgtwin/autodiff.hpp"
#include "ecgtwin/common.hpp"
#include "ecgtwin/nn.hpp"
#include "ecgtwin/signal_forge.hpp"

#include <string>
#include <utility>
#include <vector>

namespace ecgtwin {

enum class LatentMode { vae, signal };

struct LatentTensor {
    MatF data;  // 4x128 (vae) or 12x1024 (signal)
    LatentMode mode = LatentMode::vae;

    void validate() const {
        if (!data.allFinite()) throw NumericError("LatentTensor contains non-finite values");
        if (mode == LatentMode::vae) {
            if (data.rows() == kLeads && data.cols() == kSamples)
                throw ValidationError("latent has signal shape but vae mode");
        }
    }
};

struct TrainLog {
    std::vector<double> epoch_loss;      // primary objective per epoch
    std::vector<double> epoch_aux;       // reconstruction part (vae) or unused
    double wall_seconds = 0.0;
};

template <class S>
struct Vae {
    ParamStore<S> params;
    Vec<S> lat_mean;  // per-channel latent standardization, identity until trained
    Vec<S> lat_std;
    Vec<S> lead_scale;  // per-lead input standardization (training-set RMS)
    bool trained = false;
    int latent_channels = 4;
    int latent_len = 128;

    Vae() {
        lat_mean = Vec<S>::Zero(4);
        lat_std = Vec<S>::Ones(4);
        lead_scale = Vec<S>::Ones(kLeads);
    }

    Mat<S> scale_in(const Mat<S>& x) const {
        Mat<S> y = x;
        for (int l = 0; l < kLeads; ++l) y.row(l) /= lead_scale(l);
        return y;
    }

    Mat<S> scale_out(const Mat<S>& x) const {
        Mat<S> y = x;
        for (int l = 0; l < kLeads; ++l) y.row(l) *= lead_scale(l);
        return y;
    }

    // encoder trunk over the lead-scaled signal -> (mean, logvar), each [4 x 128];
    // posterior head starts at zero and logvar is soft-clamped to (-6, 6)
    std::pair<int, int> encode_dist(Ctx<S>& c, int x) const {
        int h = conv1d_layer(c, "enc0", x, kLeads, 32, 7, 2, 3);
        h = c.tape.silu(h);
        h = conv1d_layer(c, "enc1", h, 32, 64, 7, 2, 3);
        h = c.tape.silu(h);
        h = conv1d_layer(c, "enc2", h, 64, 64, 7, 2, 3);
        h = c.tape.silu(h);
        const int w = c.p("enc3.w", 2 * latent_channels, 64 * 3, Init::Zero);
        const int b = c.p("enc3.b", 2 * latent_channels, 1, Init::Zero);
        h = c.tape.conv1d(h, w, b, 3, 1, 1);
        const int mean = c.tape.slice_rows(h, 0, latent_channels);
        int logvar = c.tape.slice_rows(h, latent_channels, latent_channels);
        logvar = c.tape.scale(c.tape.tanh_(c.tape.scale(logvar, S(1) / S(6))), S(6));
        return {mean, logvar};
    }

    int decode_node(Ctx<S>& c, int z) const {
        int h = conv1d_layer(c, "dec0", z, latent_channels, 64, 3, 1, 1);
        h = c.tape.silu(h);
        h = c.tape.upsample_nearest_cols(h, 2);
        h = conv1d_layer(c, "dec1", h, 64, 64, 7, 1, 3);
        h = c.tape.silu(h);
        h = c.tape.upsample_nearest_cols(h, 2);
        h = conv1d_layer(c, "dec2", h, 64, 32, 7, 1, 3);
        h = c.tape.silu(h);
        h = c.tape.upsample_nearest_cols(h, 2);
        h = conv1d_layer(c, "dec3", h, 32, kLeads, 7, 1, 3);
        return h;
    }

    void materialize() {  // instantiate all parameters once (deterministic init)
        Tape<S> tape;
        Ctx<S> ctx(tape, params);
        const int x = tape.leaf(Mat<S>::Zero(kLeads, kSamples));
        auto [mean, logvar] = encode_dist(ctx, x);
        (void)logvar;
        decode_node(ctx, mean);
    }
};

// ---------- public codec interface ----------

struct LatentCodec {
    LatentMode mode = LatentMode::vae;
    Vae<float> vae;

    LatentTensor encode(const MatF& signal, bool sample = false, uint64_t seed = 0) {
        if (!signal.allFinite()) throw NumericError("encode: non-finite input signal");
        if (signal.rows() != kLeads || signal.cols() != kSamples)
            throw ValidationError("encode: expected 12x1024 signal");
        if (mode == LatentMode::signal) return LatentTensor{signal, LatentMode::signal};

        Tape<float> tape;
        Ctx<float> ctx(tape, vae.params);
        const int x = tape.leaf(vae.scale_in(signal));
        auto [mean_id, logvar_id] = vae.encode_dist(ctx, x);
        MatF z = tape.val(mean_id);
        if (sample) {
            const MatF& lv = tape.val(logvar_id);
            Rng rng(derive_seed(seed, "vae-enc"));
            for (Eigen::Index i = 0; i < z.size(); ++i)
                z.data()[i] += std::exp(0.5f * lv.data()[i]) * static_cast<float>(rng.normal());
        }
        for (Eigen::Index ch = 0; ch < z.rows(); ++ch)
            z.row(ch) = (z.row(ch).array() - vae.lat_mean(ch)) / vae.lat_std(ch);
        return LatentTensor{std::move(z), LatentMode::vae};
    }

    MatF decode(const LatentTensor& latent) {
        latent.validate();
        if (mode == LatentMode::signal) {
            if (latent.mode != LatentMode::signal)
                throw ValidationError("decode: latent mode mismatch (expected signal)");
            return latent.data;
        }
        if (latent.mode != LatentMode::vae)
            throw ValidationError("decode: latent mode mismatch (expected vae)");
        MatF z = latent.data;
        for (Eigen::Index ch = 0; ch < z.rows(); ++ch)
            z.row(ch) = z.row(ch).array() * vae.lat_std(ch) + vae.lat_mean(ch);
        Tape<float> tape;
        Ctx<float> ctx(tape, vae.params);
        const int out = vae.decode_node(ctx, tape.leaf(z));
        return vae.scale_out(tape.val(out));
    }

    // latent channel/rows count as seen by downstream models
    int channels() const { return mode == LatentMode::vae ? vae.latent_channels : kLeads; }
    int positions() const { return mode == LatentMode::vae ? vae.latent_len : kSamples; }
};

// ---------- training ----------

struct VaeTrainConfig {
    int epochs = 30;
    int batch = 16;
    double lr = 1e-3;
    double kl_weight = 1e-4;
    uint64_t seed = 1;
};

inline TrainLog train_vae(LatentCodec& codec, const std::vector<EcgRecord>& corpus,
                          const VaeTrainConfig& cfg) {
    if (corpus.empty()) throw ValidationError("train_vae: empty corpus");
    if (codec.mode == LatentMode::signal)
        throw ValidationError("train_vae: signal-space mode has no VAE to train");
    Vae<float>& vae = codec.vae;
    vae.params.init_seed = derive_seed(cfg.seed, "vae-init");

    // per-lead standardization from training-set RMS
    VecD rms = VecD::Zero(kLeads);
    for (const auto& rec : corpus)
        for (int l = 0; l < kLeads; ++l) rms(l) += rec.signal.row(l).cast<double>().squaredNorm();
    for (int l = 0; l < kLeads; ++l)
        vae.lead_scale(l) =
            static_cast<float>(std::max(1e-3, std::sqrt(rms(l) / (corpus.size() * kSamples))));
    vae.materialize();

    std::vector<MatF> scaled(corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) scaled[i] = vae.scale_in(corpus[i].signal);

    TrainLog log;
    Rng order_rng(derive_seed(cfg.seed, "vae-order"));
    Rng eps_rng(derive_seed(cfg.seed, "vae-eps"));
    std::vector<int> idx(corpus.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    int64_t step = vae.params.adam_step;
    const int64_t total_steps =
        step + static_cast<int64_t>(cfg.epochs) * ((corpus.size() + cfg.batch - 1) / cfg.batch);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(idx);
        double ep_loss = 0, ep_recon = 0;
        int n_batches = 0;
        for (size_t start = 0; start < idx.size(); start += cfg.batch) {
            const size_t end = std::min(idx.size(), start + cfg.batch);
            Tape<float> tape;
            Ctx<float> ctx(tape, vae.params);
            int total = -1;
            double recon_acc = 0;
            for (size_t b = start; b < end; ++b) {
                const int x = tape.leaf(scaled[idx[b]]);
                auto [mean, logvar] = vae.encode_dist(ctx, x);
                MatF eps(vae.latent_channels, vae.latent_len);
                eps_rng.fill_normal(eps);
                int z = tape.cmul(tape.exp_(tape.scale(logvar, 0.5f)), tape.leaf(eps));
                z = tape.add(mean, z);
                const int recon = vae.decode_node(ctx, z);
                int loss = tape.mse(recon, x);
                recon_acc += tape.scalar(loss);
                if (cfg.kl_weight != 0.0) {
                    const int kl = tape.kl_std_normal(mean, logvar);
                    loss = tape.add(loss, tape.scale(kl, static_cast<float>(cfg.kl_weight)));
                }
                total = total < 0 ? loss : tape.add(total, loss);
            }
            const float inv = 1.0f / static_cast<float>(end - start);
            total = tape.scale(total, inv);
            const double batch_loss = tape.scalar(total);
            if (!std::isfinite(batch_loss))
                throw NumericError("train_vae: loss diverged (NaN) at epoch " +
                                   std::to_string(epoch));
            vae.params.zero_grad();
            tape.backward(total);
            ctx.harvest();
            vae.params.clip_grad_norm(10.0);
            const double lr = cfg.lr * (0.05 + 0.95 * 0.5 *
                                                  (1.0 + std::cos(M_PI * static_cast<double>(step) /
                                                                  total_steps)));
            vae.params.adamw(lr);
            ++step;
            ep_loss += batch_loss;
            ep_recon += recon_acc * inv;
            ++n_batches;
        }
        log.epoch_loss.push_back(ep_loss / n_batches);
        log.epoch_aux.push_back(ep_recon / n_batches);
    }

    // per-channel standardization from the training latents
    MatD acc_mean = MatD::Zero(vae.latent_channels, 1);
    MatD acc_sq = MatD::Zero(vae.latent_channels, 1);
    int64_t count = 0;
    for (size_t i = 0; i < corpus.size(); ++i) {
        Tape<float> tape;
        Ctx<float> ctx(tape, vae.params);
        auto [mean, logvar] = vae.encode_dist(ctx, tape.leaf(scaled[i]));
        (void)logvar;
        const MatF& z = tape.val(mean);
        for (Eigen::Index ch = 0; ch < z.rows(); ++ch) {
            acc_mean(ch, 0) += z.row(ch).cast<double>().sum();
            acc_sq(ch, 0) += z.row(ch).cast<double>().squaredNorm();
        }
        count += z.cols();
    }
    for (int ch = 0; ch < vae.latent_channels; ++ch) {
        const double m = acc_mean(ch, 0) / count;
        const double var = acc_sq(ch, 0) / count - m * m;
        vae.lat_mean(ch) = static_cast<float>(m);
        vae.lat_std(ch) = static_cast<float>(std::sqrt(std::max(var, 1e-8)));
    }
    vae.trained = true;
    return log;
}

}  // namespace ecgtwin
