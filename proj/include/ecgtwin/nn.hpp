#pragma once

// Parameter store, AdamW, and the layer building blocks shared by the VAE,
// the base extractor, the noise predictor and the tag classifiers.

#include "ecgtwin/autodiff.hpp"
#include "ecgtwin/common.hpp"

#include <map>
#include <string>
#include <vector>

namespace ecgtwin {

enum class Init { Zero, Scaled, One };

template <class S>
struct ParamStore {
    std::map<std::string, Mat<S>> value;
    std::map<std::string, Mat<S>> grad;
    std::map<std::string, Mat<S>> adam_m;
    std::map<std::string, Mat<S>> adam_v;
    int64_t adam_step = 0;
    uint64_t init_seed = 1;

    Mat<S>& get_or_init(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init kind) {
        auto it = value.find(name);
        if (it != value.end()) {
            if (it->second.rows() != rows || it->second.cols() != cols)
                throw ValidationError("parameter shape mismatch for " + name);
            return it->second;
        }
        Mat<S> m(rows, cols);
        switch (kind) {
            case Init::Zero: m.setZero(); break;
            case Init::One: m.setOnes(); break;
            case Init::Scaled: {
                // N(0, 1/sqrt(fan_in)); fan_in = rows for [in x out] weights
                Rng rng(derive_seed(init_seed, name));
                rng.fill_normal(m, 1.0 / std::sqrt(static_cast<double>(rows)));
                break;
            }
        }
        return value.emplace(name, std::move(m)).first->second;
    }

    void zero_grad() {
        for (auto& [k, g] : grad) g.setZero();
    }

    void accumulate(const std::string& name, const Mat<S>& g) {
        auto it = grad.find(name);
        if (it == grad.end())
            grad.emplace(name, g);
        else
            it->second += g;
    }

    double grad_norm() const {
        double s = 0;
        for (const auto& [k, g] : grad) s += static_cast<double>(g.squaredNorm());
        return std::sqrt(s);
    }

    void clip_grad_norm(double max_norm) {
        const double n = grad_norm();
        if (n > max_norm && n > 0) {
            const S f = static_cast<S>(max_norm / n);
            for (auto& [k, g] : grad) g *= f;
        }
    }

    void adamw(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
               double weight_decay = 0.0) {
        ++adam_step;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(adam_step));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(adam_step));
        for (auto& [name, p] : value) {
            auto git = grad.find(name);
            if (git == grad.end()) continue;
            const Mat<S>& g = git->second;
            Mat<S>& m = adam_m.try_emplace(name, Mat<S>::Zero(p.rows(), p.cols())).first->second;
            Mat<S>& v = adam_v.try_emplace(name, Mat<S>::Zero(p.rows(), p.cols())).first->second;
            m = static_cast<S>(beta1) * m + static_cast<S>(1.0 - beta1) * g;
            v = static_cast<S>(beta2) * v + static_cast<S>(1.0 - beta2) * g.cwiseProduct(g);
            for (Eigen::Index i = 0; i < p.size(); ++i) {
                const double mh = static_cast<double>(m.data()[i]) / bc1;
                const double vh = static_cast<double>(v.data()[i]) / bc2;
                double upd = mh / (std::sqrt(vh) + eps) + weight_decay * static_cast<double>(p.data()[i]);
                p.data()[i] -= static_cast<S>(lr * upd);
            }
        }
    }

    size_t count() const {
        size_t n = 0;
        for (const auto& [k, v] : value) n += static_cast<size_t>(v.size());
        return n;
    }
};

// Binds store parameters into a tape for one forward pass and harvests the
// gradients back after tape.backward().
template <class S>
struct Ctx {
    Tape<S>& tape;
    ParamStore<S>& store;
    std::vector<std::pair<std::string, int>> bound;

    Ctx(Tape<S>& t, ParamStore<S>& s) : tape(t), store(s) {}

    int p(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init kind) {
        const int id = tape.leaf(store.get_or_init(name, rows, cols, kind));
        bound.emplace_back(name, id);
        return id;
    }

    void harvest() {
        for (const auto& [name, id] : bound)
            if (tape.has_grad(id)) store.accumulate(name, tape.grad(id));
    }
};

// ---------- layers ----------

template <class S>
int linear(Ctx<S>& c, const std::string& prefix, int x, Eigen::Index in, Eigen::Index out,
           bool bias = true, Init winit = Init::Scaled) {
    const int w = c.p(prefix + ".w", in, out, winit);
    int y = c.tape.matmul(x, w);
    if (bias) {
        const int b = c.p(prefix + ".b", 1, out, Init::Zero);
        y = c.tape.add_rowvec(y, b);
    }
    return y;
}

// learnable-affine layer norm (gamma init 1, beta init 0)
template <class S>
int layer_norm_affine(Ctx<S>& c, const std::string& prefix, int x, Eigen::Index d,
                      S eps = S(1e-5)) {
    const int g = c.p(prefix + ".g", 1, d, Init::One);
    const int b = c.p(prefix + ".b", 1, d, Init::Zero);
    int y = c.tape.layer_norm_rows(x, eps);
    y = c.tape.mul_rowvec(y, g);
    return c.tape.add_rowvec(y, b);
}

template <class S>
int multihead_self_attention(Ctx<S>& c, const std::string& prefix, int x, Eigen::Index d,
                             int heads) {
    const Eigen::Index dh = d / heads;
    const int q = linear(c, prefix + ".q", x, d, d);
    const int k = linear(c, prefix + ".k", x, d, d);
    const int v = linear(c, prefix + ".v", x, d, d);
    std::vector<int> outs;
    outs.reserve(heads);
    const S sc = S(1) / std::sqrt(static_cast<S>(dh));
    for (int h = 0; h < heads; ++h) {
        const int qh = c.tape.slice_cols(q, h * dh, dh);
        const int kh = c.tape.slice_cols(k, h * dh, dh);
        const int vh = c.tape.slice_cols(v, h * dh, dh);
        int att = c.tape.matmul(qh, c.tape.transpose(kh));
        att = c.tape.scale(att, sc);
        att = c.tape.softmax_rows(att);
        outs.push_back(c.tape.matmul(att, vh));
    }
    const int cat = heads == 1 ? outs[0] : c.tape.concat_cols(outs);
    return linear(c, prefix + ".o", cat, d, d);
}

// Single-head cross-attention. The full attention map [n_query x n_kv] can be
// captured, or overridden with an externally supplied row-stochastic map while
// the values still come from `cond` (prompt-to-prompt injection).
template <class S>
int cross_attention(Ctx<S>& c, const std::string& prefix, int x, int cond, Eigen::Index d,
                    Mat<S>* captured_map = nullptr, const Mat<S>* override_map = nullptr) {
    const int q = linear(c, prefix + ".q", x, d, d);
    const int k = linear(c, prefix + ".k", cond, d, d);
    const int v = linear(c, prefix + ".v", cond, d, d);
    const S sc = S(1) / std::sqrt(static_cast<S>(d));
    int att = c.tape.matmul(q, c.tape.transpose(k));
    att = c.tape.scale(att, sc);
    att = c.tape.softmax_rows(att);
    if (captured_map) *captured_map = c.tape.val(att);
    if (override_map) {
        if (override_map->rows() != c.tape.val(att).rows())
            throw ValidationError("attention override row count mismatch");
        if (override_map->cols() != c.tape.val(v).rows())
            throw ValidationError("attention override column count mismatch");
        att = c.tape.leaf(*override_map);
    }
    const int out = c.tape.matmul(att, v);
    return linear(c, prefix + ".o", out, d, d);
}

template <class S>
int feed_forward(Ctx<S>& c, const std::string& prefix, int x, Eigen::Index d, Eigen::Index hidden) {
    int y = linear(c, prefix + ".1", x, d, hidden);
    y = c.tape.gelu(y);
    return linear(c, prefix + ".2", y, hidden, d);
}

template <class S>
int conv1d_layer(Ctx<S>& c, const std::string& prefix, int x, Eigen::Index cin, Eigen::Index cout,
                 int k, int stride, int pad) {
    const int w = c.p(prefix + ".w", cout, cin * k, Init::Scaled);
    const int b = c.p(prefix + ".b", cout, 1, Init::Zero);
    return c.tape.conv1d(x, w, b, k, stride, pad);
}

// ---------- fixed embeddings ----------

// standard sinusoidal position table, [n_pos x d]
template <class S>
Mat<S> sinusoidal_position_encoding(Eigen::Index n_pos, Eigen::Index d) {
    Mat<S> pe(n_pos, d);
    for (Eigen::Index pos = 0; pos < n_pos; ++pos) {
        for (Eigen::Index i = 0; i < d; i += 2) {
            const double div = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(d));
            pe(pos, i) = static_cast<S>(std::sin(pos * div));
            if (i + 1 < d) pe(pos, i + 1) = static_cast<S>(std::cos(pos * div));
        }
    }
    return pe;
}

// DiT-style timestep embedding, [1 x d]
template <class S>
Mat<S> timestep_embedding(int t, Eigen::Index d) {
    Mat<S> e(1, d);
    const Eigen::Index half = d / 2;
    for (Eigen::Index i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        e(0, i) = static_cast<S>(std::cos(t * freq));
        e(0, half + i) = static_cast<S>(std::sin(t * freq));
    }
    if (d % 2 == 1) e(0, d - 1) = S(0);
    return e;
}

}  // namespace ecgtwin
