#pragma once

// Reverse-mode autodiff over Eigen matrices. A Tape owns the forward values;
// every op appends a node whose backward closure scatters gradients into its
// parents. Small by design: only the ops the models in this project need.

#include "ecgtwin/common.hpp"

#include <functional>
#include <utility>
#include <vector>

namespace ecgtwin {

template <class S>
class Tape {
public:
    struct Node {
        Mat<S> val;
        Mat<S> grad;  // lazily sized
        std::function<void(Tape&)> back;
    };

    int leaf(Mat<S> v) { return push(std::move(v), nullptr); }

    int leaf_scalar(S v) {
        Mat<S> m(1, 1);
        m(0, 0) = v;
        return push(std::move(m), nullptr);
    }

    Mat<S>& val(int id) { return nodes_[id].val; }
    const Mat<S>& val(int id) const { return nodes_[id].val; }

    Mat<S>& grad(int id) {
        Node& n = nodes_[id];
        if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.val.rows(), n.val.cols());
        return n.grad;
    }

    S scalar(int id) const { return nodes_[id].val(0, 0); }

    bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void backward(int loss_id) {
        grad(loss_id).setOnes();
        for (int i = loss_id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.back && n.grad.size() != 0) {
                cur_ = i;
                n.back(*this);
            }
        }
        cur_ = -1;
    }

    // ---------- arithmetic ----------

    int add(int a, int b) {
        return push(val(a) + val(b), [a, b](Tape& t) {
            t.grad(a) += t.nodes_[t.cur_].grad;
            t.grad(b) += t.nodes_[t.cur_].grad;
        });
    }

    int sub(int a, int b) {
        return push(val(a) - val(b), [a, b](Tape& t) {
            t.grad(a) += t.nodes_[t.cur_].grad;
            t.grad(b) -= t.nodes_[t.cur_].grad;
        });
    }

    int cmul(int a, int b) {
        return push(val(a).cwiseProduct(val(b)), [a, b](Tape& t) {
            const Mat<S>& g = t.nodes_[t.cur_].grad;
            t.grad(a) += g.cwiseProduct(t.val(b));
            t.grad(b) += g.cwiseProduct(t.val(a));
        });
    }

    int scale(int a, S s) {
        return push(val(a) * s, [a, s](Tape& t) { t.grad(a) += t.nodes_[t.cur_].grad * s; });
    }

    // y = a * s, s is a 1x1 node
    int mul_scalar_var(int a, int s) {
        return push(val(a) * scalar(s), [a, s](Tape& t) {
            const Mat<S>& g = t.nodes_[t.cur_].grad;
            t.grad(a) += g * t.scalar(s);
            t.grad(s)(0, 0) += g.cwiseProduct(t.val(a)).sum();
        });
    }

    int matmul(int a, int b) {
        return push(val(a) * val(b), [a, b](Tape& t) {
            const Mat<S>& g = t.nodes_[t.cur_].grad;
            t.grad(a).noalias() += g * t.val(b).transpose();
            t.grad(b).noalias() += t.val(a).transpose() * g;
        });
    }

    int transpose(int a) {
        return push(val(a).transpose(), [a](Tape& t) {
            t.grad(a) += t.nodes_[t.cur_].grad.transpose();
        });
    }

    // broadcast a 1 x d row vector across all rows
    int add_rowvec(int a, int v) {
        Mat<S> y = val(a);
        y.rowwise() += Eigen::RowVector<S, Eigen::Dynamic>(val(v).row(0));
        return push(std::move(y), [a, v](Tape& t) {
            const Mat<S>& g = t.nodes_[t.cur_].grad;
            t.grad(a) += g;
            t.grad(v).row(0) += g.colwise().sum();
        });
    }

    int mul_rowvec(int a, int v) {
        Mat<S> y = val(a);
        for (Eigen::Index c = 0; c < y.cols(); ++c) y.col(c) *= val(v)(0, c);
        return push(std::move(y), [a, v](Tape& t) {
            const Mat<S>& g = t.nodes_[t.cur_].grad;
            Mat<S>& ga = t.grad(a);
            Mat<S>& gv = t.grad(v);
            const Mat<S>& av = t.val(a);
            const Mat<S>& vv = t.val(v);
            for (Eigen::Index c = 0; c < g.cols(); ++c) {
                ga.col(c) += g.col(c) * vv(0, c);
                gv(0, c) += g.col(c).dot(av.col(c));
            }
        });
    }

    // ---------- shape ----------

    int slice_rows(int a, Eigen::Index r0, Eigen::Index n) {
        return push(val(a).middleRows(r0, n), [a, r0, n](Tape& t) {
            t.grad(a).middleRows(r0, n) += t.nodes_[t.cur_].grad;
        });
    }

    int slice_cols(int a, Eigen::Index c0, Eigen::Index n) {
        return push(val(a).middleCols(c0, n), [a, c0, n](Tape& t) {
            t.grad(a).middleCols(c0, n) += t.nodes_[t.cur_].grad;
        });
    }

    int concat_rows(const std::vector<int>& parts) {
        Eigen::Index rows = 0;
        for (int p : parts) rows += val(p).rows();
        Mat<S> y(rows, val(parts[0]).cols());
        Eigen::Index r = 0;
        for (int p : parts) {
            y.middleRows(r, val(p).rows()) = val(p);
            r += val(p).rows();
        }
        return push(std::move(y), [parts](Tape& t) {
            const Mat<S>& g = t.nodes_[t.cur_].grad;
            Eigen::Index r = 0;
            for (int p : parts) {
                const Eigen::Index n = t.val(p).rows();
                t.grad(p) += g.middleRows(r, n);
                r += n;
            }
        });
    }

    int concat_cols(const std::vector<int>& parts) {
        Eigen::Index cols = 0;
        for (int p : parts) cols += val(p).cols();
        Mat<S> y(val(parts[0]).rows(), cols);
        Eigen::Index c = 0;
        for (int p : parts) {
            y.middleCols(c, val(p).cols()) = val(p);
            c += val(p).cols();
        }
        return push(std::move(y), [parts](Tape& t) {
            const Mat<S>& g = t.nodes_[t.cur_].grad;
            Eigen::Index c = 0;
            for (int p : parts) {
                const Eigen::Index n = t.val(p).cols();
                t.grad(p) += g.middleCols(c, n);
                c += n;
            }
        });
    }

    // ---------- nonlinearities ----------

    int silu(int a) {
        Mat<S> y = val(a);
        for (Eigen::Index i = 0; i < y.size(); ++i) {
            const S x = y.data()[i];
            y.data()[i] = x / (S(1) + std::exp(-x));
        }
        return push(std::move(y), [a](Tape& t) {
            const Mat<S>& g = t.nodes_[t.cur_].grad;
            Mat<S>& ga = t.grad(a);
            const Mat<S>& x = t.val(a);
            for (Eigen::Index i = 0; i < g.size(); ++i) {
                const S xi = x.data()[i];
                const S sig = S(1) / (S(1) + std::exp(-xi));
                ga.data()[i] += g.data()[i] * (sig * (S(1) + xi * (S(1) - sig)));
            }
        });
    }

    int gelu(int a) {  // tanh approximation
        const S c0 = S(0.7978845608028654);  // sqrt(2/pi)
        const S c1 = S(0.044715);
        Mat<S> y = val(a);
        for (Eigen::Index i = 0; i < y.size(); ++i) {
            const S x = y.data()[i];
            y.data()[i] = S(0.5) * x * (S(1) + std::tanh(c0 * (x + c1 * x * x * x)));
        }
        return push(std::move(y), [a, c0, c1](Tape& t) {
            const Mat<S>& g = t.nodes_[t.cur_].grad;
            Mat<S>& ga = t.grad(a);
            const Mat<S>& xm = t.val(a);
            for (Eigen::Index i = 0; i < g.size(); ++i) {
                const S x = xm.data()[i];
                const S u = c0 * (x + c1 * x * x * x);
                const S th = std::tanh(u);
                const S du = c0 * (S(1) + S(3) * c1 * x * x);
                ga.data()[i] += g.data()[i] * (S(0.5) * (S(1) + th) + S(0.5) * x * (S(1) - th * th) * du);
            }
        });
    }

    int sigmoid(int a) {
        Mat<S> y = val(a);
        for (Eigen::Index i = 0; i < y.size(); ++i)
            y.data()[i] = S(1) / (S(1) + std::exp(-y.data()[i]));
        const int id = push(std::move(y), nullptr);
        nodes_[id].back = [a, id](Tape& t) {
            const Mat<S>& g = t.nodes_[id].grad;
            const Mat<S>& s = t.nodes_[id].val;
            t.grad(a) += g.cwiseProduct(s.cwiseProduct(Mat<S>::Constant(s.rows(), s.cols(), S(1)) - s));
        };
        return id;
    }

    int tanh_(int a) {
        Mat<S> y = val(a).array().tanh().matrix();
        const int id = push(std::move(y), nullptr);
        nodes_[id].back = [a, id](Tape& t) {
            const Mat<S>& g = t.nodes_[id].grad;
            const Mat<S>& th = t.nodes_[id].val;
            Mat<S>& ga = t.grad(a);
            for (Eigen::Index i = 0; i < g.size(); ++i)
                ga.data()[i] += g.data()[i] * (S(1) - th.data()[i] * th.data()[i]);
        };
        return id;
    }

    int exp_(int a) {
        Mat<S> y = val(a).array().exp().matrix();
        const int id = push(std::move(y), nullptr);
        nodes_[id].back = [a, id](Tape& t) {
            t.grad(a) += t.nodes_[id].grad.cwiseProduct(t.nodes_[id].val);
        };
        return id;
    }

    // ---------- normalizations ----------

    int softmax_rows(int a) {
        Mat<S> y = val(a);
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            const S mx = y.row(r).maxCoeff();
            y.row(r) = (y.row(r).array() - mx).exp();
            y.row(r) /= y.row(r).sum();
        }
        const int id = push(std::move(y), nullptr);
        nodes_[id].back = [a, id](Tape& t) {
            const Mat<S>& g = t.nodes_[id].grad;
            const Mat<S>& p = t.nodes_[id].val;
            Mat<S>& ga = t.grad(a);
            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                const S dot = g.row(r).dot(p.row(r));
                ga.row(r) += (p.row(r).array() * (g.row(r).array() - dot)).matrix();
            }
        };
        return id;
    }

    // per-row (x - mean) / sqrt(var + eps); affine transforms are applied
    // separately so adaLN modulation can reuse this
    int layer_norm_rows(int a, S eps) {
        const Mat<S>& x = val(a);
        const Eigen::Index d = x.cols();
        Mat<S> y(x.rows(), d);
        Mat<S> inv_sd(x.rows(), 1);
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            const S mu = x.row(r).mean();
            const S var = (x.row(r).array() - mu).square().sum() / S(d);
            const S is = S(1) / std::sqrt(var + eps);
            inv_sd(r, 0) = is;
            y.row(r) = (x.row(r).array() - mu) * is;
        }
        const int id = push(std::move(y), nullptr);
        nodes_[id].back = [a, id, inv_sd, d](Tape& t) {
            const Mat<S>& g = t.nodes_[id].grad;
            const Mat<S>& yh = t.nodes_[id].val;
            Mat<S>& ga = t.grad(a);
            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                const S gs = g.row(r).sum();
                const S gy = g.row(r).dot(yh.row(r));
                ga.row(r) += (inv_sd(r, 0) / S(d)) *
                             (S(d) * g.row(r).array() - gs - yh.row(r).array() * gy).matrix();
            }
        };
        return id;
    }

    int l2_normalize_rows(int a, S eps = S(1e-12)) {
        const Mat<S>& x = val(a);
        Mat<S> y(x.rows(), x.cols());
        Mat<S> inv_n(x.rows(), 1);
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            const S n = std::sqrt(x.row(r).squaredNorm() + eps);
            inv_n(r, 0) = S(1) / n;
            y.row(r) = x.row(r) / n;
        }
        const int id = push(std::move(y), nullptr);
        nodes_[id].back = [a, id, inv_n](Tape& t) {
            const Mat<S>& g = t.nodes_[id].grad;
            const Mat<S>& yh = t.nodes_[id].val;
            Mat<S>& ga = t.grad(a);
            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                const S dot = g.row(r).dot(yh.row(r));
                ga.row(r) += inv_n(r, 0) * (g.row(r).array() - yh.row(r).array() * dot).matrix();
            }
        };
        return id;
    }

    // ---------- reductions / losses ----------

    int sum(int a) {
        Mat<S> y(1, 1);
        y(0, 0) = val(a).sum();
        return push(std::move(y), [a](Tape& t) {
            t.grad(a).array() += t.nodes_[t.cur_].grad(0, 0);
        });
    }

    int mean_all(int a) {
        Mat<S> y(1, 1);
        y(0, 0) = val(a).mean();
        const S inv = S(1) / S(val(a).size());
        return push(std::move(y), [a, inv](Tape& t) {
            t.grad(a).array() += t.nodes_[t.cur_].grad(0, 0) * inv;
        });
    }

    // mean over cols -> [rows x 1]   (global average pooling along length)
    int mean_cols(int a) {
        Mat<S> y = val(a).rowwise().mean();
        const S inv = S(1) / S(val(a).cols());
        return push(std::move(y), [a, inv](Tape& t) {
            const Mat<S>& g = t.nodes_[t.cur_].grad;
            t.grad(a).colwise() += Vec<S>(g.col(0) * inv);
        });
    }

    int mse(int a, int b) {
        Mat<S> y(1, 1);
        y(0, 0) = (val(a) - val(b)).squaredNorm() / S(val(a).size());
        const S inv = S(2) / S(val(a).size());
        return push(std::move(y), [a, b, inv](Tape& t) {
            const S g = t.nodes_[t.cur_].grad(0, 0);
            const Mat<S> d = (t.val(a) - t.val(b)) * (inv * g);
            t.grad(a) += d;
            t.grad(b) -= d;
        });
    }

    // mean over rows of -log( exp(x_rr) / sum_j exp(x_rj) ) for a square logits
    // matrix; with exclude_diag the denominator sum skips j == r
    int ce_diag_rows(int a, bool exclude_diag = false) {
        const Mat<S>& x = val(a);
        const Eigen::Index n = x.rows();
        Mat<S> p(n, x.cols());
        S loss = 0;
        for (Eigen::Index r = 0; r < n; ++r) {
            S mx = -std::numeric_limits<S>::infinity();
            for (Eigen::Index j = 0; j < n; ++j)
                if (!(exclude_diag && j == r)) mx = std::max(mx, x(r, j));
            S z = 0;
            for (Eigen::Index j = 0; j < n; ++j) {
                if (exclude_diag && j == r) {
                    p(r, j) = 0;
                    continue;
                }
                p(r, j) = std::exp(x(r, j) - mx);
                z += p(r, j);
            }
            p.row(r) /= z;
            loss -= (x(r, r) - mx - std::log(z));
        }
        Mat<S> y(1, 1);
        y(0, 0) = loss / S(n);
        const int id = push(std::move(y), nullptr);
        nodes_[id].back = [a, id, p, n](Tape& t) {
            const S g = t.nodes_[id].grad(0, 0) / S(n);
            Mat<S> d = p * g;
            for (Eigen::Index r = 0; r < n; ++r) d(r, r) -= g;
            t.grad(a) += d;
        };
        return id;
    }

    // mean elementwise binary cross-entropy with logits against constant targets
    int bce_logits(int a, const Mat<S>& target) {
        const Mat<S>& x = val(a);
        S loss = 0;
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            const S z = x.data()[i];
            const S y = target.data()[i];
            // log(1+exp(z)) - y*z, stable form
            loss += std::max(z, S(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
        }
        Mat<S> out(1, 1);
        out(0, 0) = loss / S(x.size());
        return push(std::move(out), [a, target](Tape& t) {
            const Mat<S>& x = t.val(a);
            const S g = t.nodes_[t.cur_].grad(0, 0) / S(x.size());
            Mat<S>& ga = t.grad(a);
            for (Eigen::Index i = 0; i < x.size(); ++i) {
                const S sig = S(1) / (S(1) + std::exp(-x.data()[i]));
                ga.data()[i] += g * (sig - target.data()[i]);
            }
        });
    }

    // mean over entries of -0.5*(1 + logvar - mean^2 - exp(logvar))
    int kl_std_normal(int mu, int logvar) {
        const Mat<S>& m = val(mu);
        const Mat<S>& lv = val(logvar);
        S kl = 0;
        for (Eigen::Index i = 0; i < m.size(); ++i)
            kl += S(-0.5) * (S(1) + lv.data()[i] - m.data()[i] * m.data()[i] - std::exp(lv.data()[i]));
        Mat<S> y(1, 1);
        y(0, 0) = kl / S(m.size());
        return push(std::move(y), [mu, logvar](Tape& t) {
            const S g = t.nodes_[t.cur_].grad(0, 0) / S(t.val(mu).size());
            t.grad(mu) += g * t.val(mu);
            Mat<S>& glv = t.grad(logvar);
            const Mat<S>& lv = t.val(logvar);
            for (Eigen::Index i = 0; i < lv.size(); ++i)
                glv.data()[i] += g * S(0.5) * (std::exp(lv.data()[i]) - S(1));
        });
    }

    // ---------- convolution ----------

    // x: [Cin x L], w: [Cout x Cin*k], b: [Cout x 1]  -> y: [Cout x Lout]
    // Lout = (L + 2*pad - k)/stride + 1, implemented via im2col
    int conv1d(int x, int w, int b, int k, int stride, int pad) {
        const Mat<S>& xm = val(x);
        const Eigen::Index cin = xm.rows(), len = xm.cols();
        const Eigen::Index lout = (len + 2 * pad - k) / stride + 1;
        Mat<S> cols(cin * k, lout);
        cols.setZero();
        for (Eigen::Index o = 0; o < lout; ++o) {
            const Eigen::Index start = o * stride - pad;
            for (int kk = 0; kk < k; ++kk) {
                const Eigen::Index src = start + kk;
                if (src >= 0 && src < len) cols.block(kk * cin, o, cin, 1) = xm.col(src);
            }
        }
        Mat<S> y = val(w) * cols;
        y.colwise() += Vec<S>(val(b).col(0));
        const int id = push(std::move(y), nullptr);
        nodes_[id].back = [x, w, b, k, stride, pad, cols, id](Tape& t) {
            const Mat<S>& g = t.nodes_[id].grad;
            t.grad(w).noalias() += g * cols.transpose();
            t.grad(b).col(0) += g.rowwise().sum();
            // col2im
            Mat<S> gcols = t.val(w).transpose() * g;
            Mat<S>& gx = t.grad(x);
            const Eigen::Index cin = t.val(x).rows(), len = t.val(x).cols();
            for (Eigen::Index o = 0; o < g.cols(); ++o) {
                const Eigen::Index start = o * stride - pad;
                for (int kk = 0; kk < k; ++kk) {
                    const Eigen::Index src = start + kk;
                    if (src >= 0 && src < len) gx.col(src) += gcols.block(kk * cin, o, cin, 1);
                }
            }
        };
        return id;
    }

    int upsample_nearest_cols(int a, int factor) {
        const Mat<S>& x = val(a);
        Mat<S> y(x.rows(), x.cols() * factor);
        for (Eigen::Index c = 0; c < x.cols(); ++c)
            for (int f = 0; f < factor; ++f) y.col(c * factor + f) = x.col(c);
        return push(std::move(y), [a, factor](Tape& t) {
            const Mat<S>& g = t.nodes_[t.cur_].grad;
            Mat<S>& ga = t.grad(a);
            for (Eigen::Index c = 0; c < ga.cols(); ++c)
                for (int f = 0; f < factor; ++f) ga.col(c) += g.col(c * factor + f);
        });
    }

private:
    int push(Mat<S> v, std::function<void(Tape&)> back) {
        nodes_.push_back(Node{std::move(v), Mat<S>(), std::move(back)});
        return static_cast<int>(nodes_.size() - 1);
    }

    // cur_ points at the node whose backward closure is running
    std::vector<Node> nodes_;
    int cur_ = -1;
};

}  // namespace ecgtwin
