#include <catch2/catch_amalgamated.hpp>

#include "ecgtwin/autodiff.hpp"
#include "ecgtwin/nn.hpp"

using namespace ecgtwin;

namespace {

// central finite differences against the tape gradient for a scalar loss
// built by `build` from a single leaf input
template <class Build>
void check_gradient(MatD x0, Build build, double h = 1e-6, double tol = 1e-6) {
    Tape<double> tape;
    const int x = tape.leaf(x0);
    const int loss = build(tape, x);
    tape.backward(loss);
    const MatD analytic = tape.grad(x);

    MatD numeric(x0.rows(), x0.cols());
    for (Eigen::Index i = 0; i < x0.size(); ++i) {
        MatD xp = x0, xm = x0;
        xp.data()[i] += h;
        xm.data()[i] -= h;
        Tape<double> tp, tm;
        const double fp = tp.scalar(build(tp, tp.leaf(xp)));
        const double fm = tm.scalar(build(tm, tm.leaf(xm)));
        numeric.data()[i] = (fp - fm) / (2 * h);
    }
    const double denom = std::max({analytic.norm(), numeric.norm(), 1e-12});
    REQUIRE((analytic - numeric).norm() / denom < tol);
}

MatD random_mat(Eigen::Index r, Eigen::Index c, uint64_t seed) {
    MatD m(r, c);
    Rng rng(seed);
    rng.fill_normal(m);
    return m;
}

}  // namespace

TEST_CASE("matmul and elementwise gradients", "[autodiff]") {
    const MatD w = random_mat(4, 3, 2);
    check_gradient(random_mat(5, 4, 1), [&](Tape<double>& t, int x) {
        const int y = t.matmul(x, t.leaf(w));
        return t.mse(y, t.leaf(MatD::Zero(5, 3)));
    });
    check_gradient(random_mat(3, 3, 3), [](Tape<double>& t, int x) {
        return t.mean_all(t.cmul(x, t.silu(x)));
    });
    check_gradient(random_mat(2, 6, 4), [](Tape<double>& t, int x) {
        return t.mean_all(t.gelu(t.scale(x, 0.7)));
    });
    check_gradient(random_mat(2, 5, 5), [](Tape<double>& t, int x) {
        return t.mean_all(t.sigmoid(t.tanh_(x)));
    });
    check_gradient(random_mat(4, 4, 6), [](Tape<double>& t, int x) {
        return t.mean_all(t.exp_(t.scale(x, 0.3)));
    });
}

TEST_CASE("softmax, layernorm, l2-normalize gradients", "[autodiff]") {
    const MatD probe = random_mat(3, 5, 11);
    check_gradient(random_mat(3, 5, 10), [&](Tape<double>& t, int x) {
        return t.mean_all(t.cmul(t.softmax_rows(x), t.leaf(probe)));
    });
    check_gradient(random_mat(4, 6, 12), [&](Tape<double>& t, int x) {
        return t.mean_all(t.cmul(t.layer_norm_rows(x, 1e-5), t.leaf(random_mat(4, 6, 13))));
    });
    check_gradient(random_mat(3, 4, 14), [&](Tape<double>& t, int x) {
        return t.mean_all(t.cmul(t.l2_normalize_rows(x), t.leaf(random_mat(3, 4, 15))));
    });
}

TEST_CASE("broadcast, slice, concat gradients", "[autodiff]") {
    const MatD v = random_mat(1, 5, 21);
    check_gradient(random_mat(4, 5, 20), [&](Tape<double>& t, int x) {
        int y = t.add_rowvec(x, t.leaf(v));
        y = t.mul_rowvec(y, t.leaf(v));
        return t.mean_all(t.cmul(y, y));
    });
    check_gradient(random_mat(6, 4, 22), [](Tape<double>& t, int x) {
        const int a = t.slice_rows(x, 0, 3);
        const int b = t.slice_rows(x, 3, 3);
        const int cat = t.concat_cols({a, b});
        return t.mse(cat, t.leaf(MatD::Ones(3, 8)));
    });
    check_gradient(random_mat(3, 6, 23), [](Tape<double>& t, int x) {
        const int a = t.slice_cols(x, 0, 2);
        const int b = t.slice_cols(x, 2, 4);
        return t.add(t.sum(t.cmul(a, a)), t.mean_all(b));
    });
}

TEST_CASE("loss op gradients", "[autodiff]") {
    check_gradient(random_mat(5, 5, 30), [](Tape<double>& t, int x) {
        return t.ce_diag_rows(x, false);
    });
    check_gradient(random_mat(5, 5, 31), [](Tape<double>& t, int x) {
        return t.ce_diag_rows(x, true);
    });
    MatD target(2, 3);
    target << 1, 0, 1, 0, 1, 0;
    check_gradient(random_mat(2, 3, 32), [&](Tape<double>& t, int x) {
        return t.bce_logits(x, target);
    });
    check_gradient(random_mat(2, 4, 33), [](Tape<double>& t, int x) {
        return t.kl_std_normal(t.slice_rows(x, 0, 1), t.slice_rows(x, 1, 1));
    });
}

TEST_CASE("conv1d and upsample gradients", "[autodiff]") {
    const MatD w = random_mat(3, 2 * 5, 41);
    const MatD b = random_mat(3, 1, 42);
    check_gradient(random_mat(2, 16, 40), [&](Tape<double>& t, int x) {
        const int y = t.conv1d(x, t.leaf(w), t.leaf(b), 5, 2, 2);
        return t.mean_all(t.cmul(y, y));
    });
    // weight gradient through a leaf-as-weight arrangement
    check_gradient(random_mat(3, 2 * 3, 43), [&](Tape<double>& t, int wx) {
        const int x = t.leaf(random_mat(2, 10, 44));
        const int y = t.conv1d(x, wx, t.leaf(MatD::Zero(3, 1)), 3, 1, 1);
        return t.mean_all(t.cmul(y, y));
    });
    check_gradient(random_mat(2, 6, 45), [](Tape<double>& t, int x) {
        const int y = t.upsample_nearest_cols(x, 2);
        return t.mse(y, t.leaf(MatD::Ones(2, 12)));
    });
}

TEST_CASE("mul_scalar_var routes gradient to both operands", "[autodiff]") {
    check_gradient(random_mat(1, 1, 50), [](Tape<double>& t, int s) {
        const int x = t.leaf(random_mat(3, 3, 51));
        return t.mean_all(t.cmul(t.mul_scalar_var(x, s), x));
    });
}

TEST_CASE("sinusoidal embeddings are finite and bounded", "[autodiff]") {
    const MatD pe = sinusoidal_position_encoding<double>(128, 64);
    REQUIRE(pe.allFinite());
    REQUIRE(pe.cwiseAbs().maxCoeff() <= 1.0 + 1e-12);
    const MatD te = timestep_embedding<double>(17, 32);
    REQUIRE(te.allFinite());
    REQUIRE(te.cols() == 32);
}

TEST_CASE("adamw step moves parameters against the gradient", "[autodiff]") {
    ParamStore<double> ps;
    ps.init_seed = 7;
    MatD& w = ps.get_or_init("w", 2, 2, Init::Scaled);
    const MatD before = w;
    ps.grad["w"] = MatD::Ones(2, 2);
    ps.adamw(0.1);
    REQUIRE((w.array() < before.array()).all());
}
