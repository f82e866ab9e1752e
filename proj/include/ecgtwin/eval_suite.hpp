#pragma once

// Three-level generation quality metrics (FID, improved precision/recall,
// HR-MAE, tag-alignment), the personalization consistency assessment, the
// downstream personalized-diagnosis simulation, and 2-D projection plumbing.

#include "ecgtwin/base_extractor.hpp"
#include "ecgtwin/common.hpp"
#include "ecgtwin/diffusion.hpp"
#include "ecgtwin/latent_codec.hpp"
#include "ecgtwin/nn.hpp"
#include "ecgtwin/signal_forge.hpp"

#include <algorithm>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace ecgtwin {

// ---------- helpers ----------

inline double pearson(const VecD& a, const VecD& b) {
    const double ma = a.mean(), mb = b.mean();
    const VecD da = a.array() - ma, db = b.array() - mb;
    const double na = da.norm(), nb = db.norm();
    if (na < 1e-12 || nb < 1e-12) return 0.0;
    return da.dot(db) / (na * nb);
}

inline double mean_lead_correlation(const MatF& a, const MatF& b) {
    double acc = 0;
    for (int l = 0; l < kLeads; ++l)
        acc += pearson(a.row(l).transpose().cast<double>(), b.row(l).transpose().cast<double>());
    return acc / kLeads;
}

// flattened deterministic latent features for distribution metrics
inline VecD latent_features(LatentCodec& codec, const EcgRecord& rec) {
    const MatF z = codec.encode(rec.signal, false).data;
    VecD out(z.size());
    Eigen::Index n = 0;
    for (Eigen::Index r = 0; r < z.rows(); ++r)
        for (Eigen::Index c = 0; c < z.cols(); ++c) out(n++) = z(r, c);
    return out;
}

// ---------- FID ----------

namespace detail {

inline MatD covariance(const std::vector<VecD>& xs, const VecD& mu) {
    const Eigen::Index d = mu.size();
    MatD cov = MatD::Zero(d, d);
    for (const auto& x : xs) {
        const VecD c = x - mu;
        cov.noalias() += c * c.transpose();
    }
    return cov / static_cast<double>(xs.size() - 1);
}

inline MatD psd_sqrt(const MatD& m) {
    Eigen::SelfAdjointEigenSolver<MatD> es(0.5 * (m + m.transpose()));
    VecD ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// ||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r^{1/2} S_g S_r^{1/2})^{1/2})
inline double compute_fid(const std::vector<VecD>& real_features,
                          const std::vector<VecD>& gen_features, double eps_reg = 1e-6) {
    if (real_features.size() < 2 || gen_features.size() < 2)
        throw ValidationError("compute_fid: need >= 2 samples per set");
    if (real_features[0].size() != gen_features[0].size())
        throw ValidationError("compute_fid: feature dimension mismatch");
    const Eigen::Index d = real_features[0].size();

    VecD mu_r = VecD::Zero(d), mu_g = VecD::Zero(d);
    for (const auto& x : real_features) mu_r += x;
    for (const auto& x : gen_features) mu_g += x;
    mu_r /= static_cast<double>(real_features.size());
    mu_g /= static_cast<double>(gen_features.size());

    MatD cov_r = detail::covariance(real_features, mu_r) + eps_reg * MatD::Identity(d, d);
    MatD cov_g = detail::covariance(gen_features, mu_g) + eps_reg * MatD::Identity(d, d);

    const MatD sr = detail::psd_sqrt(cov_r);
    const MatD inner = detail::psd_sqrt(sr * cov_g * sr);
    const double fid =
        (mu_r - mu_g).squaredNorm() + cov_r.trace() + cov_g.trace() - 2.0 * inner.trace();
    return fid;
}

// ---------- improved precision / recall ----------

struct PrecisionRecall {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
};

namespace detail {

// squared distance from each point of `probe` to the k-NN manifold of `anchor`
inline double manifold_fraction(const std::vector<VecD>& anchor, const std::vector<VecD>& probe,
                                int k) {
    const size_t n = anchor.size();
    std::vector<double> radius(n);
    std::vector<double> dists(n - 1);
    for (size_t i = 0; i < n; ++i) {
        size_t m = 0;
        for (size_t j = 0; j < n; ++j)
            if (j != i) dists[m++] = (anchor[i] - anchor[j]).squaredNorm();
        std::nth_element(dists.begin(), dists.begin() + (k - 1), dists.end());
        radius[i] = dists[k - 1];
    }
    size_t inside = 0;
    for (const auto& p : probe) {
        for (size_t i = 0; i < n; ++i) {
            if ((p - anchor[i]).squaredNorm() <= radius[i]) {
                ++inside;
                break;
            }
        }
    }
    return static_cast<double>(inside) / static_cast<double>(probe.size());
}

}  // namespace detail

inline PrecisionRecall compute_precision_recall(const std::vector<VecD>& real_features,
                                                const std::vector<VecD>& gen_features, int k) {
    if (k < 1) throw ValidationError("compute_precision_recall: k must be >= 1");
    if (real_features.size() <= static_cast<size_t>(k) ||
        gen_features.size() <= static_cast<size_t>(k))
        throw ValidationError("compute_precision_recall: sets must exceed k samples");
    PrecisionRecall pr;
    pr.precision = detail::manifold_fraction(real_features, gen_features, k);
    pr.recall = detail::manifold_fraction(gen_features, real_features, k);
    pr.f1 = (pr.precision + pr.recall) > 0
                ? 2.0 * pr.precision * pr.recall / (pr.precision + pr.recall)
                : 0.0;
    return pr;
}

// ---------- HR-MAE ----------

struct HrMaeResult {
    double mae = 0;
    int used = 0;
    int skipped = 0;
};

inline HrMaeResult compute_hr_mae(const std::vector<EcgRecord>& generated) {
    if (generated.empty()) throw ValidationError("compute_hr_mae: empty input");
    HrMaeResult res;
    double acc = 0;
    for (const auto& rec : generated) {
        try {
            acc += std::abs(estimate_heart_rate(rec) - rec.condition.heart_rate);
            ++res.used;
        } catch (const InsufficientBeatsError&) {
            ++res.skipped;
        }
    }
    if (res.used == 0) throw ValidationError("compute_hr_mae: no record had measurable beats");
    res.mae = acc / res.used;
    return res;
}

// ---------- tag classifier and alignment ----------

// 1-D conv multi-label classifier over the 12 leads plus a beat-rate feature
// channel; the CLIP-score substitute is the mean predicted probability of each
// record's target tags.
struct TagClassifier {
    ParamStore<float> params;
    int n_out = kTagCount;
    bool trained = false;
    double val_macro_f1 = 0.0;

    static double rate_feature(const MatF& signal) {
        auto peaks = detect_r_peaks(lead_row(signal, 1));
        if (peaks.size() < 2) {
            int best = 0;
            double best_amp = -1;
            for (int l = 0; l < kLeads; ++l) {
                const double amp = signal.row(l).cwiseAbs().maxCoeff();
                if (amp > best_amp) {
                    best_amp = amp;
                    best = l;
                }
            }
            peaks = detect_r_peaks(lead_row(signal, best));
        }
        if (peaks.size() < 2) return 0.0;
        std::vector<double> rrs;
        for (size_t i = 1; i < peaks.size(); ++i) rrs.push_back(peaks[i] - peaks[i - 1]);
        std::sort(rrs.begin(), rrs.end());
        const double med = rrs.size() % 2
                               ? rrs[rrs.size() / 2]
                               : 0.5 * (rrs[rrs.size() / 2 - 1] + rrs[rrs.size() / 2]);
        return (60.0 * kSampleRate / med) / 100.0;
    }

    static MatF make_input(const MatF& signal) {
        MatF x(kLeads + 1, kSamples);
        x.topRows(kLeads) = signal;
        x.row(kLeads).setConstant(static_cast<float>(rate_feature(signal)));
        return x;
    }

    int forward(Ctx<float>& c, const MatF& input) const {
        int h = conv1d_layer(c, "c0", c.tape.leaf(input), kLeads + 1, 24, 9, 4, 4);
        h = c.tape.silu(h);
        h = conv1d_layer(c, "c1", h, 24, 32, 7, 4, 3);
        h = c.tape.silu(h);
        h = conv1d_layer(c, "c2", h, 32, 32, 5, 2, 2);
        h = c.tape.silu(h);
        h = c.tape.transpose(c.tape.mean_cols(h));  // [1 x 32]
        return linear(c, "head", h, 32, n_out);
    }

    VecD predict_probs(const MatF& signal) {
        Tape<float> tape;
        Ctx<float> ctx(tape, params);
        const int logits = forward(ctx, make_input(signal));
        VecD out(n_out);
        for (int i = 0; i < n_out; ++i)
            out(i) = 1.0 / (1.0 + std::exp(-static_cast<double>(tape.val(logits)(0, i))));
        return out;
    }
};

inline VecF tag_label(const CardiacCondition& cond) {
    VecF y = VecF::Zero(kTagCount);
    bool any = false;
    for (const auto& r : cond.reports) {
        if (auto k = tag_from_report(r)) {
            y(static_cast<int>(*k)) = 1.0f;
            any = true;
        }
    }
    if (!any) y(static_cast<int>(TagKind::normal_sinus)) = 1.0f;  // default-tag convention
    return y;
}

inline bool abnormal_label(const CardiacCondition& cond) {
    for (const auto& r : cond.reports) {
        if (auto k = tag_from_report(r)) {
            if (*k != TagKind::normal_sinus) return true;
        }
    }
    return false;
}

struct ClassifierTrainConfig {
    int epochs = 25;
    int batch = 16;
    double lr = 2e-3;
    double val_fraction = 0.2;
    uint64_t seed = 1;
};

namespace detail {

inline double macro_f1_multilabel(const std::vector<VecD>& probs, const std::vector<VecF>& labels,
                                  int n_out) {
    double f1_sum = 0;
    int tags_counted = 0;
    for (int t = 0; t < n_out; ++t) {
        int tp = 0, fp = 0, fn = 0, pos = 0;
        for (size_t i = 0; i < probs.size(); ++i) {
            const bool pred = probs[i](t) >= 0.5;
            const bool truth = labels[i](t) >= 0.5f;
            pos += truth;
            tp += pred && truth;
            fp += pred && !truth;
            fn += !pred && truth;
        }
        if (pos == 0) continue;  // tag absent from validation set
        const double p = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
        const double r = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
        f1_sum += (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
        ++tags_counted;
    }
    return tags_counted > 0 ? f1_sum / tags_counted : 0.0;
}

}  // namespace detail

// generic BCE trainer shared by the tag classifier and the binary diagnoser
inline TrainLog train_classifier(TagClassifier& clf, const std::vector<MatF>& inputs,
                                 const std::vector<VecF>& labels,
                                 const ClassifierTrainConfig& cfg) {
    if (inputs.empty()) throw ValidationError("train_classifier: empty training set");
    clf.params.init_seed = derive_seed(cfg.seed, "clf-init");
    TrainLog log;
    Rng order_rng(derive_seed(cfg.seed, "clf-order"));
    std::vector<int> idx(inputs.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(idx);
        double ep = 0;
        int nb = 0;
        for (size_t start = 0; start < idx.size(); start += cfg.batch) {
            const size_t end = std::min(idx.size(), start + cfg.batch);
            Tape<float> tape;
            Ctx<float> ctx(tape, clf.params);
            int total = -1;
            for (size_t s = start; s < end; ++s) {
                const int logits = clf.forward(ctx, inputs[idx[s]]);
                MatF target(1, clf.n_out);
                target.row(0) = labels[idx[s]].transpose();
                const int loss = tape.bce_logits(logits, target);
                total = total < 0 ? loss : tape.add(total, loss);
            }
            total = tape.scale(total, 1.0f / static_cast<float>(end - start));
            const double lv = tape.scalar(total);
            if (!std::isfinite(lv)) throw NumericError("train_classifier: loss NaN");
            clf.params.zero_grad();
            tape.backward(total);
            ctx.harvest();
            clf.params.clip_grad_norm(10.0);
            clf.params.adamw(cfg.lr);
            ep += lv;
            ++nb;
        }
        log.epoch_loss.push_back(ep / nb);
    }
    clf.trained = true;
    return log;
}

// trains on the real corpus and records held-out macro-F1 (the scoring floor)
inline TrainLog train_tag_classifier(TagClassifier& clf, const std::vector<EcgRecord>& records,
                                     const ClassifierTrainConfig& cfg) {
    clf.n_out = kTagCount;
    std::vector<int> idx(records.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    Rng split_rng(derive_seed(cfg.seed, "clf-split"));
    split_rng.shuffle(idx);
    const size_t n_val = std::max<size_t>(1, static_cast<size_t>(cfg.val_fraction * idx.size()));

    std::vector<MatF> train_in;
    std::vector<VecF> train_lab;
    std::vector<MatF> val_in;
    std::vector<VecF> val_lab;
    for (size_t i = 0; i < idx.size(); ++i) {
        MatF input = TagClassifier::make_input(records[idx[i]].signal);
        VecF label = tag_label(records[idx[i]].condition);
        if (i < n_val) {
            val_in.push_back(std::move(input));
            val_lab.push_back(std::move(label));
        } else {
            train_in.push_back(std::move(input));
            train_lab.push_back(std::move(label));
        }
    }
    TrainLog log = train_classifier(clf, train_in, train_lab, cfg);

    std::vector<VecD> val_probs;
    for (auto& in : val_in) {
        Tape<float> tape;
        Ctx<float> ctx(tape, clf.params);
        const int logits = clf.forward(ctx, in);
        VecD p(clf.n_out);
        for (int t = 0; t < clf.n_out; ++t)
            p(t) = 1.0 / (1.0 + std::exp(-static_cast<double>(tape.val(logits)(0, t))));
        val_probs.push_back(std::move(p));
    }
    clf.val_macro_f1 = detail::macro_f1_multilabel(val_probs, val_lab, clf.n_out);
    return log;
}

constexpr double kAlignmentClassifierFloor = 0.8;

// mean predicted probability assigned to each record's target tags
inline double compute_alignment(const std::vector<EcgRecord>& generated, TagClassifier& clf) {
    if (!clf.trained) throw DependencyError("compute_alignment: classifier untrained");
    if (clf.val_macro_f1 < kAlignmentClassifierFloor)
        throw DependencyError("compute_alignment: classifier macro-F1 " +
                              std::to_string(clf.val_macro_f1) + " below the 0.8 floor");
    if (generated.empty()) throw ValidationError("compute_alignment: empty input");
    double acc = 0;
    for (const auto& rec : generated) {
        const VecF label = tag_label(rec.condition);
        const VecD probs = clf.predict_probs(rec.signal);
        double s = 0;
        int n = 0;
        for (int t = 0; t < kTagCount; ++t)
            if (label(t) >= 0.5f) {
                s += probs(t);
                ++n;
            }
        acc += s / n;
    }
    return acc / generated.size();
}

// ---------- consistency assessment (stage-1 metrics over real + generated) ----------

struct ConsistencyReport {
    double similarity_real = 0, silhouette_real = 0;
    double similarity_gen = 0, silhouette_gen = 0;
    double similarity_mixed = 0, silhouette_mixed = 0;
    std::map<std::string, int> per_patient_counts;
};

inline ConsistencyReport consistency_assessment(const std::vector<EcgRecord>& real_records,
                                                const std::vector<EcgRecord>& generated_records,
                                                Extractor<float>& extractor, LatentCodec& codec,
                                                const NormStats& stats) {
    auto vectors_of = [&](const std::vector<EcgRecord>& recs) {
        VectorSets sets;
        for (const auto& r : recs) {
            const MatF z = codec.encode(r.signal, false).data;
            const VecF b = extract_base<float>(z, &r.condition, extractor, stats);
            sets[r.patient_id].push_back(b.cast<double>());
        }
        return sets;
    };
    const VectorSets real_sets = vectors_of(real_records);
    const VectorSets gen_sets = vectors_of(generated_records);
    VectorSets mixed = real_sets;
    for (const auto& [pid, vecs] : gen_sets)
        mixed[pid].insert(mixed[pid].end(), vecs.begin(), vecs.end());

    ConsistencyReport rep;
    rep.similarity_real = similarity_score(real_sets);
    rep.silhouette_real = silhouette_coefficient(real_sets);
    rep.similarity_gen = similarity_score(gen_sets);
    rep.silhouette_gen = silhouette_coefficient(gen_sets);
    rep.similarity_mixed = similarity_score(mixed);
    rep.silhouette_mixed = silhouette_coefficient(mixed);
    for (const auto& [pid, vecs] : mixed) rep.per_patient_counts[pid] = static_cast<int>(vecs.size());
    return rep;
}

// ---------- downstream personalized-diagnosis simulation ----------

enum class DownstreamAugment {
    generated_twins,  // fine-tune on generated ECG digital twins
    own_records,      // oracle upper bound: fine-tune on the patient's own data
    none,             // personalized model stays identical to the baseline
};

struct DownstreamConfig {
    int min_records = 10;
    int twins_per_condition = 5;
    DownstreamAugment augment = DownstreamAugment::generated_twins;
    ClassifierTrainConfig baseline_train{20, 16, 2e-3, 0.0, 11};
    int finetune_epochs = 6;
    double finetune_lr = 5e-4;
    uint64_t seed = 1;
};

struct DiagnosisReport {
    double patient_acc = 0, patient_f1 = 0;
    double population_acc = 0, population_f1 = 0;
    double baseline_patient_acc = 0, baseline_patient_f1 = 0;
    double baseline_population_acc = 0, baseline_population_f1 = 0;
    int n_patients = 0;
    double mean_improvement = 0;   // mean per-patient accuracy delta
    double frac_improved = 0;      // fraction of patients at or above baseline
    std::map<std::string, int> per_patient_records;
};

namespace detail {

// fixed patient-agnostic palette, balanced between normal and abnormal
inline std::vector<CardiacCondition> downstream_palette() {
    auto make = [](std::vector<TagKind> kinds, double hr) {
        CardiacCondition c;
        for (auto k : kinds) c.reports.emplace_back(tag_report(k));
        c.heart_rate = hr;
        c.age = 60;
        c.sex = 0;
        return c;
    };
    return {
        make({TagKind::normal_sinus}, 62), make({TagKind::normal_sinus}, 74),
        make({TagKind::normal_sinus}, 86), make({TagKind::normal_sinus}, 96),
        make({TagKind::pvc}, 75),          make({TagKind::wide_qrs}, 70),
        make({TagKind::st_elevation}, 82), make({TagKind::inverted_t}, 66),
    };
}

struct BinaryEval {
    std::vector<int> pred;
    std::vector<int> truth;

    double accuracy() const {
        int ok = 0;
        for (size_t i = 0; i < pred.size(); ++i) ok += pred[i] == truth[i];
        return pred.empty() ? 0.0 : static_cast<double>(ok) / pred.size();
    }
    // macro-F1 over the classes present in the truth labels
    double macro_f1() const {
        double f1_sum = 0;
        int classes = 0;
        for (int cls = 0; cls <= 1; ++cls) {
            int tp = 0, fp = 0, fn = 0, pos = 0;
            for (size_t i = 0; i < pred.size(); ++i) {
                const bool p = pred[i] == cls, t = truth[i] == cls;
                pos += t;
                tp += p && t;
                fp += p && !t;
                fn += !p && t;
            }
            if (pos == 0) continue;
            const double prec = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
            const double rec = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
            f1_sum += (prec + rec) > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
            ++classes;
        }
        return classes > 0 ? f1_sum / classes : 0.0;
    }
    void append(const BinaryEval& o) {
        pred.insert(pred.end(), o.pred.begin(), o.pred.end());
        truth.insert(truth.end(), o.truth.begin(), o.truth.end());
    }
};

inline BinaryEval eval_binary(TagClassifier& clf, const std::vector<EcgRecord>& recs) {
    BinaryEval ev;
    for (const auto& r : recs) {
        const VecD p = clf.predict_probs(r.signal);
        ev.pred.push_back(p(0) >= 0.5 ? 1 : 0);
        ev.truth.push_back(abnormal_label(r.condition) ? 1 : 0);
    }
    return ev;
}

}  // namespace detail

inline DiagnosisReport downstream_simulation(const std::vector<EcgRecord>& test_corpus,
                                             ModelBundle m, const DownstreamConfig& cfg) {
    if (cfg.twins_per_condition < 1)
        throw ValidationError("downstream: twins_per_condition must be >= 1");
    const auto palette = detail::downstream_palette();
    int n_abnormal = 0;
    for (const auto& c : palette) n_abnormal += abnormal_label(c);
    if (2 * n_abnormal != static_cast<int>(palette.size()))
        throw ValidationError("downstream: target-condition palette is class-imbalanced");

    std::map<std::string, std::vector<int>> by_patient;
    for (int i = 0; i < static_cast<int>(test_corpus.size()); ++i)
        by_patient[test_corpus[i].patient_id].push_back(i);

    std::vector<std::string> selected;
    std::vector<EcgRecord> pool;  // non-selected records train the baseline
    for (const auto& [pid, idxs] : by_patient) {
        if (static_cast<int>(idxs.size()) >= cfg.min_records)
            selected.push_back(pid);
        else
            for (int i : idxs) pool.push_back(test_corpus[i]);
    }
    if (selected.empty()) throw ValidationError("downstream: no patient meets min_records");
    if (pool.size() < 8) throw ValidationError("downstream: baseline training pool too small");

    TagClassifier baseline;
    baseline.n_out = 1;
    {
        std::vector<MatF> in;
        std::vector<VecF> lab;
        for (const auto& r : pool) {
            in.push_back(TagClassifier::make_input(r.signal));
            VecF y(1);
            y(0) = abnormal_label(r.condition) ? 1.0f : 0.0f;
            lab.push_back(y);
        }
        ClassifierTrainConfig ct = cfg.baseline_train;
        ct.seed = derive_seed(cfg.seed, "downstream-baseline");
        train_classifier(baseline, in, lab, ct);
    }

    DiagnosisReport rep;
    detail::BinaryEval pooled_personal, pooled_baseline;
    double acc_personal_sum = 0, f1_personal_sum = 0;
    double acc_baseline_sum = 0, f1_baseline_sum = 0;
    int improved = 0;

    for (const auto& pid : selected) {
        auto idxs = by_patient.at(pid);
        std::sort(idxs.begin(), idxs.end(), [&](int a, int b) {
            return test_corpus[a].timestamp < test_corpus[b].timestamp;
        });
        const EcgRecord& reference = test_corpus[idxs.front()];
        std::vector<EcgRecord> heldout;
        for (size_t i = 1; i < idxs.size(); ++i) heldout.push_back(test_corpus[idxs[i]]);

        // personalized twin set from the earliest record as reference
        std::vector<EcgRecord> augment;
        if (cfg.augment == DownstreamAugment::generated_twins) {
            const MatF z_ref = m.codec.encode(reference.signal, false).data;
            const VecF base =
                extract_base<float>(z_ref, &reference.condition, m.extractor, m.stats);
            int twin_n = 0;
            for (const auto& cond : palette)
                for (int s = 0; s < cfg.twins_per_condition; ++s) {
                    GenerationRequest req;
                    req.base = &base;
                    req.target_condition = cond;
                    req.seed = derive_seed(cfg.seed, pid + "/twin" + std::to_string(twin_n++));
                    augment.push_back(
                        sample(req, m.sched, m.pred, m.extractor, m.codec, m.stats, m.clamp_c));
                }
        } else if (cfg.augment == DownstreamAugment::own_records) {
            augment = heldout;  // oracle upper bound
        }

        TagClassifier personal = baseline;
        if (!augment.empty()) {
            std::vector<MatF> in;
            std::vector<VecF> lab;
            for (const auto& r : augment) {
                in.push_back(TagClassifier::make_input(r.signal));
                VecF y(1);
                y(0) = abnormal_label(r.condition) ? 1.0f : 0.0f;
                lab.push_back(y);
            }
            ClassifierTrainConfig ft;
            ft.epochs = cfg.finetune_epochs;
            ft.batch = 8;
            ft.lr = cfg.finetune_lr;
            ft.seed = derive_seed(cfg.seed, pid + "/ft");
            train_classifier(personal, in, lab, ft);
        }

        auto ev_personal = detail::eval_binary(personal, heldout);
        auto ev_baseline = detail::eval_binary(baseline, heldout);
        acc_personal_sum += ev_personal.accuracy();
        f1_personal_sum += ev_personal.macro_f1();
        acc_baseline_sum += ev_baseline.accuracy();
        f1_baseline_sum += ev_baseline.macro_f1();
        improved += ev_personal.accuracy() >= ev_baseline.accuracy();
        pooled_personal.append(ev_personal);
        pooled_baseline.append(ev_baseline);
        rep.per_patient_records[pid] = static_cast<int>(heldout.size());
    }

    const double n = static_cast<double>(selected.size());
    rep.n_patients = static_cast<int>(selected.size());
    rep.patient_acc = acc_personal_sum / n;
    rep.patient_f1 = f1_personal_sum / n;
    rep.baseline_patient_acc = acc_baseline_sum / n;
    rep.baseline_patient_f1 = f1_baseline_sum / n;
    rep.population_acc = pooled_personal.accuracy();
    rep.population_f1 = pooled_personal.macro_f1();
    rep.baseline_population_acc = pooled_baseline.accuracy();
    rep.baseline_population_f1 = pooled_baseline.macro_f1();
    rep.mean_improvement = rep.patient_acc - rep.baseline_patient_acc;
    rep.frac_improved = improved / n;
    return rep;
}

// ---------- 2-D projection ----------

// PCA to 2 components with a deterministic sign convention: the
// largest-magnitude loading of each component is made positive.
inline std::vector<std::pair<double, double>> project_2d(const std::vector<VecD>& vectors) {
    if (vectors.size() < 3) throw ValidationError("project_2d: need >= 3 vectors");
    const Eigen::Index d = vectors[0].size();
    VecD mu = VecD::Zero(d);
    for (const auto& v : vectors) mu += v;
    mu /= static_cast<double>(vectors.size());
    MatD cov = MatD::Zero(d, d);
    for (const auto& v : vectors) {
        const VecD c = v - mu;
        cov.noalias() += c * c.transpose();
    }
    cov /= static_cast<double>(vectors.size());
    Eigen::SelfAdjointEigenSolver<MatD> es(cov);
    // eigenvalues ascend; take the last two columns
    VecD pc1 = es.eigenvectors().col(d - 1);
    VecD pc2 = d >= 2 ? VecD(es.eigenvectors().col(d - 2)) : VecD::Zero(d);
    auto fix_sign = [](VecD& v) {
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
    };
    fix_sign(pc1);
    fix_sign(pc2);
    std::vector<std::pair<double, double>> out;
    out.reserve(vectors.size());
    for (const auto& v : vectors) out.emplace_back((v - mu).dot(pc1), (v - mu).dot(pc2));
    return out;
}

}  // namespace ecgtwin
