#pragma once

// Synthetic multi-patient ECG corpus with planted per-patient identity, plus
// the DSP primitives the rest of the pipeline relies on: R-peak detection,
// heart-rate estimation and grid resampling. Records are 12-lead, 10 s at
// 102.4 Hz (12 x 1024).

#include "ecgtwin/common.hpp"
#include "ecgtwin/condition_codec.hpp"

#include <array>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace ecgtwin {

constexpr int kLeads = 12;
constexpr int kSamples = 1024;
constexpr double kSampleRate = 102.4;
constexpr double kDuration = 10.0;

inline const char* kLeadNames[kLeads] = {"I",  "II", "III", "aVR", "aVL", "aVF",
                                         "V1", "V2", "V3",  "V4",  "V5",  "V6"};

struct EcgRecord {
    std::string patient_id;
    std::string record_id;
    int64_t timestamp = 0;
    MatF signal;  // 12 x 1024, millivolts
    CardiacCondition condition;

    void validate() const {
        if (signal.rows() != kLeads || signal.cols() != kSamples)
            throw ValidationError("EcgRecord signal must be 12x1024");
        if (!signal.allFinite()) throw NumericError("EcgRecord signal contains non-finite values");
    }
};

// ---------- morphology tags ----------

enum class TagKind {
    normal_sinus,
    pvc,
    wide_qrs,
    low_voltage,
    tachycardia,
    bradycardia,
    st_elevation,
    inverted_t,
};

constexpr int kTagCount = 8;

struct MorphologyTag {
    TagKind kind = TagKind::normal_sinus;
    std::map<std::string, double> params;
};

inline const char* tag_name(TagKind k) {
    switch (k) {
        case TagKind::normal_sinus: return "normal_sinus";
        case TagKind::pvc: return "pvc";
        case TagKind::wide_qrs: return "wide_qrs";
        case TagKind::low_voltage: return "low_voltage";
        case TagKind::tachycardia: return "tachycardia";
        case TagKind::bradycardia: return "bradycardia";
        case TagKind::st_elevation: return "st_elevation";
        case TagKind::inverted_t: return "inverted_t";
    }
    return "?";
}

// canonical report phrase per tag; the alignment classifier maps these back
inline const char* tag_report(TagKind k) {
    switch (k) {
        case TagKind::normal_sinus: return "normal sinus rhythm";
        case TagKind::pvc: return "premature ventricular complexes";
        case TagKind::wide_qrs: return "wide qrs complex";
        case TagKind::low_voltage: return "low voltage in precordial leads";
        case TagKind::tachycardia: return "sinus tachycardia";
        case TagKind::bradycardia: return "sinus bradycardia";
        case TagKind::st_elevation: return "st segment elevation";
        case TagKind::inverted_t: return "t wave inversion";
    }
    return "?";
}

inline std::optional<TagKind> tag_from_report(const std::string& report) {
    for (int i = 0; i < kTagCount; ++i) {
        const auto k = static_cast<TagKind>(i);
        if (report == tag_report(k)) return k;
    }
    return std::nullopt;
}

// ---------- patient identity ----------

enum Wave { P = 0, Q = 1, R = 2, Sw = 3, T = 4 };
constexpr int kWaves = 5;

struct WaveComponent {
    double amp = 0.0;    // mV
    double width = 0.0;  // gaussian sigma, seconds
    double offset = 0.0; // seconds relative to R apex
};

struct PatientProfile {
    std::string patient_id;
    int sex = 0;
    double age = 50.0;
    double baseline_hr = 70.0;
    std::array<std::array<WaveComponent, kWaves>, kLeads> waves{};

    // widths are required by synthesis; the R-amplitude invariant applies to
    // corpus profiles (an all-zero profile legitimately yields a flat record)
    void validate_widths() const {
        for (const auto& lead : waves)
            for (const auto& w : lead)
                if (w.width <= 0) throw ValidationError("wave widths must be strictly positive");
    }

    void validate() const {
        validate_widths();
        bool has_r = false;
        for (const auto& lead : waves)
            if (lead[R].amp != 0.0) has_r = true;
        if (!has_r) throw ValidationError("R amplitude must be nonzero in at least one lead");
    }
};

// ---------- record synthesis ----------

namespace detail {

// per-beat working copy of the five wave components for one lead
using LeadWaves = std::array<WaveComponent, kWaves>;

inline void apply_static_tags(std::array<LeadWaves, kLeads>& waves,
                              const std::vector<MorphologyTag>& tags, bool& st_elev,
                              double& st_amp) {
    for (const auto& tag : tags) {
        switch (tag.kind) {
            case TagKind::wide_qrs: {
                // widens the QRS complex: Q/R/S widths x2
                const double f = tag.params.count("width_factor") ? tag.params.at("width_factor") : 2.0;
                for (auto& lead : waves) {
                    lead[Q].width *= f;
                    lead[R].width *= f;
                    lead[Sw].width *= f;
                }
                break;
            }
            case TagKind::low_voltage: {
                // scales precordial (V1-V6) amplitudes by 0.3
                const double f = tag.params.count("scale") ? tag.params.at("scale") : 0.3;
                for (int l = 6; l < kLeads; ++l)
                    for (auto& w : waves[l]) w.amp *= f;
                break;
            }
            case TagKind::inverted_t: {
                for (auto& lead : waves) lead[T].amp = -lead[T].amp;
                break;
            }
            case TagKind::st_elevation: {
                st_elev = true;
                st_amp = tag.params.count("elevation") ? tag.params.at("elevation") : 0.2;
                break;
            }
            default: break;  // normal_sinus / pvc / tachycardia / bradycardia: no static change
        }
    }
}

inline int pvc_period(const std::vector<MorphologyTag>& tags) {
    for (const auto& tag : tags)
        if (tag.kind == TagKind::pvc)
            return tag.params.count("period") ? static_cast<int>(tag.params.at("period")) : 3;
    return 0;
}

}  // namespace detail

// Pure function of its arguments; beats are placed at fixed phase so the
// noiseless waveform is fully determined by (profile, tags, heart_rate).
inline EcgRecord synthesize_record(const PatientProfile& profile,
                                   const std::vector<MorphologyTag>& tags, double heart_rate,
                                   double noise_level, uint64_t seed) {
    if (heart_rate < 30.0 || heart_rate > 220.0)
        throw ValidationError("heart_rate must be in [30, 220] bpm");
    if (noise_level < 0.0) throw ValidationError("noise_level must be >= 0");
    profile.validate_widths();

    const double rr = 60.0 / heart_rate;
    // intervals compress at high rates; R spacing itself stays exactly rr
    const double tscale = std::sqrt(clampd(rr, 0.3, 1.0));

    std::array<detail::LeadWaves, kLeads> waves = profile.waves;
    bool st_elev = false;
    double st_amp = 0.0;
    detail::apply_static_tags(waves, tags, st_elev, st_amp);
    const int pvc_every = detail::pvc_period(tags);

    MatD sig = MatD::Zero(kLeads, kSamples);

    std::vector<double> beat_centers;
    for (double t = 0.5 * rr; t < kDuration; t += rr) beat_centers.push_back(t);

    for (size_t k = 0; k < beat_centers.size(); ++k) {
        const double tc = beat_centers[k];
        const bool ectopic = pvc_every > 0 && (k % static_cast<size_t>(pvc_every)) ==
                                                  static_cast<size_t>(pvc_every - 1);
        const int i0 = std::max(0, static_cast<int>((tc - 0.8) * kSampleRate));
        const int i1 = std::min(kSamples, static_cast<int>((tc + 0.8) * kSampleRate) + 1);
        for (int l = 0; l < kLeads; ++l) {
            detail::LeadWaves lw = waves[l];
            if (ectopic) {
                // wide malformed QRS, absent P, discordant T
                lw[P].amp = 0.0;
                lw[Q].width *= 2.5;
                lw[R].width *= 2.5;
                lw[Sw].width *= 2.5;
                lw[R].amp *= 1.3;
                lw[T].amp *= -0.8;
            }
            for (int w = 0; w < kWaves; ++w) {
                const double amp = lw[w].amp;
                if (amp == 0.0) continue;
                const double center = tc + lw[w].offset * tscale;
                const double sd = lw[w].width;
                for (int i = i0; i < i1; ++i) {
                    const double dt = i / kSampleRate - center;
                    sig(l, i) += amp * std::exp(-0.5 * dt * dt / (sd * sd));
                }
            }
            if (st_elev && lw[R].amp != 0.0) {
                const double center =
                    tc + 0.5 * (lw[Sw].offset + lw[T].offset) * tscale;
                const double sd = 0.07;
                const double amp = st_amp * (lw[R].amp > 0 ? 1.0 : -1.0);
                for (int i = i0; i < i1; ++i) {
                    const double dt = i / kSampleRate - center;
                    sig(l, i) += amp * std::exp(-0.5 * dt * dt / (sd * sd));
                }
            }
        }
    }

    if (noise_level > 0.0) {
        Rng rng(derive_seed(seed, "noise"));
        for (int l = 0; l < kLeads; ++l) {
            const double phase = rng.uniform(0.0, 2.0 * M_PI);
            const double wander_amp = 1.5 * noise_level;
            for (int i = 0; i < kSamples; ++i) {
                const double t = i / kSampleRate;
                sig(l, i) += wander_amp * std::sin(2.0 * M_PI * 0.3 * t + phase) +
                             noise_level * rng.normal();
            }
        }
    }

    EcgRecord rec;
    rec.patient_id = profile.patient_id;
    rec.signal = sig.cast<float>();
    rec.condition.age = profile.age;
    rec.condition.sex = profile.sex;
    rec.condition.heart_rate = heart_rate;
    for (const auto& tag : tags) rec.condition.reports.emplace_back(tag_report(tag.kind));
    return rec;
}

// ---------- R-peak detection ----------

namespace detail {

inline std::vector<double> moving_average(const std::vector<double>& x, int win) {
    const int n = static_cast<int>(x.size());
    std::vector<double> out(n, 0.0);
    const int half = win / 2;
    double acc = 0.0;
    int cnt = 0;
    // prefix sums keep this exact and O(n)
    std::vector<double> ps(n + 1, 0.0);
    for (int i = 0; i < n; ++i) ps[i + 1] = ps[i] + x[i];
    for (int i = 0; i < n; ++i) {
        const int a = std::max(0, i - half);
        const int b = std::min(n - 1, i + half);
        out[i] = (ps[b + 1] - ps[a]) / (b - a + 1);
    }
    (void)acc;
    (void)cnt;
    return out;
}

}  // namespace detail

// Bandpass (moving-average difference approximating 5-20 Hz) + derivative
// energy + adaptive threshold + 20-sample refractory window.
inline std::vector<int> detect_r_peaks(const std::vector<double>& lead) {
    const int n = static_cast<int>(lead.size());
    if (n < 32) return {};
    for (double v : lead)
        if (!std::isfinite(v)) throw NumericError("detect_r_peaks: non-finite input");

    const auto ma_hi = detail::moving_average(lead, 5);
    const auto ma_lo = detail::moving_average(lead, 21);
    std::vector<double> band(n);
    for (int i = 0; i < n; ++i) band[i] = ma_hi[i] - ma_lo[i];

    std::vector<double> energy(n, 0.0);
    for (int i = 1; i + 1 < n; ++i) {
        const double d = 0.5 * (band[i + 1] - band[i - 1]);
        energy[i] = d * d;
    }
    const auto integ = detail::moving_average(energy, 13);

    const double peak = *std::max_element(integ.begin(), integ.end());
    if (peak <= 1e-12) return {};

    // pass 1: candidate regions above a fraction of the global max
    const double thr1 = 0.18 * peak;
    std::vector<std::pair<int, double>> cands;  // (index, integ height)
    int i = 0;
    while (i < n) {
        if (integ[i] > thr1) {
            int j = i;
            while (j < n && integ[j] > thr1) ++j;
            const int a = std::max(0, i - 5), b = std::min(n - 1, j + 4);
            int best = a;
            for (int t = a; t <= b; ++t)
                if (std::abs(band[t]) > std::abs(band[best])) best = t;
            double h = 0;
            for (int t = i; t < j; ++t) h = std::max(h, integ[t]);
            cands.emplace_back(best, h);
            i = j;
        } else {
            ++i;
        }
    }
    if (cands.empty()) return {};

    // pass 2: reject regions far below the median beat energy (T waves, noise)
    std::vector<double> heights;
    for (auto& [idx, h] : cands) heights.push_back(h);
    std::nth_element(heights.begin(), heights.begin() + heights.size() / 2, heights.end());
    const double med = heights[heights.size() / 2];
    const double thr2 = 0.2 * med;

    std::vector<std::pair<int, double>> kept;
    for (const auto& c : cands)
        if (c.second >= thr2) kept.push_back(c);

    // refractory: within 20 samples keep the stronger candidate
    std::sort(kept.begin(), kept.end());
    std::vector<std::pair<int, double>> out;
    for (const auto& c : kept) {
        if (!out.empty() && c.first - out.back().first < 20) {
            if (c.second > out.back().second) out.back() = c;
        } else {
            out.push_back(c);
        }
    }
    std::vector<int> idx;
    for (const auto& c : out) idx.push_back(c.first);
    return idx;
}

inline std::vector<double> lead_row(const MatF& signal, int lead) {
    std::vector<double> v(static_cast<size_t>(signal.cols()));
    for (Eigen::Index i = 0; i < signal.cols(); ++i) v[i] = signal(lead, i);
    return v;
}

struct InsufficientBeatsError : ValidationError {
    InsufficientBeatsError() : ValidationError("fewer than 2 R-peaks detected") {}
};

// median RR on lead II, falling back to the strongest lead
inline double estimate_heart_rate(const EcgRecord& rec) {
    rec.validate();
    auto peaks = detect_r_peaks(lead_row(rec.signal, 1));
    if (peaks.size() < 2) {
        int best = 0;
        double best_amp = -1;
        for (int l = 0; l < kLeads; ++l) {
            const double amp = rec.signal.row(l).cwiseAbs().maxCoeff();
            if (amp > best_amp) {
                best_amp = amp;
                best = l;
            }
        }
        peaks = detect_r_peaks(lead_row(rec.signal, best));
        if (peaks.size() < 2) throw InsufficientBeatsError();
    }
    std::vector<double> rrs;
    for (size_t i = 1; i < peaks.size(); ++i) rrs.push_back(peaks[i] - peaks[i - 1]);
    std::sort(rrs.begin(), rrs.end());
    const double med = rrs.size() % 2 ? rrs[rrs.size() / 2]
                                      : 0.5 * (rrs[rrs.size() / 2 - 1] + rrs[rrs.size() / 2]);
    return 60.0 * kSampleRate / med;
}

// ---------- resampling ----------

// Windowed-sinc downsampling onto the 12x1024 grid; kernel rows are
// normalized so constants pass through exactly.
inline MatD resample_to_grid(const MatD& signal, double src_rate) {
    if (src_rate < kSampleRate) throw ValidationError("resample_to_grid: src_rate must be >= 102.4");
    const Eigen::Index n_src = signal.cols();
    const double dur = static_cast<double>(n_src) / src_rate;
    if (std::abs(dur - kDuration) > 1.5 / src_rate)
        throw ValidationError("resample_to_grid: input must cover 10 seconds");
    if (signal.rows() != kLeads) throw ValidationError("resample_to_grid: expected 12 leads");

    const double ratio = src_rate / kSampleRate;  // >= 1
    const int half = static_cast<int>(std::ceil(8.0 * ratio));
    MatD out(kLeads, kSamples);
    std::vector<double> w(2 * half + 1);
    for (Eigen::Index j = 0; j < kSamples; ++j) {
        const double c = static_cast<double>(j) * ratio;
        const int i0 = static_cast<int>(std::floor(c)) - half;
        double wsum = 0.0;
        for (int t = 0; t <= 2 * half; ++t) {
            const int i = i0 + t;
            const double x = (static_cast<double>(i) - c) / ratio;  // in output-sample units
            double sinc = x == 0.0 ? 1.0 : std::sin(M_PI * x) / (M_PI * x);
            const double u = (static_cast<double>(i) - c) / (half + 1.0);
            const double hann = (std::abs(u) < 1.0) ? 0.5 * (1.0 + std::cos(M_PI * u)) : 0.0;
            w[t] = sinc * hann;
            wsum += w[t];
        }
        for (int l = 0; l < kLeads; ++l) {
            double acc = 0.0;
            for (int t = 0; t <= 2 * half; ++t) {
                int i = i0 + t;
                if (i < 0) i = 0;
                if (i >= n_src) i = static_cast<int>(n_src) - 1;
                acc += w[t] * signal(l, i);
            }
            out(l, j) = acc / wsum;
        }
    }
    return out;
}

// ---------- pairing ----------

// All chronologically ordered same-patient pairs; singleton patients excluded.
// Returns indices into the input corpus (reference, target).
inline std::vector<std::pair<int, int>> pair_records(const std::vector<EcgRecord>& corpus) {
    std::map<std::string, std::vector<int>> by_patient;
    for (int i = 0; i < static_cast<int>(corpus.size()); ++i)
        by_patient[corpus[i].patient_id].push_back(i);
    std::vector<std::pair<int, int>> pairs;
    for (auto& [pid, idxs] : by_patient) {
        if (idxs.size() < 2) continue;
        std::sort(idxs.begin(), idxs.end(), [&](int a, int b) {
            if (corpus[a].timestamp != corpus[b].timestamp)
                return corpus[a].timestamp < corpus[b].timestamp;
            return corpus[a].record_id < corpus[b].record_id;
        });
        for (size_t i = 0; i < idxs.size(); ++i)
            for (size_t j = i + 1; j < idxs.size(); ++j) pairs.emplace_back(idxs[i], idxs[j]);
    }
    return pairs;
}

// ---------- corpus generation ----------

struct CorpusParams {
    int train_patients = 200;
    int test_patients = 30;
    int records_min = 12;
    int records_max = 40;
    double noise_level = 0.03;
    uint64_t seed = 1;
};

struct Corpus {
    std::vector<EcgRecord> records;
    std::map<std::string, std::string> split;  // patient_id -> "train"|"test"

    std::vector<EcgRecord> subset(const std::string& which) const {
        std::vector<EcgRecord> out;
        for (const auto& r : records)
            if (split.at(r.patient_id) == which) out.push_back(r);
        return out;
    }
};

namespace detail {

// baseline 12-lead morphology template; per-patient jitter plants identity
struct LeadTemplate {
    double p, q, r, s, t;
};

inline const std::array<LeadTemplate, kLeads>& lead_templates() {
    static const std::array<LeadTemplate, kLeads> tpl = {{
        {0.08, -0.08, 0.80, -0.20, 0.22},   // I
        {0.15, -0.10, 1.20, -0.25, 0.32},   // II
        {0.08, -0.06, 0.60, -0.15, 0.15},   // III
        {-0.10, 0.08, -0.90, 0.20, -0.25},  // aVR
        {0.04, -0.05, 0.40, -0.12, 0.12},   // aVL
        {0.10, -0.08, 0.90, -0.20, 0.25},   // aVF
        {0.05, -0.04, -0.50, -0.45, 0.10},  // V1
        {0.06, -0.05, -0.30, -0.50, 0.25},  // V2
        {0.07, -0.06, 0.50, -0.40, 0.30},   // V3
        {0.08, -0.08, 1.40, -0.30, 0.35},   // V4
        {0.09, -0.09, 1.60, -0.22, 0.30},   // V5
        {0.09, -0.08, 1.30, -0.18, 0.26},   // V6
    }};
    return tpl;
}

}  // namespace detail

inline PatientProfile make_profile(uint64_t corpus_seed, const std::string& patient_id) {
    Rng rng(derive_seed(corpus_seed, "profile/" + patient_id));
    PatientProfile prof;
    prof.patient_id = patient_id;
    prof.sex = rng.uniform() < 0.5 ? 0 : 1;
    prof.age = std::round(rng.uniform(20.0, 90.0));
    prof.baseline_hr = rng.uniform(55.0, 95.0);

    const double global = rng.uniform(0.7, 1.3);
    const double widths[kWaves] = {0.050, 0.016, 0.024, 0.020, 0.090};
    const double offsets[kWaves] = {-0.18, -0.048, 0.0, 0.042, 0.28};
    const auto& tpl = detail::lead_templates();
    for (int l = 0; l < kLeads; ++l) {
        const double amps[kWaves] = {tpl[l].p, tpl[l].q, tpl[l].r, tpl[l].s, tpl[l].t};
        for (int w = 0; w < kWaves; ++w) {
            WaveComponent& wc = prof.waves[l][w];
            wc.amp = amps[w] * global * rng.uniform(0.75, 1.25);
            wc.width = widths[w] * rng.uniform(0.8, 1.25);
            wc.offset = offsets[w] + (w == R ? 0.0 : rng.uniform(-0.015, 0.015));
        }
    }
    return prof;
}

inline std::vector<MorphologyTag> draw_tags(Rng& rng) {
    const TagKind abnormal[7] = {TagKind::pvc,         TagKind::wide_qrs,
                                 TagKind::low_voltage, TagKind::tachycardia,
                                 TagKind::bradycardia, TagKind::st_elevation,
                                 TagKind::inverted_t};
    const TagKind morph_only[5] = {TagKind::pvc, TagKind::wide_qrs, TagKind::low_voltage,
                                   TagKind::st_elevation, TagKind::inverted_t};
    std::vector<MorphologyTag> tags;
    if (rng.uniform() < 0.45) {
        tags.push_back({TagKind::normal_sinus, {}});
        return tags;
    }
    const TagKind first = abnormal[rng.uniform_int(0, 6)];
    tags.push_back({first, {}});
    if (rng.uniform() < 0.25) {
        const TagKind second = morph_only[rng.uniform_int(0, 4)];
        if (second != first) tags.push_back({second, {}});
    }
    return tags;
}

inline EcgRecord make_patient_record(const PatientProfile& prof, int record_idx,
                                     uint64_t corpus_seed, double noise_level) {
    Rng rng(derive_seed(corpus_seed, prof.patient_id + "/rec" + std::to_string(record_idx)));
    auto tags = draw_tags(rng);
    double hr = prof.baseline_hr + rng.uniform(-12.0, 12.0);
    for (const auto& t : tags) {
        if (t.kind == TagKind::tachycardia) hr = rng.uniform(105.0, 150.0);
        if (t.kind == TagKind::bradycardia) hr = rng.uniform(40.0, 55.0);
    }
    hr = std::round(clampd(hr, 45.0, 155.0));

    EcgRecord rec = synthesize_record(prof, tags, hr, noise_level,
                                      derive_seed(corpus_seed, prof.patient_id + "/sig" +
                                                                   std::to_string(record_idx)));
    char buf[16];
    std::snprintf(buf, sizeof(buf), "r%03d", record_idx);
    rec.record_id = prof.patient_id + "-" + buf;
    rec.timestamp = 1600000000LL + static_cast<int64_t>(record_idx) * 86400 +
                    static_cast<int64_t>(rng.uniform(0.0, 3600.0));
    return rec;
}

inline Corpus generate_corpus(const CorpusParams& params) {
    Corpus corpus;
    auto add_patients = [&](int count, const std::string& split, const std::string& prefix) {
        for (int p = 0; p < count; ++p) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%s%04d", prefix.c_str(), p);
            const std::string pid = buf;
            const PatientProfile prof = make_profile(params.seed, pid);
            Rng rng(derive_seed(params.seed, "count/" + pid));
            const int n_records = rng.uniform_int(params.records_min, params.records_max);
            for (int r = 0; r < n_records; ++r)
                corpus.records.push_back(
                    make_patient_record(prof, r, params.seed, params.noise_level));
            corpus.split[pid] = split;
        }
    };
    add_patients(params.train_patients, "train", "ptr");
    add_patients(params.test_patients, "test", "pte");
    return corpus;
}

// ---------- ECGR v1 file format ----------
//
// <record_id>.ecgr : 12x1024 little-endian float32, row-major lead order
// <record_id>.json : sidecar with patient/condition metadata
// manifest.json    : record ids plus the train/test split

namespace ecgr {

inline void write_payload(const std::filesystem::path& path, const MatF& signal) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ValidationError("cannot open for write: " + path.string());
    for (int l = 0; l < kLeads; ++l)
        for (int i = 0; i < kSamples; ++i) {
            const float v = signal(l, i);
            f.write(reinterpret_cast<const char*>(&v), sizeof(float));
        }
}

inline MatF read_payload(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("cannot open: " + path.string());
    MatF sig(kLeads, kSamples);
    for (int l = 0; l < kLeads; ++l)
        for (int i = 0; i < kSamples; ++i) {
            float v;
            f.read(reinterpret_cast<char*>(&v), sizeof(float));
            sig(l, i) = v;
        }
    if (!f) throw ValidationError("short read: " + path.string());
    return sig;
}

inline void write_record(const std::filesystem::path& dir, const EcgRecord& rec,
                         const std::string& model_digest = "") {
    rec.validate();
    write_payload(dir / (rec.record_id + ".ecgr"), rec.signal);
    nlohmann::json j;
    j["patient_id"] = rec.patient_id;
    j["record_id"] = rec.record_id;
    j["timestamp"] = rec.timestamp;
    j["age"] = rec.condition.age;
    j["sex"] = rec.condition.sex;
    j["heart_rate"] = rec.condition.heart_rate;
    j["reports"] = rec.condition.reports;
    if (!model_digest.empty()) j["model_digest"] = model_digest;
    std::ofstream f(dir / (rec.record_id + ".json"));
    f << j.dump(2) << "\n";
}

inline EcgRecord read_record(const std::filesystem::path& dir, const std::string& record_id,
                             std::string* model_digest = nullptr) {
    EcgRecord rec;
    rec.signal = read_payload(dir / (record_id + ".ecgr"));
    std::ifstream f(dir / (record_id + ".json"));
    if (!f) throw ValidationError("missing sidecar for " + record_id);
    nlohmann::json j;
    f >> j;
    rec.patient_id = j.at("patient_id").get<std::string>();
    rec.record_id = j.at("record_id").get<std::string>();
    rec.timestamp = j.at("timestamp").get<int64_t>();
    rec.condition.age = j.at("age").get<double>();
    rec.condition.sex = j.at("sex").get<int>();
    rec.condition.heart_rate = j.at("heart_rate").get<double>();
    rec.condition.reports = j.at("reports").get<std::vector<std::string>>();
    if (model_digest && j.contains("model_digest"))
        *model_digest = j.at("model_digest").get<std::string>();
    return rec;
}

inline void write_corpus(const std::filesystem::path& dir, const Corpus& corpus,
                         uint64_t seed, const std::string& config_digest) {
    std::filesystem::create_directories(dir);
    // deterministic ordering by (patient_id, record_id)
    std::vector<const EcgRecord*> sorted;
    for (const auto& r : corpus.records) sorted.push_back(&r);
    std::sort(sorted.begin(), sorted.end(), [](const EcgRecord* a, const EcgRecord* b) {
        if (a->patient_id != b->patient_id) return a->patient_id < b->patient_id;
        return a->record_id < b->record_id;
    });
    nlohmann::json manifest;
    manifest["format"] = "ECGR v1";
    manifest["seed"] = seed;
    manifest["config_digest"] = config_digest;
    auto& list = manifest["records"] = nlohmann::json::array();
    for (const EcgRecord* r : sorted) {
        write_record(dir, *r);
        list.push_back({{"id", r->record_id},
                        {"patient_id", r->patient_id},
                        {"split", corpus.split.at(r->patient_id)}});
    }
    std::ofstream f(dir / "manifest.json");
    f << manifest.dump(2) << "\n";
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
    std::ifstream f(dir / "manifest.json");
    if (!f) throw ValidationError("no manifest.json in " + dir.string());
    nlohmann::json manifest;
    f >> manifest;
    Corpus corpus;
    for (const auto& e : manifest.at("records")) {
        const std::string id = e.at("id").get<std::string>();
        corpus.records.push_back(read_record(dir, id));
        corpus.split[e.at("patient_id").get<std::string>()] = e.at("split").get<std::string>();
    }
    return corpus;
}

}  // namespace ecgr

}  // namespace ecgtwin
