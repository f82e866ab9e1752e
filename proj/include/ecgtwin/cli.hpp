#pragma once

// Command-line surface: synth-data | train | generate | edit | eval | plot.
// Exit codes: 0 success, 2 validation error, 3 dependency error, 4 numeric
// failure. Config layering and seeds make every command reproducible.

#include "ecgtwin/attention_edit.hpp"
#include "ecgtwin/checkpoint.hpp"
#include "ecgtwin/common.hpp"
#include "ecgtwin/config.hpp"
#include "ecgtwin/eval_suite.hpp"
#include "ecgtwin/plot_svg.hpp"
#include "ecgtwin/signal_forge.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

namespace ecgtwin::cli {

namespace fs = std::filesystem;

// ---------- small shared helpers ----------

inline std::vector<EcgRecord> split_records(const Corpus& corpus, const std::string& which) {
    return corpus.subset(which);
}

inline NormStats stats_of(const std::vector<EcgRecord>& records) {
    std::vector<CardiacCondition> conds;
    conds.reserve(records.size());
    for (const auto& r : records) conds.push_back(r.condition);
    return compute_norm_stats(conds);
}

inline CardiacCondition condition_from_json(const nlohmann::json& j) {
    CardiacCondition c;
    c.reports = j.value("reports", std::vector<std::string>{});
    c.age = j.value("age", 60.0);
    c.sex = j.value("sex", 0);
    c.heart_rate = j.value("heart_rate", 75.0);
    return c;
}

inline CardiacCondition condition_from_tags(const std::string& tags_csv, double hr, double age,
                                            int sex) {
    CardiacCondition c;
    c.age = age;
    c.sex = sex;
    c.heart_rate = hr;
    std::stringstream ss(tags_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        bool known = false;
        for (int i = 0; i < kTagCount; ++i) {
            if (item == tag_name(static_cast<TagKind>(i))) {
                c.reports.emplace_back(tag_report(static_cast<TagKind>(i)));
                known = true;
                break;
            }
        }
        if (!known) c.reports.push_back(item);  // free-text report
    }
    return c;
}

inline void write_loss_csv(const fs::path& path, const std::vector<double>& losses) {
    std::ofstream f(path);
    f << "epoch,loss\n";
    for (size_t i = 0; i < losses.size(); ++i) f << i + 1 << "," << losses[i] << "\n";
}

inline const EcgRecord& find_record(const Corpus& corpus, const std::string& id) {
    for (const auto& r : corpus.records)
        if (r.record_id == id) return r;
    throw ValidationError("unknown record id: " + id);
}

// run fn(i) for i in [0, n) across `threads` workers; results must be written
// into preallocated slots so the outcome is order-independent
template <class F>
void parallel_for(int n, int threads, F&& fn) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w)
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (auto& t : pool) t.join();
}

// materialize every lazily-created parameter once so read-only parallel use
// never mutates the stores
inline void warmup_models(Checkpoint& ck) {
    NormStats st = ck.has_stats ? ck.stats : NormStats{50, 10, 75, 15};
    CardiacCondition empty_cond;
    CardiacCondition one_cond;
    one_cond.reports = {"warmup"};
    const MatF z = MatF::Zero(ck.codec.channels(), ck.codec.positions());
    if (ck.has_extractor()) {
        extract_base<float>(z, nullptr, ck.extractor, st);
        extract_base<float>(z, &one_cond, ck.extractor, st);
        extract_base<float>(z, &empty_cond, ck.extractor, st);
    }
    if (ck.has_predictor()) {
        predict_noise<float>(ck.predictor, z, 1, nullptr, one_cond, st);
        predict_noise<float>(ck.predictor, z, 1, nullptr, empty_cond, st);
    }
}

// ---------- synth-data ----------

inline int cmd_synth_data(const RunConfig& cfg, const std::string& out, bool force) {
    const fs::path dir(out);
    if (fs::exists(dir) && !fs::is_empty(dir) && !force)
        throw ValidationError("output directory is not empty (use --force): " + out);
    CorpusParams params;
    params.train_patients = cfg.get<int>("corpus.train_patients");
    params.test_patients = cfg.get<int>("corpus.test_patients");
    params.records_min = cfg.get<int>("corpus.records_min");
    params.records_max = cfg.get<int>("corpus.records_max");
    params.noise_level = cfg.get<double>("corpus.noise_level");
    params.seed = cfg.get<uint64_t>("seed");
    const Corpus corpus = generate_corpus(params);
    ecgr::write_corpus(dir, corpus, params.seed, cfg.digest());
    std::cout << "wrote " << corpus.records.size() << " records ("
              << params.train_patients << " train / " << params.test_patients
              << " test patients) to " << out << "\n";
    return 0;
}

// ---------- train ----------

inline int cmd_train(const std::string& stage, const std::string& corpus_dir,
                     const std::string& out, const std::string& in_ckpt, bool resume,
                     const std::string& config_file, const std::vector<std::string>& overrides) {
    Checkpoint ck;
    if (!in_ckpt.empty()) {
        ck = load_checkpoint(in_ckpt);
        ck.config = RunConfig::resolve_over(ck.config.json(), config_file, overrides);
    } else {
        ck.config = RunConfig::resolve(config_file, overrides);
    }
    const RunConfig& cfg = ck.config;
    const uint64_t seed = cfg.get<uint64_t>("seed");
    const LatentMode mode =
        cfg.get<std::string>("mode") == "signal" ? LatentMode::signal : LatentMode::vae;
    ck.codec.mode = mode;

    const Corpus corpus = ecgr::load_corpus(corpus_dir);
    const auto train_records = split_records(corpus, "train");
    if (train_records.empty()) throw ValidationError("corpus has no train split records");
    ck.stats = stats_of(train_records);
    ck.has_stats = true;

    if (stage == "vae") {
        if (mode == LatentMode::signal)
            throw ValidationError("signal mode has no VAE stage; train extractor directly");
        if (!resume) ck.codec.vae = Vae<float>();
        VaeTrainConfig tc;
        tc.epochs = cfg.get<int>("vae.epochs");
        tc.batch = cfg.get<int>("vae.batch");
        tc.lr = cfg.get<double>("vae.lr");
        tc.kl_weight = cfg.get<double>("vae.kl_weight");
        tc.seed = derive_seed(seed, "train-vae");
        const TrainLog log = train_vae(ck.codec, train_records, tc);
        auto& hist = ck.loss_history["vae"];
        hist.insert(hist.end(), log.epoch_loss.begin(), log.epoch_loss.end());
    } else if (stage == "extractor") {
        if (mode == LatentMode::vae && !ck.codec.vae.trained)
            throw DependencyError("stage extractor requires a checkpoint with a trained vae"
                                  " (run train --stage vae first)");
        if (!resume) {
            ck.extractor = Extractor<float>();
            ck.extractor.d_model = cfg.get<int>("extractor.d_model");
            ck.extractor.layers = cfg.get<int>("extractor.layers");
            ck.extractor.heads = cfg.get<int>("extractor.heads");
            ck.extractor.embed_dim = cfg.get<int>("embed.report_dim");
        }
        ExtractorTrainConfig tc;
        tc.epochs = cfg.get<int>("extractor.epochs");
        tc.batch = cfg.get<int>("extractor.batch");
        tc.lr = cfg.get<double>("extractor.lr");
        tc.mask_prob = cfg.get<double>("extractor.mask_prob");
        tc.tau_init = cfg.get<double>("extractor.tau_init");
        tc.literal_eq1 = cfg.get<bool>("loss.literal_eq1");
        tc.seed = derive_seed(seed, "train-extractor");
        const auto pairs = pair_records(train_records);
        const TrainLog log =
            train_extractor(ck.extractor, ck.codec, train_records, pairs, ck.stats, tc);
        auto& hist = ck.loss_history["extractor"];
        hist.insert(hist.end(), log.epoch_loss.begin(), log.epoch_loss.end());
    } else if (stage == "diffusion") {
        if (!ck.extractor.trained)
            throw DependencyError("stage diffusion requires a trained extractor checkpoint"
                                  " (run train --stage extractor first)");
        if (mode == LatentMode::vae && !ck.codec.vae.trained)
            throw DependencyError("stage diffusion requires a trained vae checkpoint");
        if (!resume) {
            ck.predictor = Predictor<float>();
            ck.predictor.d_model = cfg.get<int>("diffusion.d_model");
            ck.predictor.blocks = cfg.get<int>("diffusion.blocks");
            ck.predictor.heads = cfg.get<int>("diffusion.heads");
            ck.predictor.embed_dim = cfg.get<int>("embed.report_dim");
        }
        ck.schedule = build_schedule(cfg.get<int>("schedule.T"),
                                     cfg.get<double>("schedule.beta_start"),
                                     cfg.get<double>("schedule.beta_end"));
        ck.has_schedule = true;
        DiffusionTrainConfig tc;
        tc.epochs = cfg.get<int>("diffusion.epochs");
        tc.batch = cfg.get<int>("diffusion.batch");
        tc.lr = cfg.get<double>("diffusion.lr");
        tc.base_mask_prob = cfg.get<double>("diffusion.base_mask_prob");
        tc.zhat0_clamp = cfg.get<double>("diffusion.zhat0_clamp");
        tc.seed = derive_seed(seed, "train-diffusion");
        const auto pairs = pair_records(train_records);
        const TrainLog log = train_diffusion(ck.predictor, ck.extractor, ck.codec, ck.schedule,
                                             train_records, pairs, ck.stats, tc);
        auto& hist = ck.loss_history["diffusion"];
        hist.insert(hist.end(), log.epoch_loss.begin(), log.epoch_loss.end());
    } else {
        throw ValidationError("unknown train stage: " + stage + " (vae|extractor|diffusion)");
    }

    save_checkpoint(out, ck);
    const fs::path loss_csv = fs::path(out).parent_path() / (stage + "_loss.csv");
    write_loss_csv(loss_csv, ck.loss_history[stage]);
    std::cout << "stage " << stage << " done; checkpoint " << out << "; loss curve "
              << loss_csv.string() << "\n";
    return 0;
}

// ---------- generate ----------

struct GenerateOptions {
    std::string checkpoint;
    std::string config_file;
    std::vector<std::string> overrides;
    std::string corpus_dir;
    std::string ref_id;
    bool no_ref = false;
    bool no_cref = false;
    std::string target_file;
    std::string tags;
    double hr = 75;
    double age = 60;
    int sex = 0;
    int n = 1;
    uint64_t seed = 1;
    int threads = 1;
    std::string out;
};

inline int cmd_generate(const GenerateOptions& opt) {
    Checkpoint ck = load_checkpoint(opt.checkpoint);
    ck.config = RunConfig::resolve_over(ck.config.json(), opt.config_file, opt.overrides);
    if (!ck.predictor.trained)
        throw DependencyError("generate: checkpoint has no trained diffusion stage");
    if (!ck.has_schedule) throw DependencyError("generate: checkpoint has no noise schedule");
    warmup_models(ck);

    CardiacCondition target;
    if (!opt.target_file.empty()) {
        std::ifstream f(opt.target_file);
        if (!f) throw ValidationError("cannot open target condition file: " + opt.target_file);
        nlohmann::json j;
        f >> j;
        target = condition_from_json(j);
    } else {
        target = condition_from_tags(opt.tags, opt.hr, opt.age, opt.sex);
    }

    VecF base;
    std::string patient_id = "anon";
    if (!opt.no_ref) {
        if (opt.ref_id.empty())
            throw ValidationError("generate: provide --ref RECORD_ID or --no-ref");
        const Corpus corpus = ecgr::load_corpus(opt.corpus_dir);
        const EcgRecord& ref = find_record(corpus, opt.ref_id);
        patient_id = ref.patient_id;
        const MatF z = ck.codec.encode(ref.signal, false).data;
        base = extract_base<float>(z, opt.no_cref ? nullptr : &ref.condition, ck.extractor,
                                   ck.stats);
    }

    fs::create_directories(opt.out);
    const double clamp_c = ck.config.get<double>("diffusion.zhat0_clamp");
    std::vector<EcgRecord> out_records(opt.n);
    parallel_for(opt.n, opt.threads, [&](int i) {
        GenerationRequest req;
        req.base = opt.no_ref ? nullptr : &base;
        req.target_condition = target;
        req.seed = derive_seed(opt.seed, static_cast<uint64_t>(i));
        EcgRecord rec = sample(req, ck.schedule, ck.predictor, ck.extractor, ck.codec, ck.stats,
                               clamp_c);
        rec.patient_id = patient_id;
        rec.record_id = "gen-" + std::to_string(opt.seed) + "-" + std::to_string(i);
        rec.timestamp = i;
        out_records[i] = std::move(rec);
    });

    nlohmann::json manifest;
    manifest["format"] = "ECGR v1";
    manifest["seed"] = opt.seed;
    manifest["config_digest"] = ck.config.digest();
    manifest["model_digest"] = ck.digest;
    auto& list = manifest["records"] = nlohmann::json::array();
    for (const auto& rec : out_records) {
        ecgr::write_record(opt.out, rec, ck.digest);
        list.push_back(
            {{"id", rec.record_id}, {"patient_id", rec.patient_id}, {"split", "generated"}});
    }
    std::ofstream f(fs::path(opt.out) / "manifest.json");
    f << manifest.dump(2) << "\n";
    std::cout << "generated " << opt.n << " records into " << opt.out << "\n";
    return 0;
}

// ---------- edit ----------

struct EditOptions {
    std::string checkpoint;
    std::string config_file;
    std::vector<std::string> overrides;
    std::string corpus_dir;
    std::string ref_id;
    bool no_ref = false;
    bool no_cref = false;
    std::string source_file;
    std::string tags;
    double hr = 75;
    double age = 60;
    int sex = 0;
    std::string new_report;
    int tau = -1;  // default 0.8*T
    uint64_t seed = 1;
    std::string out;
};

inline int cmd_edit(const EditOptions& opt) {
    Checkpoint ck = load_checkpoint(opt.checkpoint);
    ck.config = RunConfig::resolve_over(ck.config.json(), opt.config_file, opt.overrides);
    if (!ck.predictor.trained) throw DependencyError("edit: checkpoint has no trained diffusion");
    warmup_models(ck);

    CardiacCondition source;
    if (!opt.source_file.empty()) {
        std::ifstream f(opt.source_file);
        if (!f) throw ValidationError("cannot open source condition file: " + opt.source_file);
        nlohmann::json j;
        f >> j;
        source = condition_from_json(j);
    } else {
        source = condition_from_tags(opt.tags, opt.hr, opt.age, opt.sex);
    }

    VecF base;
    bool have_base = false;
    if (!opt.no_ref && !opt.ref_id.empty()) {
        const Corpus corpus = ecgr::load_corpus(opt.corpus_dir);
        const EcgRecord& ref = find_record(corpus, opt.ref_id);
        const MatF z = ck.codec.encode(ref.signal, false).data;
        base = extract_base<float>(z, opt.no_cref ? nullptr : &ref.condition, ck.extractor,
                                   ck.stats);
        have_base = true;
    }

    const int tau = opt.tau >= 0
                        ? opt.tau
                        : static_cast<int>(ck.config.get<double>("edit.tau_frac") * ck.schedule.T);
    EditSpec spec = EditSpec::appending(source, opt.new_report, tau, opt.seed);
    ModelBundle bundle{ck.schedule, ck.predictor, ck.extractor, ck.codec, ck.stats,
                       ck.config.get<double>("diffusion.zhat0_clamp")};
    AttentionMaps maps;
    auto [src, edited] = p2p_edit(spec, have_base ? &base : nullptr, bundle, &maps);

    fs::create_directories(opt.out);
    src.record_id = "edit-source";
    src.patient_id = "edit";
    edited.record_id = "edit-edited";
    edited.patient_id = "edit";
    ecgr::write_record(opt.out, src, ck.digest);
    ecgr::write_record(opt.out, edited, ck.digest);
    export_attention(fs::path(opt.out) / "attention", maps);
    std::cout << "edit done (tau=" << tau << "); source + edited records in " << opt.out << "\n";
    return 0;
}

// ---------- eval ----------

struct EvalOptions {
    std::string checkpoint;
    std::string config_file;
    std::vector<std::string> overrides;
    std::string corpus_dir;
    std::string which = "all";
    std::string out = "eval_out";
    int seeds = 1;
    std::string generated_dir;
    bool allow_mixed = false;
    int threads = 1;
};

struct QualityNumbers {
    double fid = 0, precision = 0, recall = 0, f1 = 0, hr_mae = 0;
    double alignment = 0, alignment_shuffled = 0;
    int n_real = 0, n_gen = 0, hr_used = 0, hr_skipped = 0;
};

// one quality pass at a given generation seed
inline QualityNumbers quality_pass(Checkpoint& ck, const std::vector<EcgRecord>& test_records,
                                   const std::vector<std::pair<int, int>>& test_pairs,
                                   TagClassifier& clf, uint64_t gen_seed, int n_twins, int knn_k,
                                   double fid_eps, int threads,
                                   const std::vector<EcgRecord>* pregen) {
    std::vector<EcgRecord> twins;
    std::vector<const EcgRecord*> real_targets;
    if (pregen) {
        twins = *pregen;
        for (const auto& r : test_records) real_targets.push_back(&r);
    } else {
        const int n = std::min<int>(n_twins, static_cast<int>(test_pairs.size()));
        if (n < 2) throw ValidationError("eval quality: not enough test pairs");
        const double clamp_c = ck.config.get<double>("diffusion.zhat0_clamp");
        // bases are deterministic per reference record; precompute serially
        std::map<int, VecF> base_cache;
        for (int i = 0; i < n; ++i) {
            const int ref_idx = test_pairs[i].first;
            if (!base_cache.count(ref_idx)) {
                const MatF z = ck.codec.encode(test_records[ref_idx].signal, false).data;
                base_cache[ref_idx] = extract_base<float>(
                    z, &test_records[ref_idx].condition, ck.extractor, ck.stats);
            }
        }
        twins.resize(n);
        parallel_for(n, threads, [&](int i) {
            const auto& [ref_idx, tar_idx] = test_pairs[i];
            GenerationRequest req;
            req.base = &base_cache.at(ref_idx);
            req.target_condition = test_records[tar_idx].condition;
            req.seed = derive_seed(gen_seed, static_cast<uint64_t>(i));
            EcgRecord rec = sample(req, ck.schedule, ck.predictor, ck.extractor, ck.codec,
                                   ck.stats, clamp_c);
            rec.patient_id = test_records[ref_idx].patient_id;
            rec.record_id = "twin-" + std::to_string(i);
            twins[i] = std::move(rec);
        });
        for (int i = 0; i < n; ++i) real_targets.push_back(&test_records[test_pairs[i].second]);
    }

    QualityNumbers q;
    q.n_real = static_cast<int>(real_targets.size());
    q.n_gen = static_cast<int>(twins.size());

    std::vector<VecD> real_feats, gen_feats;
    for (const auto* r : real_targets) real_feats.push_back(latent_features(ck.codec, *r));
    for (const auto& r : twins) gen_feats.push_back(latent_features(ck.codec, r));
    q.fid = compute_fid(real_feats, gen_feats, fid_eps);
    const auto pr = compute_precision_recall(real_feats, gen_feats, knn_k);
    q.precision = pr.precision;
    q.recall = pr.recall;
    q.f1 = pr.f1;
    const auto hr = compute_hr_mae(twins);
    q.hr_mae = hr.mae;
    q.hr_used = hr.used;
    q.hr_skipped = hr.skipped;
    q.alignment = compute_alignment(twins, clf);

    // shuffled-tag control: permute the report lists across twins
    std::vector<EcgRecord> shuffled = twins;
    std::vector<int> perm(shuffled.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>((i + 1) % perm.size());
    for (size_t i = 0; i < shuffled.size(); ++i)
        shuffled[i].condition.reports = twins[perm[i]].condition.reports;
    q.alignment_shuffled = compute_alignment(shuffled, clf);
    return q;
}

inline int cmd_eval(const EvalOptions& opt) {
    Checkpoint ck = load_checkpoint(opt.checkpoint);
    ck.config = RunConfig::resolve_over(ck.config.json(), opt.config_file, opt.overrides);
    const Corpus corpus = ecgr::load_corpus(opt.corpus_dir);
    const auto train_records = split_records(corpus, "train");
    const auto test_records = split_records(corpus, "test");
    if (test_records.empty()) throw ValidationError("eval: corpus has no test split");
    fs::create_directories(opt.out);

    const bool want_quality = opt.which == "quality" || opt.which == "all";
    const bool want_consistency = opt.which == "consistency" || opt.which == "all";
    const bool want_downstream = opt.which == "downstream" || opt.which == "all";
    if (!want_quality && !want_consistency && !want_downstream)
        throw ValidationError("eval: --which must be quality|consistency|downstream|all");

    if ((want_quality || want_consistency || want_downstream) && !ck.predictor.trained)
        throw DependencyError("eval: checkpoint has no trained diffusion stage");
    warmup_models(ck);

    // pre-generated records are only comparable when they came from this model
    std::vector<EcgRecord> pregen;
    bool have_pregen = false;
    if (!opt.generated_dir.empty()) {
        std::ifstream mf(fs::path(opt.generated_dir) / "manifest.json");
        if (!mf) throw ValidationError("generated dir has no manifest: " + opt.generated_dir);
        nlohmann::json manifest;
        mf >> manifest;
        const std::string gen_digest = manifest.value("model_digest", "");
        if (gen_digest != ck.digest && !opt.allow_mixed)
            throw ValidationError("eval: generated records come from a different model digest (" +
                                  gen_digest + " vs " + ck.digest + "); use --allow-mixed");
        for (const auto& e : manifest.at("records"))
            pregen.push_back(ecgr::read_record(opt.generated_dir, e.at("id").get<std::string>()));
        have_pregen = true;
    }

    nlohmann::json report;
    report["config_digest"] = ck.config.digest();
    report["model_digest"] = ck.digest;
    report["config"] = ck.config.json();

    if (want_quality) {
        TagClassifier clf;
        ClassifierTrainConfig cc;
        cc.epochs = ck.config.get<int>("eval.classifier_epochs");
        cc.seed = derive_seed(ck.config.get<uint64_t>("seed"), "eval-clf");
        train_tag_classifier(clf, train_records, cc);

        const auto test_pairs = pair_records(test_records);
        const int n_twins = ck.config.get<int>("eval.quality_twins");
        const int knn_k = ck.config.get<int>("metrics.knn_k");
        const double fid_eps = ck.config.get<double>("metrics.fid_eps");

        std::vector<QualityNumbers> runs;
        for (int s = 0; s < std::max(1, opt.seeds); ++s)
            runs.push_back(quality_pass(ck, test_records, test_pairs, clf,
                                        derive_seed(ck.config.get<uint64_t>("seed"),
                                                    "eval-gen" + std::to_string(s)),
                                        n_twins, knn_k, fid_eps, opt.threads,
                                        have_pregen ? &pregen : nullptr));

        auto mean_std = [&](auto getter) {
            double m = 0;
            for (const auto& r : runs) m += getter(r);
            m /= runs.size();
            double v = 0;
            for (const auto& r : runs) v += (getter(r) - m) * (getter(r) - m);
            return std::pair<double, double>(m, runs.size() > 1 ? std::sqrt(v / runs.size()) : 0.0);
        };
        nlohmann::json q;
        auto put = [&](const char* name, auto getter) {
            const auto [m, s] = mean_std(getter);
            q[name] = {{"mean", m}, {"std", s}};
        };
        put("fid", [](const QualityNumbers& r) { return r.fid; });
        put("precision", [](const QualityNumbers& r) { return r.precision; });
        put("recall", [](const QualityNumbers& r) { return r.recall; });
        put("f1", [](const QualityNumbers& r) { return r.f1; });
        put("hr_mae", [](const QualityNumbers& r) { return r.hr_mae; });
        put("alignment", [](const QualityNumbers& r) { return r.alignment; });
        put("alignment_shuffled", [](const QualityNumbers& r) { return r.alignment_shuffled; });
        q["classifier_macro_f1"] = clf.val_macro_f1;
        q["n_real"] = runs[0].n_real;
        q["n_gen"] = runs[0].n_gen;
        q["hr_skipped"] = runs[0].hr_skipped;
        q["knn_k"] = knn_k;
        q["feature_space"] = "flattened latent (substitution: deterministic VAE features)";
        q["alignment_note"] = "tag-classifier probability, substitution for CLIP score";
        report["quality"] = q;

        std::ofstream csv(fs::path(opt.out) / "quality.csv");
        csv << "metric,mean,std\n";
        for (const auto& name :
             {"fid", "precision", "recall", "f1", "hr_mae", "alignment", "alignment_shuffled"})
            csv << name << "," << q[name]["mean"].get<double>() << ","
                << q[name]["std"].get<double>() << "\n";
    }

    if (want_consistency) {
        // per test patient: earliest record is the reference, later records
        // supply target conditions
        std::map<std::string, std::vector<int>> by_patient;
        for (int i = 0; i < static_cast<int>(test_records.size()); ++i)
            by_patient[test_records[i].patient_id].push_back(i);
        const int per_patient = ck.config.get<int>("eval.gen_per_patient");
        const double clamp_c = ck.config.get<double>("diffusion.zhat0_clamp");

        struct Job {
            const EcgRecord* ref;
            const EcgRecord* target;
            int idx;
        };
        std::vector<Job> jobs;
        std::vector<VecF> bases;
        for (auto& [pid, idxs] : by_patient) {
            std::sort(idxs.begin(), idxs.end(), [&](int a, int b) {
                return test_records[a].timestamp < test_records[b].timestamp;
            });
            const EcgRecord& ref = test_records[idxs[0]];
            const MatF z = ck.codec.encode(ref.signal, false).data;
            bases.push_back(extract_base<float>(z, &ref.condition, ck.extractor, ck.stats));
            for (int k = 1; k < static_cast<int>(idxs.size()) && k <= per_patient; ++k)
                jobs.push_back(
                    {&ref, &test_records[idxs[k]], static_cast<int>(bases.size()) - 1});
        }
        auto generate_set = [&](bool zero_base) {
            std::vector<EcgRecord> out(jobs.size());
            parallel_for(static_cast<int>(jobs.size()), opt.threads, [&](int i) {
                GenerationRequest req;
                req.base = zero_base ? nullptr : &bases[jobs[i].idx];
                req.target_condition = jobs[i].target->condition;
                req.seed = derive_seed(ck.config.get<uint64_t>("seed"),
                                       "consist" + std::to_string(i) + (zero_base ? "z" : "b"));
                EcgRecord rec = sample(req, ck.schedule, ck.predictor, ck.extractor, ck.codec,
                                       ck.stats, clamp_c);
                rec.patient_id = jobs[i].ref->patient_id;
                rec.record_id = "consist-" + std::to_string(i);
                out[i] = std::move(rec);
            });
            return out;
        };
        const auto twins = generate_set(false);
        const auto twins_zero = generate_set(true);

        const auto rep = consistency_assessment(test_records, twins, ck.extractor, ck.codec,
                                                ck.stats);
        const auto rep_zero = consistency_assessment(test_records, twins_zero, ck.extractor,
                                                     ck.codec, ck.stats);
        nlohmann::json c;
        c["real"] = {{"similarity", rep.similarity_real}, {"silhouette", rep.silhouette_real}};
        c["generated"] = {{"similarity", rep.similarity_gen}, {"silhouette", rep.silhouette_gen}};
        c["mixed"] = {{"similarity", rep.similarity_mixed}, {"silhouette", rep.silhouette_mixed}};
        c["mixed_zero_base"] = {{"similarity", rep_zero.similarity_mixed},
                                {"silhouette", rep_zero.silhouette_mixed}};
        c["n_twins"] = twins.size();
        report["consistency"] = c;

        std::ofstream csv(fs::path(opt.out) / "consistency.csv");
        csv << "set,similarity,silhouette\n";
        csv << "real," << rep.similarity_real << "," << rep.silhouette_real << "\n";
        csv << "generated," << rep.similarity_gen << "," << rep.silhouette_gen << "\n";
        csv << "mixed," << rep.similarity_mixed << "," << rep.silhouette_mixed << "\n";
        csv << "mixed_zero_base," << rep_zero.similarity_mixed << "," << rep_zero.silhouette_mixed
            << "\n";

        // 2-D projection of the mixed base vectors for the plot command
        std::vector<VecD> vecs;
        std::vector<std::string> labels;
        for (const auto& r : test_records) {
            const MatF z = ck.codec.encode(r.signal, false).data;
            vecs.push_back(
                extract_base<float>(z, &r.condition, ck.extractor, ck.stats).cast<double>());
            labels.push_back(r.patient_id);
        }
        for (const auto& r : twins) {
            const MatF z = ck.codec.encode(r.signal, false).data;
            vecs.push_back(
                extract_base<float>(z, &r.condition, ck.extractor, ck.stats).cast<double>());
            labels.push_back(r.patient_id + "*");
        }
        const auto pts = project_2d(vecs);
        std::ofstream pcsv(fs::path(opt.out) / "projection.csv");
        pcsv << "x,y,label\n";
        for (size_t i = 0; i < pts.size(); ++i)
            pcsv << pts[i].first << "," << pts[i].second << "," << labels[i] << "\n";
    }

    if (want_downstream) {
        DownstreamConfig dc;
        dc.min_records = ck.config.get<int>("downstream.min_records");
        dc.twins_per_condition = ck.config.get<int>("downstream.twins_per_condition");
        dc.finetune_epochs = ck.config.get<int>("downstream.finetune_epochs");
        dc.finetune_lr = ck.config.get<double>("downstream.finetune_lr");
        dc.seed = derive_seed(ck.config.get<uint64_t>("seed"), "eval-downstream");
        ModelBundle bundle{ck.schedule, ck.predictor, ck.extractor, ck.codec, ck.stats,
                           ck.config.get<double>("diffusion.zhat0_clamp")};
        const auto rep = downstream_simulation(test_records, bundle, dc);
        nlohmann::json d;
        d["patient_wise"] = {{"accuracy", rep.patient_acc}, {"macro_f1", rep.patient_f1}};
        d["population_wise"] = {{"accuracy", rep.population_acc}, {"macro_f1", rep.population_f1}};
        d["baseline_patient_wise"] = {{"accuracy", rep.baseline_patient_acc},
                                      {"macro_f1", rep.baseline_patient_f1}};
        d["baseline_population_wise"] = {{"accuracy", rep.baseline_population_acc},
                                         {"macro_f1", rep.baseline_population_f1}};
        d["n_patients"] = rep.n_patients;
        d["mean_improvement"] = rep.mean_improvement;
        d["frac_improved"] = rep.frac_improved;
        report["downstream"] = d;

        std::ofstream csv(fs::path(opt.out) / "downstream.csv");
        csv << "scope,model,accuracy,macro_f1\n";
        csv << "patient,personalized," << rep.patient_acc << "," << rep.patient_f1 << "\n";
        csv << "patient,baseline," << rep.baseline_patient_acc << "," << rep.baseline_patient_f1
            << "\n";
        csv << "population,personalized," << rep.population_acc << "," << rep.population_f1
            << "\n";
        csv << "population,baseline," << rep.baseline_population_acc << ","
            << rep.baseline_population_f1 << "\n";
    }

    std::ofstream jf(fs::path(opt.out) / "report.json");
    jf << report.dump(2) << "\n";
    std::cout << "eval (" << opt.which << ") written to " << opt.out << "\n";
    return 0;
}

// ---------- plot ----------

struct PlotOptions {
    std::string kind;
    std::string csv;
    std::string corpus_dir;
    std::string record_id;
    std::string attention_dir;
    int token = 0;
    int lead = 6;  // V1
    std::string out = "plot.svg";
};

inline int cmd_plot(const PlotOptions& opt) {
    if (opt.kind == "ecg") {
        const Corpus corpus = ecgr::load_corpus(opt.corpus_dir);
        const EcgRecord& rec = find_record(corpus, opt.record_id);
        svg::write_ecg(opt.out, rec.signal, rec.record_id);
    } else if (opt.kind == "projection") {
        std::ifstream f(opt.csv);
        if (!f) throw ValidationError("cannot open csv: " + opt.csv);
        std::string line;
        std::getline(f, line);  // header
        std::vector<std::pair<double, double>> pts;
        std::vector<std::string> labels;
        while (std::getline(f, line)) {
            std::stringstream ss(line);
            std::string x, y, label;
            std::getline(ss, x, ',');
            std::getline(ss, y, ',');
            std::getline(ss, label, ',');
            if (x.empty()) continue;
            pts.emplace_back(std::stod(x), std::stod(y));
            labels.push_back(label);
        }
        svg::write_projection(opt.out, pts, labels, "base-vector 2-D projection");
    } else if (opt.kind == "loss") {
        std::ifstream f(opt.csv);
        if (!f) throw ValidationError("cannot open csv: " + opt.csv);
        std::string line;
        std::getline(f, line);
        std::vector<double> losses;
        while (std::getline(f, line)) {
            const auto comma = line.find(',');
            if (comma == std::string::npos) continue;
            losses.push_back(std::stod(line.substr(comma + 1)));
        }
        svg::write_loss(opt.out, losses, "training loss");
    } else if (opt.kind == "attention") {
        // average the chosen token's column over all captured steps
        std::ifstream idxf(fs::path(opt.attention_dir) / "attention_index.json");
        if (!idxf) throw ValidationError("no attention_index.json in " + opt.attention_dir);
        nlohmann::json index;
        idxf >> index;
        std::ifstream bin(fs::path(opt.attention_dir) / "maps.bin", std::ios::binary);
        std::string payload((std::istreambuf_iterator<char>(bin)),
                            std::istreambuf_iterator<char>());
        std::vector<double> weights;
        int count = 0;
        for (const auto& e : index.at("entries")) {
            const int rows = e.at("rows").get<int>();
            const int cols = e.at("cols").get<int>();
            const size_t off = e.at("offset").get<size_t>();
            if (opt.token >= cols) continue;
            if (weights.empty()) weights.assign(rows, 0.0);
            for (int r = 0; r < rows; ++r) {
                float v;
                std::memcpy(&v, payload.data() + off + sizeof(float) * (r * cols + opt.token),
                            sizeof(float));
                weights[r] += v;
            }
            ++count;
        }
        if (count == 0) throw ValidationError("attention plot: token index out of range");
        for (auto& w : weights) w /= count;
        const Corpus corpus = ecgr::load_corpus(opt.corpus_dir);
        const EcgRecord& rec = find_record(corpus, opt.record_id);
        svg::write_attention_overlay(opt.out, rec.signal, opt.lead, weights,
                                     "token " + std::to_string(opt.token) + " attention");
    } else {
        throw ValidationError("plot: --kind must be ecg|projection|loss|attention");
    }
    std::cout << "wrote " << opt.out << "\n";
    return 0;
}

// ---------- entry point ----------

inline int run(int argc, const char* const* argv) {
    CLI::App app{"ecgtwin: two-stage personalized ECG generation at desk scale"};
    app.require_subcommand(1);
    app.fallthrough();  // --config/--set may follow the subcommand

    std::string config_file;
    std::vector<std::string> overrides;
    app.add_option("--config", config_file, "JSON config file")->capture_default_str();
    app.add_option("--set", overrides, "config override key.path=value (repeatable)");

    // synth-data
    auto* synth = app.add_subcommand("synth-data", "generate the synthetic ECG corpus");
    std::string synth_out = "corpus";
    bool synth_force = false;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_flag("--force", synth_force, "overwrite a non-empty output directory");

    // train
    auto* train = app.add_subcommand("train", "train a pipeline stage");
    std::string train_stage, train_corpus, train_out = "ecgtwin.ckpt", train_in;
    bool train_resume = false;
    train->add_option("--stage", train_stage, "vae|extractor|diffusion")->required();
    train->add_option("--corpus", train_corpus, "corpus directory")->required();
    train->add_option("--out", train_out, "output checkpoint path");
    train->add_option("--checkpoint", train_in, "input checkpoint (stage dependencies)");
    train->add_flag("--resume", train_resume, "continue training the existing stage parameters");

    // generate
    auto* gen = app.add_subcommand("generate", "sample ECG digital twins");
    GenerateOptions gopt;
    gen->add_option("--checkpoint", gopt.checkpoint)->required();
    gen->add_option("--corpus", gopt.corpus_dir, "corpus with the reference record");
    gen->add_option("--ref", gopt.ref_id, "reference record id");
    gen->add_flag("--no-ref", gopt.no_ref, "zero-base non-personalized generation");
    gen->add_flag("--no-cref", gopt.no_cref, "mask the reference cardiac condition");
    gen->add_option("--target", gopt.target_file, "target condition JSON file");
    gen->add_option("--tags", gopt.tags, "target tags, comma separated");
    gen->add_option("--hr", gopt.hr, "target heart rate");
    gen->add_option("--age", gopt.age, "target age");
    gen->add_option("--sex", gopt.sex, "target sex (1 male / 0 female)");
    gen->add_option("-n,--count", gopt.n, "number of twins");
    gen->add_option("--seed", gopt.seed, "generation seed");
    gen->add_option("--threads", gopt.threads, "worker threads (results unchanged)");
    gen->add_option("--out", gopt.out, "output directory")->required();

    // edit
    auto* edit = app.add_subcommand("edit", "prompt-to-prompt editing");
    EditOptions eopt;
    edit->add_option("--checkpoint", eopt.checkpoint)->required();
    edit->add_option("--corpus", eopt.corpus_dir);
    edit->add_option("--ref", eopt.ref_id, "reference record id for the base vector");
    edit->add_flag("--no-ref", eopt.no_ref);
    edit->add_flag("--no-cref", eopt.no_cref);
    edit->add_option("--source", eopt.source_file, "source condition JSON file");
    edit->add_option("--tags", eopt.tags, "source tags, comma separated");
    edit->add_option("--hr", eopt.hr);
    edit->add_option("--age", eopt.age);
    edit->add_option("--sex", eopt.sex);
    edit->add_option("--new-report", eopt.new_report, "report token to append (empty = no-op)");
    edit->add_option("--tau", eopt.tau, "injection threshold step (default 0.8*T)");
    edit->add_option("--seed", eopt.seed);
    edit->add_option("--out", eopt.out, "output directory")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "run the evaluation protocols");
    EvalOptions vopt;
    eval->add_option("--checkpoint", vopt.checkpoint)->required();
    eval->add_option("--corpus", vopt.corpus_dir)->required();
    eval->add_option("--which", vopt.which, "quality|consistency|downstream|all");
    eval->add_option("--out", vopt.out, "report output directory");
    eval->add_option("--seeds", vopt.seeds, "repetitions; reports mean and std");
    eval->add_option("--generated", vopt.generated_dir, "pre-generated records directory");
    eval->add_flag("--allow-mixed", vopt.allow_mixed, "skip the model digest check");
    eval->add_option("--threads", vopt.threads);

    // plot
    auto* plot = app.add_subcommand("plot", "emit SVG figures");
    PlotOptions popt;
    plot->add_option("--kind", popt.kind, "ecg|projection|loss|attention")->required();
    plot->add_option("--csv", popt.csv, "input csv (projection/loss)");
    plot->add_option("--corpus", popt.corpus_dir, "corpus directory (ecg/attention)");
    plot->add_option("--record", popt.record_id, "record id (ecg/attention)");
    plot->add_option("--attention", popt.attention_dir, "attention export directory");
    plot->add_option("--token", popt.token, "condition token index");
    plot->add_option("--lead", popt.lead, "lead index 0-11");
    plot->add_option("--out", popt.out, "output svg path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (synth->parsed())
            return cmd_synth_data(RunConfig::resolve(config_file, overrides), synth_out,
                                  synth_force);
        if (train->parsed())
            return cmd_train(train_stage, train_corpus, train_out, train_in, train_resume,
                             config_file, overrides);
        if (gen->parsed()) {
            gopt.config_file = config_file;
            gopt.overrides = overrides;
            return cmd_generate(gopt);
        }
        if (edit->parsed()) {
            eopt.config_file = config_file;
            eopt.overrides = overrides;
            return cmd_edit(eopt);
        }
        if (eval->parsed()) {
            vopt.config_file = config_file;
            vopt.overrides = overrides;
            return cmd_eval(vopt);
        }
        if (plot->parsed()) return cmd_plot(popt);
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const DependencyError& e) {
        std::cerr << "dependency error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

inline int run_args(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.push_back("ecgtwin");
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace ecgtwin::cli
