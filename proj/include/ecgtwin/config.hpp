#pragma once

// Layered run configuration: built-in defaults < config file < ECGTWIN_*
// environment variables < command-line overrides. Unknown keys are rejected
// and the fully resolved tree is echoed into every output artifact.

#include "ecgtwin/common.hpp"

#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

extern "C" char** environ;

namespace ecgtwin {

class RunConfig {
public:
    static nlohmann::json defaults() {
        return nlohmann::json{
            {"seed", 1},
            {"mode", "vae"},  // "vae" | "signal"
            {"threads", 1},
            {"corpus",
             {{"train_patients", 200},
              {"test_patients", 30},
              {"records_min", 12},
              {"records_max", 40},
              {"noise_level", 0.03}}},
            {"embed", {{"report_dim", 64}}},
            {"vae", {{"kl_weight", 1e-4}, {"epochs", 30}, {"batch", 16}, {"lr", 1e-3}}},
            {"extractor",
             {{"d_model", 256},
              {"layers", 3},
              {"heads", 4},
              {"epochs", 40},
              {"batch", 256},
              {"lr", 1e-3},
              {"mask_prob", 0.15},
              {"tau_init", 0.07}}},
            {"diffusion",
             {{"d_model", 256},
              {"blocks", 7},
              {"heads", 4},
              {"epochs", 30},
              {"batch", 64},
              {"lr", 1e-4},
              {"base_mask_prob", 0.15},
              {"zhat0_clamp", 5.0}}},
            {"schedule", {{"T", 1000}, {"beta_start", 8.5e-4}, {"beta_end", 1.2e-2}}},
            {"loss", {{"literal_eq1", false}}},
            {"metrics", {{"include_self", false}, {"knn_k", 3}, {"fid_eps", 1e-6}}},
            {"edit", {{"tau_frac", 0.8}}},
            {"eval",
             {{"seeds", 1},
              {"classifier_epochs", 25},
              {"gen_per_patient", 12},
              {"quality_twins", 100}}},
            {"downstream",
             {{"min_records", 10},
              {"twins_per_condition", 5},
              {"finetune_epochs", 6},
              {"finetune_lr", 5e-4}}},
        };
    }

    RunConfig() : data_(defaults()) {}
    explicit RunConfig(nlohmann::json data) : data_(std::move(data)) {}

    static RunConfig resolve(const std::string& file_path,
                             const std::vector<std::string>& overrides, bool use_env = true) {
        return resolve_over(defaults(), file_path, overrides, use_env);
    }

    // layering with an explicit base (e.g. the config stored in a checkpoint):
    // base < file < environment < overrides
    static RunConfig resolve_over(nlohmann::json tree, const std::string& file_path,
                                  const std::vector<std::string>& overrides, bool use_env = true) {
        if (!file_path.empty()) {
            std::ifstream f(file_path);
            if (!f) throw ValidationError("config file not found: " + file_path);
            nlohmann::json user;
            try {
                f >> user;
            } catch (const std::exception& e) {
                throw ValidationError(std::string("config parse error: ") + e.what());
            }
            merge(tree, user, "");
        }
        if (use_env) {
            for (char** env = environ; *env; ++env) {
                const std::string kv(*env);
                if (kv.rfind("ECGTWIN_", 0) != 0) continue;
                const auto eq = kv.find('=');
                if (eq == std::string::npos) continue;
                // ECGTWIN_section__key=value; double underscore separates levels
                std::string path = kv.substr(8, eq - 8);
                std::string dotted;
                for (size_t i = 0; i < path.size(); ++i) {
                    if (i + 1 < path.size() && path[i] == '_' && path[i + 1] == '_') {
                        dotted += '.';
                        ++i;
                    } else {
                        dotted += static_cast<char>(std::tolower(path[i]));
                    }
                }
                set_path(tree, dotted, kv.substr(eq + 1));
            }
        }
        for (const auto& ov : overrides) {
            const auto eq = ov.find('=');
            if (eq == std::string::npos)
                throw ValidationError("override must look like key.path=value: " + ov);
            set_path(tree, ov.substr(0, eq), ov.substr(eq + 1));
        }
        return RunConfig(std::move(tree));
    }

    template <class T>
    T get(const std::string& dotted) const {
        const nlohmann::json* node = &data_;
        size_t start = 0;
        while (true) {
            const auto dot = dotted.find('.', start);
            const std::string key = dotted.substr(start, dot - start);
            auto it = node->find(key);
            if (it == node->end()) throw ValidationError("unknown config key: " + dotted);
            node = &*it;
            if (dot == std::string::npos) break;
            start = dot + 1;
        }
        return node->get<T>();
    }

    void set(const std::string& dotted, const std::string& value) { set_path(data_, dotted, value); }

    const nlohmann::json& json() const { return data_; }
    std::string dump() const { return data_.dump(); }
    std::string digest() const { return hex64(fnv1a64(dump())); }

private:
    static void merge(nlohmann::json& base, const nlohmann::json& user, const std::string& prefix) {
        for (auto it = user.begin(); it != user.end(); ++it) {
            const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
            if (!base.contains(it.key())) throw ValidationError("unknown config key: " + path);
            if (base[it.key()].is_object() && it->is_object()) {
                merge(base[it.key()], *it, path);
            } else if (base[it.key()].is_object() != it->is_object()) {
                throw ValidationError("config key type mismatch at " + path);
            } else {
                base[it.key()] = *it;
            }
        }
    }

    static void set_path(nlohmann::json& tree, const std::string& dotted, const std::string& raw) {
        nlohmann::json* node = &tree;
        size_t start = 0;
        while (true) {
            const auto dot = dotted.find('.', start);
            const std::string key = dotted.substr(start, dot - start);
            if (!node->contains(key)) throw ValidationError("unknown config key: " + dotted);
            node = &(*node)[key];
            if (dot == std::string::npos) break;
            start = dot + 1;
        }
        if (node->is_object()) throw ValidationError("config key is a section, not a value: " + dotted);
        // keep the original type where possible
        try {
            if (node->is_string())
                *node = raw;
            else
                *node = nlohmann::json::parse(raw);
        } catch (const std::exception&) {
            throw ValidationError("cannot parse config value for " + dotted + ": " + raw);
        }
    }

    nlohmann::json data_;
};

}  // namespace ecgtwin
