#include "uninpaint/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "uninpaint/errors.hpp"

extern char** environ;

namespace uninpaint {

namespace {

nlohmann::json data_to_json(const DataConfig& d) {
    return {{"resolution", d.resolution},
            {"crop", to_string(d.crop)},
            {"holdout_fraction", d.holdout_fraction},
            {"synthetic_count", d.synthetic_count}};
}

DataConfig data_from_json(const nlohmann::json& j) {
    DataConfig d;
    d.resolution = j.value("resolution", d.resolution);
    d.crop = crop_mode_from_string(j.value("crop", to_string(d.crop)));
    d.holdout_fraction = j.value("holdout_fraction", d.holdout_fraction);
    d.synthetic_count = j.value("synthetic_count", d.synthetic_count);
    return d;
}

nlohmann::json eval_to_json(const EvalConfig& e) {
    return {{"n_z", e.n_z}, {"max_images", e.max_images}, {"batch_size", e.batch_size},
            {"embedder_seed", e.embedder_seed}};
}

EvalConfig eval_from_json(const nlohmann::json& j) {
    EvalConfig e;
    e.n_z = j.value("n_z", e.n_z);
    e.max_images = j.value("max_images", e.max_images);
    e.batch_size = j.value("batch_size", e.batch_size);
    e.embedder_seed = j.value("embedder_seed", e.embedder_seed);
    return e;
}

std::vector<std::string> split_key(const std::string& dotted) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : dotted) {
        if (c == '.') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    parts.push_back(cur);
    for (const auto& p : parts) {
        if (p.empty()) {
            throw ConfigError("malformed config key '" + dotted + "'");
        }
    }
    return parts;
}

} // namespace

void ExperimentConfig::validate() const {
    models.validate();
    train.validate();
    baseline.validate();
    if (data.resolution != models.generator.resolution) {
        throw ConfigError("data.resolution must equal the model resolution");
    }
    if (!(data.holdout_fraction >= 0.0 && data.holdout_fraction < 1.0) || data.synthetic_count < 1) {
        throw ConfigError("data.holdout_fraction must lie in [0, 1) and data.synthetic_count be >= 1");
    }
    if (eval.n_z < 2 || eval.max_images < 1 || eval.batch_size < 1) {
        throw ConfigError("eval.n_z must be >= 2, eval.max_images and eval.batch_size >= 1");
    }
}

nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json baseline = {{"test_fraction", c.baseline.test_fraction},
                               {"paired_adv_weight", c.baseline.paired_adv_weight},
                               {"misgan_imputer_weight", c.baseline.misgan_imputer_weight}};
    return {{"models", c.models},
            {"train", c.train},
            {"baseline", baseline},
            {"data", data_to_json(c.data)},
            {"eval", eval_to_json(c.eval)}};
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    try {
        ExperimentConfig c;
        if (j.contains("models")) {
            c.models = j.at("models").get<ModelSpecs>();
        }
        if (j.contains("train")) {
            c.train = j.at("train").get<TrainConfig>();
        }
        if (j.contains("baseline")) {
            const auto& b = j.at("baseline");
            c.baseline.test_fraction = b.value("test_fraction", c.baseline.test_fraction);
            c.baseline.paired_adv_weight = b.value("paired_adv_weight", c.baseline.paired_adv_weight);
            c.baseline.misgan_imputer_weight = b.value("misgan_imputer_weight", c.baseline.misgan_imputer_weight);
        }
        c.baseline.train = c.train;
        if (j.contains("data")) {
            c.data = data_from_json(j.at("data"));
        }
        if (j.contains("eval")) {
            c.eval = eval_from_json(j.at("eval"));
        }
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
}

nlohmann::json default_config_json() {
    return to_json(ExperimentConfig{});
}

nlohmann::json load_config_json(const std::filesystem::path& path, const std::map<std::string, std::string>& env) {
    auto config = default_config_json();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) {
            throw ConfigError("cannot open config file '" + path.string() + "'");
        }
        nlohmann::json file;
        try {
            in >> file;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
        }
        if (!file.is_object()) {
            throw ConfigError("config file '" + path.string() + "' must hold a JSON object");
        }
        config.merge_patch(file);
    }
    apply_env_overrides(config, env);
    return config;
}

void apply_override(nlohmann::json& config, const std::string& dotted_key, const std::string& value) {
    const auto parts = split_key(dotted_key);
    nlohmann::json* node = &config;
    for (const auto& p : parts) {
        if (!node->is_object() || !node->contains(p)) {
            throw ConfigError("unknown config key '" + dotted_key + "'");
        }
        node = &(*node)[p];
    }
    nlohmann::json parsed;
    try {
        parsed = nlohmann::json::parse(value);
    } catch (const nlohmann::json::exception&) {
        parsed = value;
    }
    if (node->is_string() && !parsed.is_string()) {
        parsed = value;
    }
    *node = parsed;
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "' is not of the form key=value");
    }
    apply_override(config, assignment.substr(0, eq), assignment.substr(eq + 1));
}

void apply_env_overrides(nlohmann::json& config, const std::map<std::string, std::string>& env) {
    const std::string prefix = kEnvPrefix;
    for (const auto& [name, value] : env) {
        if (name.rfind(prefix, 0) != 0) {
            continue;
        }
        std::string key;
        const auto rest = name.substr(prefix.size());
        for (std::size_t i = 0; i < rest.size(); ++i) {
            if (rest.compare(i, 2, "__") == 0) {
                key += '.';
                ++i;
            } else {
                key += static_cast<char>(std::tolower(static_cast<unsigned char>(rest[i])));
            }
        }
        apply_override(config, key, value);
    }
}

std::map<std::string, std::string> prefixed_environment() {
    std::map<std::string, std::string> out;
    const std::string prefix = kEnvPrefix;
    for (char** e = environ; e != nullptr && *e != nullptr; ++e) {
        std::string entry(*e);
        const auto eq = entry.find('=');
        if (eq != std::string::npos && entry.rfind(prefix, 0) == 0) {
            out[entry.substr(0, eq)] = entry.substr(eq + 1);
        }
    }
    return out;
}

} // namespace uninpaint
