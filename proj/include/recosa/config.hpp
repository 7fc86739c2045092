#pragma once

// Run configuration: one key=value file drives model geometry, training
// hyperparameters, and data paths. The effective configuration is echoed
// into every output directory so a run can be reproduced from its artifacts.

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "recosa/model.hpp"
#include "recosa/trainer.hpp"

namespace recosa {

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::string train_data;
    std::string valid_data;
    std::string vocab_file;
    std::string labels_file;
    std::string out_dir;
};

namespace detail {

inline const std::map<std::string, int>& config_schema() {
    // 0 = model key, 1 = train key, 2 = path key, 3 = shared seed
    static const std::map<std::string, int> schema = {
        {"d", 0},          {"heads", 0},        {"d_w", 0},
        {"d_h", 0},        {"vocab_size", 0},   {"max_turns", 0},
        {"max_sent_len", 0}, {"layernorm", 0},  {"dropout", 0},
        {"batch_size", 1}, {"lr", 1},           {"max_steps", 1},
        {"epochs", 1},     {"eval_interval", 1}, {"clip_norm", 1},
        {"beta1", 1},      {"beta2", 1},        {"eps", 1},
        {"train_data", 2}, {"valid_data", 2},   {"vocab", 2},
        {"labels", 2},     {"out_dir", 2},
        {"seed", 3},
    };
    return schema;
}

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
}

inline long parse_long(const std::map<std::string, std::string>& kv, const std::string& key, long dflt) {
    auto it = kv.find(key);
    if (it == kv.end()) return dflt;
    try {
        return std::stol(it->second);
    } catch (const std::exception&) {
        fail_data("bad integer for '" + key + "': " + it->second);
    }
}

inline std::string get_path(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    return it == kv.end() ? std::string() : it->second;
}

}  // namespace detail

// key=value lines; '#' starts a comment; blank lines ignored; duplicate or
// unknown keys are errors.
inline std::map<std::string, std::string> parse_config_kv(std::istream& in, const std::string& name) {
    std::map<std::string, std::string> kv;
    std::string line;
    long row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            fail_data(name + " line " + std::to_string(row) + ": expected key=value, got '" + line + "'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) fail_data(name + " line " + std::to_string(row) + ": empty key");
        if (!detail::config_schema().count(key))
            fail_data(name + " line " + std::to_string(row) + ": unknown key '" + key + "'");
        if (kv.count(key)) fail_data(name + " line " + std::to_string(row) + ": duplicate key '" + key + "'");
        kv[key] = value;
    }
    return kv;
}

inline RunConfig run_config_from_kv(const std::map<std::string, std::string>& kv) {
    for (const auto& [key, value] : kv)
        if (!detail::config_schema().count(key)) fail_data("unknown config key '" + key + "'");

    RunConfig rc;
    rc.model = ModelConfig::from_kv(kv);  // reads model keys + seed, ignores the rest
    rc.train.batch_size = ModelConfig::parse_int(kv, "batch_size", rc.train.batch_size);
    rc.train.lr = ModelConfig::parse_double(kv, "lr", rc.train.lr);
    rc.train.max_steps = detail::parse_long(kv, "max_steps", rc.train.max_steps);
    rc.train.epochs = ModelConfig::parse_int(kv, "epochs", rc.train.epochs);
    rc.train.eval_interval = detail::parse_long(kv, "eval_interval", rc.train.eval_interval);
    rc.train.clip_norm = ModelConfig::parse_double(kv, "clip_norm", rc.train.clip_norm);
    rc.train.beta1 = ModelConfig::parse_double(kv, "beta1", rc.train.beta1);
    rc.train.beta2 = ModelConfig::parse_double(kv, "beta2", rc.train.beta2);
    rc.train.eps = ModelConfig::parse_double(kv, "eps", rc.train.eps);
    rc.train.seed = rc.model.seed;  // one seed drives init, shuffling, dropout
    rc.train_data = detail::get_path(kv, "train_data");
    rc.valid_data = detail::get_path(kv, "valid_data");
    rc.vocab_file = detail::get_path(kv, "vocab");
    rc.labels_file = detail::get_path(kv, "labels");
    rc.out_dir = detail::get_path(kv, "out_dir");
    rc.train.ckpt_dir = rc.out_dir;
    return rc;
}

// overrides are applied after the file, last occurrence of a key winning.
inline RunConfig load_run_config(const std::string& path,
                                 const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
    std::map<std::string, std::string> kv;
    if (!path.empty()) {
        std::ifstream in(path, std::ios::binary);
        if (!in) fail_data("cannot open config file " + path);
        kv = parse_config_kv(in, path);
    }
    for (const auto& [key, value] : overrides) {
        if (!detail::config_schema().count(key)) fail_usage("unknown config key '" + key + "'");
        kv[key] = value;
    }
    return run_config_from_kv(kv);
}

// "key=value" as accepted on the command line.
inline std::pair<std::string, std::string> parse_override(const std::string& arg) {
    const std::size_t eq = arg.find('=');
    if (eq == std::string::npos || eq == 0) fail_usage("expected key=value, got '" + arg + "'");
    return {detail::trim(arg.substr(0, eq)), detail::trim(arg.substr(eq + 1))};
}

inline std::string serialize_run_config(const RunConfig& rc) {
    std::map<std::string, std::string> kv = rc.model.to_kv();
    kv["batch_size"] = std::to_string(rc.train.batch_size);
    kv["lr"] = ModelConfig::format_double(rc.train.lr);
    kv["max_steps"] = std::to_string(rc.train.max_steps);
    kv["epochs"] = std::to_string(rc.train.epochs);
    kv["eval_interval"] = std::to_string(rc.train.eval_interval);
    kv["clip_norm"] = ModelConfig::format_double(rc.train.clip_norm);
    kv["beta1"] = ModelConfig::format_double(rc.train.beta1);
    kv["beta2"] = ModelConfig::format_double(rc.train.beta2);
    kv["eps"] = ModelConfig::format_double(rc.train.eps);
    kv["train_data"] = rc.train_data;
    kv["valid_data"] = rc.valid_data;
    kv["vocab"] = rc.vocab_file;
    kv["labels"] = rc.labels_file;
    kv["out_dir"] = rc.out_dir;
    std::ostringstream os;
    os << "# effective configuration\n";
    for (const auto& [key, value] : kv) os << key << "=" << value << "\n";
    return os.str();
}

}  // namespace recosa
