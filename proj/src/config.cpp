#include "evresid/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace evresid {

namespace {
std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}
} // namespace

RunConfig::RunConfig() {
    auto I = [&](const char* k, int64_t v) { schema_[k] = {Kind::kInt, std::to_string(v)}; };
    auto F = [&](const char* k, double v) {
        std::ostringstream os;
        os << v;
        schema_[k] = {Kind::kFloat, os.str()};
    };
    auto B = [&](const char* k, bool v) { schema_[k] = {Kind::kBool, v ? "true" : "false"}; };
    auto S = [&](const char* k, const char* v) { schema_[k] = {Kind::kString, v}; };

    // event representation
    I("bins", 2);
    I("n_targets", 5);
    S("time_norm", "span"); // span | firstlast

    // model
    I("feat_dim", 32);
    I("downsample", 4);
    I("lookup_radius", 3);
    I("pyramid_levels", 2);
    I("global_iters", 4);
    I("refine_iters", 4);
    I("hidden_dim", 32);
    I("context_dim", 32);
    I("motion_dim", 32);
    B("coord_grad", true); // gradient through lookup coordinates
    B("detach_estimators", true);
    S("upsample_mode", "bilinear");
    I("model_seed", 1234);

    // training
    F("lr", 1e-4);
    I("steps", 2000);
    I("batch", 2);
    F("gamma", 0.8);
    F("clip", 1.0);
    I("seed", 0);
    I("warmup_steps", 30);
    I("log_every", 10);
    I("val_every", 100);
    S("noise", "regional"); // regional | white | none
    F("noise_weight", 0.3);
    I("noise_s", 6);
    F("noise_prob", 0.6);
    B("self_supervised", false);
    B("velocity_transform", true);

    // synthetic scenes
    I("width", 128);
    I("height", 96);
    F("contrast", 0.2);
    I("duration_us", 54000);
    I("t_k_us", 9000);
    I("scenes_train", 14);
    I("scenes_val", 4);
    I("scenes_test", 4);
    F("noise_rate", 0.0); // uniform noise events per pixel per unit time
    I("synth_seed", 7);

    // inference / evaluation
    I("freq", 1);
    S("precision", "f32"); // f32 | f64
    B("iwe_signed", false);
}

const RunConfig::Entry& RunConfig::entry(const std::string& key) const {
    auto it = schema_.find(key);
    if (it == schema_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = schema_.find(key);
    if (it == schema_.end()) throw ConfigError("unknown config key: " + key);
    const std::string v = trim(value);
    switch (it->second.kind) {
        case Kind::kInt: {
            try {
                size_t pos = 0;
                (void)std::stoll(v, &pos);
                if (pos != v.size()) throw std::invalid_argument(v);
            } catch (const std::exception&) {
                throw ConfigError("key '" + key + "' expects an integer, got '" + v + "'");
            }
            break;
        }
        case Kind::kFloat: {
            try {
                size_t pos = 0;
                (void)std::stod(v, &pos);
                if (pos != v.size()) throw std::invalid_argument(v);
            } catch (const std::exception&) {
                throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
            }
            break;
        }
        case Kind::kBool: {
            if (v != "true" && v != "false" && v != "1" && v != "0")
                throw ConfigError("key '" + key + "' expects true/false, got '" + v + "'");
            break;
        }
        case Kind::kString:
            break;
    }
    it->second.value = v;
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
        try {
            set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

int64_t RunConfig::geti(const std::string& key) const {
    const Entry& e = entry(key);
    if (e.kind != Kind::kInt) throw ConfigError("key '" + key + "' is not an integer");
    return std::stoll(e.value);
}

double RunConfig::getf(const std::string& key) const {
    const Entry& e = entry(key);
    if (e.kind != Kind::kFloat && e.kind != Kind::kInt)
        throw ConfigError("key '" + key + "' is not a number");
    return std::stod(e.value);
}

bool RunConfig::getb(const std::string& key) const {
    const Entry& e = entry(key);
    if (e.kind != Kind::kBool) throw ConfigError("key '" + key + "' is not a boolean");
    return e.value == "true" || e.value == "1";
}

const std::string& RunConfig::gets(const std::string& key) const {
    return entry(key).value;
}

std::string RunConfig::dump() const {
    std::ostringstream os;
    for (const auto& [k, e] : schema_) os << k << " = " << e.value << "\n";
    return os.str();
}

} // namespace evresid
