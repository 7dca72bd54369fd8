#pragma once

#include <concepts>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "errors.hpp"

namespace simcgnn {

struct model_config {
    std::size_t d = 100;
    std::size_t layers = 1;
    double r = 12.0;          // logit scale for cosine scoring, must exceed 1
    double dropout = 0.1;
    std::size_t max_len = 50; // positional table rows
    double init_std = 0.1;
    bool norm = true;         // off: raw inner-product scoring without r
    bool pe = true;           // off: no positional term

    friend bool operator==(const model_config&, const model_config&) = default;
};

enum class negative_strategy { same_last_item, random };

struct contrastive_config {
    bool enabled = true;
    double tau = 12.0;
    std::size_t negatives = 32; // sessions per anchor; each contributes both twins
    negative_strategy strategy = negative_strategy::same_last_item;
    double beta = 0.1;
    // Positive term repeated once per negative inside the denominator.
    bool literal_denominator = false;

    bool active() const { return enabled && beta > 0.0; }
    friend bool operator==(const contrastive_config&, const contrastive_config&) = default;
};

struct train_config {
    std::size_t batch_size = 100;
    double lr = 1e-3;
    double lr_decay = 0.1;
    std::size_t lr_decay_every = 3;
    double weight_decay = 1e-5;
    std::size_t epochs = 10;
    std::uint64_t seed = 0;
    double valid_fraction = 0.1;
    std::size_t eval_k = 20;

    friend bool operator==(const train_config&, const train_config&) = default;
};

struct config {
    model_config model;
    contrastive_config contrastive;
    train_config train;

    void validate() const {
        detail::require(model.d >= 1, "model.d must be >= 1");
        detail::require(model.layers >= 1, "model.layers must be >= 1");
        detail::require(!model.norm || model.r > 1.0, "model.r must exceed 1");
        detail::require(model.dropout >= 0.0 && model.dropout < 1.0, "model.dropout must be in [0,1)");
        detail::require(model.max_len >= 1, "model.max_len must be >= 1");
        detail::require(contrastive.tau > 0.0, "contrastive.tau must be > 0");
        detail::require(contrastive.negatives >= 1, "contrastive.negatives must be >= 1");
        detail::require(contrastive.beta >= 0.0, "contrastive.beta must be >= 0");
        detail::require(contrastive.enabled || contrastive.strategy == negative_strategy::same_last_item,
                        "weakneg requires the contrastive module (contrast=off conflicts with weakneg=on)");
        detail::require(train.batch_size >= 1, "train.batch_size must be >= 1");
        detail::require(train.lr > 0.0, "train.lr must be > 0");
        detail::require(train.lr_decay > 0.0, "train.lr_decay must be > 0");
        detail::require(train.lr_decay_every >= 1, "train.lr_decay_every must be >= 1");
        detail::require(train.weight_decay >= 0.0, "train.weight_decay must be >= 0");
        detail::require(train.valid_fraction >= 0.0 && train.valid_fraction < 1.0,
                        "train.valid_fraction must be in [0,1)");
        detail::require(train.eval_k >= 1, "train.eval_k must be >= 1");
    }

    friend bool operator==(const config&, const config&) = default;
};

/// Unknown key or unparsable value in a config file or override.
class config_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& v) {
    if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
    if (v == "off" || v == "false" || v == "0" || v == "no") return false;
    throw config_error("expected on/off, got '" + v + "'");
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

struct config_field {
    std::string section;
    std::string key;
    std::function<std::string(const config&)> get;
    std::function<void(config&, const std::string&)> set;
};

template <typename T>
T parse_number(const std::string& v) {
    std::istringstream is(v);
    T out{};
    is >> out;
    if (!is || !is.eof()) throw config_error("bad number '" + v + "'");
    return out;
}

#define SIMCGNN_NUM_FIELD(sec, name, type)                                                          \
    config_field {                                                                                  \
        #sec, #name, [](const config& c) { return format_value(c.sec.name); },                      \
            [](config& c, const std::string& v) { c.sec.name = parse_number<type>(v); }             \
    }
#define SIMCGNN_BOOL_FIELD(sec, name, key)                                                          \
    config_field {                                                                                  \
        #sec, key, [](const config& c) { return std::string(c.sec.name ? "on" : "off"); },          \
            [](config& c, const std::string& v) { c.sec.name = parse_bool(v); }                     \
    }

inline std::string format_value(double v) { return format_double(v); }
template <std::unsigned_integral T>
std::string format_value(T v) {
    return std::to_string(v);
}

inline const std::vector<config_field>& config_fields() {
    static const std::vector<config_field> fields = {
        SIMCGNN_NUM_FIELD(model, d, std::size_t),
        SIMCGNN_NUM_FIELD(model, layers, std::size_t),
        SIMCGNN_NUM_FIELD(model, r, double),
        SIMCGNN_NUM_FIELD(model, dropout, double),
        SIMCGNN_NUM_FIELD(model, max_len, std::size_t),
        SIMCGNN_NUM_FIELD(model, init_std, double),
        SIMCGNN_BOOL_FIELD(model, norm, "norm"),
        SIMCGNN_BOOL_FIELD(model, pe, "pe"),
        SIMCGNN_BOOL_FIELD(contrastive, enabled, "contrast"),
        config_field{"contrastive", "weakneg",
                     [](const config& c) {
                         return std::string(c.contrastive.strategy == negative_strategy::random ? "on" : "off");
                     },
                     [](config& c, const std::string& v) {
                         c.contrastive.strategy =
                             parse_bool(v) ? negative_strategy::random : negative_strategy::same_last_item;
                     }},
        SIMCGNN_NUM_FIELD(contrastive, tau, double),
        SIMCGNN_NUM_FIELD(contrastive, negatives, std::size_t),
        SIMCGNN_NUM_FIELD(contrastive, beta, double),
        SIMCGNN_BOOL_FIELD(contrastive, literal_denominator, "literal_denominator"),
        SIMCGNN_NUM_FIELD(train, batch_size, std::size_t),
        SIMCGNN_NUM_FIELD(train, lr, double),
        SIMCGNN_NUM_FIELD(train, lr_decay, double),
        SIMCGNN_NUM_FIELD(train, lr_decay_every, std::size_t),
        SIMCGNN_NUM_FIELD(train, weight_decay, double),
        SIMCGNN_NUM_FIELD(train, epochs, std::size_t),
        SIMCGNN_NUM_FIELD(train, seed, std::uint64_t),
        SIMCGNN_NUM_FIELD(train, valid_fraction, double),
        SIMCGNN_NUM_FIELD(train, eval_k, std::size_t),
    };
    return fields;
}

#undef SIMCGNN_NUM_FIELD
#undef SIMCGNN_BOOL_FIELD

} // namespace detail

/// Sets one field. `key` is either "section.key" or a bare key that is unique
/// across sections ("lr", "contrast", "weakneg", ...).
/// `touched`, when given, collects the canonical "section.key" of each field set.
inline void set_config_value(config& c, const std::string& key, const std::string& value,
                             std::set<std::string>* touched = nullptr) {
    std::string section, name = key;
    if (auto dot = key.find('.'); dot != std::string::npos) {
        section = key.substr(0, dot);
        name = key.substr(dot + 1);
    }
    for (const auto& f : detail::config_fields()) {
        if (f.key == name && (section.empty() || f.section == section)) {
            try {
                f.set(c, detail::trim(value));
            } catch (const config_error& e) {
                throw config_error(key + ": " + e.what());
            }
            if (touched) touched->insert(f.section + "." + f.key);
            return;
        }
    }
    throw config_error("unknown config key '" + key + "'");
}

/// Flat key=value text with optional [section] headers; '#' starts a comment.
/// Keys absent from the file keep their defaults.
inline config parse_config(std::istream& in, config base = {}, std::set<std::string>* touched = nullptr) {
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw parse_error(lineno, "unterminated section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw parse_error(lineno, "expected key=value");
        const std::string key = detail::trim(line.substr(0, eq));
        try {
            set_config_value(base, section.empty() ? key : section + "." + key, line.substr(eq + 1), touched);
        } catch (const config_error& e) {
            throw parse_error(lineno, e.what());
        }
    }
    return base;
}

inline config load_config(const std::string& path, config base = {}, std::set<std::string>* touched = nullptr) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path);
    return parse_config(in, std::move(base), touched);
}

// Every field, defaults materialized, in the file format parse_config reads.
inline std::string format_config(const config& c) {
    std::ostringstream os;
    std::string section;
    for (const auto& f : detail::config_fields()) {
        if (f.section != section) {
            if (!section.empty()) os << '\n';
            section = f.section;
            os << '[' << section << "]\n";
        }
        os << f.key << '=' << f.get(c) << '\n';
    }
    return os.str();
}

inline std::map<std::string, std::string> config_entries(const config& c) {
    std::map<std::string, std::string> out;
    for (const auto& f : detail::config_fields()) out[f.section + "." + f.key] = f.get(c);
    return out;
}

} // namespace simcgnn
